#pragma once

// Toy markup languages with exact ground-truth rendering.
//
// Two grammars are supported:
//
//   formula  a^{2}b_{k}x+1      glyphs with optional superscript/subscript
//                               groups of 1-3 glyphs, nesting depth 1.
//                               `{}` may stand in for a missing base glyph
//                               (produced by perturbation: `{}^{2}b`).
//   boxes    box(50,left){box(40,right){}}
//                               bordered boxes with a width percentage and a
//                               float side, nesting depth <= 2.

#include "inkdiff/image.hpp"
#include "inkdiff/rng.hpp"

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace inkdiff {

enum class Grammar { formula, boxes };

const char* to_string(Grammar g);
Grammar grammar_from_string(std::string_view name);

enum class TokenKind { glyph, sup, sub, lbrace, rbrace, boxopen, boxclose, attr };

struct Token {
    TokenKind kind;
    std::string payload;
    std::size_t position = 0;  // character offset in the source

    bool operator==(const Token& o) const { return kind == o.kind && payload == o.payload; }
};

using TokenSeq = std::vector<Token>;

/// The glyph vocabulary: digits, lowercase letters and `+-=()/*`.
std::string_view glyph_vocabulary();
bool is_glyph(char c);

struct FormulaItem {
    std::optional<char> base;
    std::string sup;  // empty = no superscript
    std::string sub;  // empty = no subscript

    bool operator==(const FormulaItem&) const = default;
};

enum class FloatSide { left, right };

struct Box {
    int width_pct = 50;
    FloatSide side = FloatSide::left;
    std::vector<Box> children;

    bool operator==(const Box&) const = default;
};

struct MarkupProgram {
    Grammar grammar = Grammar::formula;
    std::vector<FormulaItem> items;  // formula grammar
    std::vector<Box> boxes;          // boxes grammar

    bool empty() const { return items.empty() && boxes.empty(); }
    bool operator==(const MarkupProgram&) const = default;
};

struct CanvasSpec {
    int height = 32;
    int width = 96;
    int baseline_row = 19;
    int glyph_width = 5;
    int glyph_height = 7;
    int advance = 6;
    int sup_offset = -6;
    int sub_offset = 6;

    static CanvasSpec formula_default() { return {}; }
    static CanvasSpec boxes_default() { return {64, 64, 19, 5, 7, 6, -6, 6}; }
    static CanvasSpec for_grammar(Grammar g) { return g == Grammar::formula ? formula_default() : boxes_default(); }

    void validate() const;
    bool operator==(const CanvasSpec&) const = default;
};

TokenSeq tokenize(std::string_view source, Grammar grammar = Grammar::formula);
MarkupProgram parse(const TokenSeq& tokens, Grammar grammar);
MarkupProgram parse_source(std::string_view source, Grammar grammar);

/// Canonical source text; parse_source(to_source(p)) == p.
std::string to_source(const MarkupProgram& program);
/// Canonical token stream of a program (what tokenize(to_source(p)) yields).
TokenSeq tokens_of(const MarkupProgram& program);

/// A glyph stamp placed by the formula layout.
struct PlacedGlyph {
    char glyph;
    int top;   // first bitmap row
    int left;  // first bitmap column
};

/// An axis-aligned box outline placed by the boxes layout.
struct PlacedBox {
    int top, left, height, width;
};

/// Glyph positions of a formula program, in leaf (document) order.
std::vector<PlacedGlyph> layout_formula(const MarkupProgram& program, const CanvasSpec& canvas);
/// Box rectangles of a boxes program, in document order.
std::vector<PlacedBox> layout_boxes(const MarkupProgram& program, const CanvasSpec& canvas);

/// 7 rows of 5 bits (bit 4 = leftmost column) for a vocabulary glyph.
const std::array<unsigned char, 7>& glyph_bitmap(char c);
void stamp_glyph(ImageBuffer& img, const PlacedGlyph& g);
void draw_box(ImageBuffer& img, const PlacedBox& b);

ImageBuffer render(const MarkupProgram& program, const CanvasSpec& canvas);

// Token id encoding ---------------------------------------------------------

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

int vocab_size();
int token_id(const Token& t);
Token token_from_id(int id);

struct TokenIds {
    std::vector<int> ids;
    std::vector<unsigned char> mask;  // 1 for real positions (bos/eos included)

    int length() const;
    bool operator==(const TokenIds&) const = default;
};

TokenIds encode(const MarkupProgram& program, int max_len = 48);
TokenSeq decode(const TokenIds& ids);

// Corpus construction and perturbation ---------------------------------------

/// Number of removable leaves: glyphs for formulas, childless boxes for boxes.
int leaf_count(const MarkupProgram& program);

/// Removes exactly k uniformly chosen leaves. Emptied script groups are
/// dropped; a removed base glyph leaves `{}` behind when scripts remain.
MarkupProgram perturb(const MarkupProgram& program, int k, Stream& rng);

struct LengthRange {
    int min = 3;
    int max = 12;
};

struct Example {
    MarkupProgram program;
    ImageBuffer image;
};

/// Example i is drawn from rng.derive(i), so corpora can be sharded by index.
std::vector<Example> generate_corpus(Grammar grammar, int n, LengthRange lengths, const Stream& rng,
                                     const CanvasSpec& canvas);

}  // namespace inkdiff
