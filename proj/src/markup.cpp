#include "inkdiff/markup.hpp"

#include "inkdiff/error.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <set>

namespace inkdiff {

const char* to_string(Grammar g) { return g == Grammar::formula ? "formula" : "boxes"; }

Grammar grammar_from_string(std::string_view name) {
    if (name == "formula") return Grammar::formula;
    if (name == "boxes") return Grammar::boxes;
    throw Error(ErrorCode::ConfigError, "unknown grammar '" + std::string(name) + "'");
}

void CanvasSpec::validate() const {
    if (height <= 0 || width <= 0) throw Error(ErrorCode::InvalidRange, "canvas dimensions must be positive");
    if (baseline_row + glyph_height + std::abs(sub_offset) > height || baseline_row - glyph_height + sup_offset < 0)
        throw Error(ErrorCode::InvalidRange, "baseline leaves no room for scripts");
}

// Tokenizer -------------------------------------------------------------------

namespace {

TokenSeq tokenize_formula(std::string_view src) {
    TokenSeq out;
    for (std::size_t i = 0; i < src.size(); ++i) {
        const char c = src[i];
        if (std::isspace(static_cast<unsigned char>(c))) continue;
        switch (c) {
            case '^': out.push_back({TokenKind::sup, "^", i}); break;
            case '_': out.push_back({TokenKind::sub, "_", i}); break;
            case '{': out.push_back({TokenKind::lbrace, "{", i}); break;
            case '}': out.push_back({TokenKind::rbrace, "}", i}); break;
            default:
                if (!is_glyph(c))
                    throw Error(ErrorCode::UnknownCharacter, std::string("unexpected '") + c + "'", i);
                out.push_back({TokenKind::glyph, std::string(1, c), i});
        }
    }
    return out;
}

TokenSeq tokenize_boxes(std::string_view src) {
    TokenSeq out;
    bool in_attrs = false;
    std::size_t i = 0;
    while (i < src.size()) {
        const char c = src[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (!in_attrs) {
            if (src.substr(i, 4) == "box(") {
                out.push_back({TokenKind::boxopen, "box(", i});
                in_attrs = true;
                i += 4;
            } else if (c == '{') {
                out.push_back({TokenKind::lbrace, "{", i++});
            } else if (c == '}') {
                out.push_back({TokenKind::rbrace, "}", i++});
            } else {
                throw Error(ErrorCode::UnknownCharacter, std::string("unexpected '") + c + "'", i);
            }
            continue;
        }
        if (c == ',') {
            ++i;
        } else if (c == ')') {
            out.push_back({TokenKind::boxclose, ")", i++});
            in_attrs = false;
        } else if (std::isdigit(static_cast<unsigned char>(c))) {
            const std::size_t start = i;
            while (i < src.size() && std::isdigit(static_cast<unsigned char>(src[i]))) ++i;
            out.push_back({TokenKind::attr, std::string(src.substr(start, i - start)), start});
        } else if (src.substr(i, 4) == "left") {
            out.push_back({TokenKind::attr, "left", i});
            i += 4;
        } else if (src.substr(i, 5) == "right") {
            out.push_back({TokenKind::attr, "right", i});
            i += 5;
        } else {
            throw Error(ErrorCode::UnknownCharacter, std::string("unexpected '") + c + "' in box attributes", i);
        }
    }
    return out;
}

}  // namespace

TokenSeq tokenize(std::string_view source, Grammar grammar) {
    bool blank = true;
    for (char c : source) blank = blank && std::isspace(static_cast<unsigned char>(c));
    if (blank) throw Error(ErrorCode::EmptySource, "empty markup source", 0);
    return grammar == Grammar::formula ? tokenize_formula(source) : tokenize_boxes(source);
}

// Parser ------------------------------------------------------------------------

namespace {

class Parser {
public:
    explicit Parser(const TokenSeq& t) : toks_(t) {}

    MarkupProgram formula() {
        MarkupProgram p;
        p.grammar = Grammar::formula;
        while (i_ < toks_.size()) {
            const Token& t = toks_[i_];
            FormulaItem item;
            if (t.kind == TokenKind::glyph) {
                item.base = t.payload[0];
                ++i_;
            } else if (t.kind == TokenKind::lbrace) {
                // `{}` placeholder for a removed base; must carry a script.
                if (i_ + 1 >= toks_.size()) throw Error(ErrorCode::UnbalancedBrace, "unclosed '{'", i_);
                if (toks_[i_ + 1].kind != TokenKind::rbrace)
                    throw Error(ErrorCode::UnexpectedToken, "group without a script modifier", i_);
                const std::size_t at = i_;
                i_ += 2;
                if (i_ >= toks_.size() || (toks_[i_].kind != TokenKind::sup && toks_[i_].kind != TokenKind::sub))
                    throw Error(ErrorCode::EmptyGroup, "'{}' must be followed by a script", at);
            } else if (t.kind == TokenKind::rbrace) {
                throw Error(ErrorCode::UnbalancedBrace, "unmatched '}'", i_);
            } else {
                throw Error(ErrorCode::UnexpectedToken, "script without a base", i_);
            }
            scripts(item);
            p.items.push_back(std::move(item));
        }
        return p;
    }

    MarkupProgram boxes() {
        MarkupProgram p;
        p.grammar = Grammar::boxes;
        p.boxes = box_list(1, /*top_level=*/true);
        return p;
    }

private:
    void scripts(FormulaItem& item) {
        while (i_ < toks_.size() && (toks_[i_].kind == TokenKind::sup || toks_[i_].kind == TokenKind::sub)) {
            const bool is_sup = toks_[i_].kind == TokenKind::sup;
            std::string& slot = is_sup ? item.sup : item.sub;
            if (!slot.empty()) throw Error(ErrorCode::UnexpectedToken, "repeated script modifier", i_);
            ++i_;
            if (i_ >= toks_.size() || toks_[i_].kind != TokenKind::lbrace)
                throw Error(ErrorCode::UnexpectedToken, "script modifier must be followed by '{'", i_);
            const std::size_t open = i_++;
            std::string glyphs;
            for (;;) {
                if (i_ >= toks_.size()) throw Error(ErrorCode::UnbalancedBrace, "unclosed '{'", open);
                const Token& t = toks_[i_];
                if (t.kind == TokenKind::rbrace) break;
                if (t.kind == TokenKind::glyph) {
                    glyphs += t.payload;
                    ++i_;
                    continue;
                }
                if (t.kind == TokenKind::sup || t.kind == TokenKind::sub || t.kind == TokenKind::lbrace)
                    throw Error(ErrorCode::DepthExceeded, "scripts cannot nest", i_);
                throw Error(ErrorCode::UnexpectedToken, "unexpected token in script group", i_);
            }
            if (glyphs.empty()) throw Error(ErrorCode::EmptyGroup, "empty script group", open);
            if (glyphs.size() > 3) throw Error(ErrorCode::GroupTooLong, "script groups hold at most 3 glyphs", open);
            ++i_;  // '}'
            slot = std::move(glyphs);
        }
    }

    std::vector<Box> box_list(int depth, bool top_level) {
        std::vector<Box> out;
        int width_sum = 0;
        while (i_ < toks_.size() && toks_[i_].kind == TokenKind::boxopen) {
            const std::size_t at = i_;
            if (depth > 2) throw Error(ErrorCode::DepthExceeded, "boxes nest at most two deep", at);
            ++i_;
            Box b;
            b.width_pct = width_attr();
            b.side = side_attr();
            expect(TokenKind::boxclose, "')'");
            if (i_ >= toks_.size() || toks_[i_].kind != TokenKind::lbrace)
                throw Error(ErrorCode::UnexpectedToken, "expected '{' after box attributes", i_);
            const std::size_t open = i_++;
            b.children = box_list(depth + 1, false);
            if (i_ >= toks_.size()) throw Error(ErrorCode::UnbalancedBrace, "unclosed '{'", open);
            expect(TokenKind::rbrace, "'}'");
            width_sum += b.width_pct;
            if (width_sum > 100) throw Error(ErrorCode::WidthExceeded, "sibling widths exceed 100%", at);
            out.push_back(std::move(b));
        }
        if (top_level && i_ < toks_.size()) {
            const auto kind = toks_[i_].kind;
            throw Error(kind == TokenKind::rbrace ? ErrorCode::UnbalancedBrace : ErrorCode::UnexpectedToken,
                        "unexpected token at top level", i_);
        }
        return out;
    }

    int width_attr() {
        if (i_ >= toks_.size() || toks_[i_].kind != TokenKind::attr ||
            !std::isdigit(static_cast<unsigned char>(toks_[i_].payload[0])))
            throw Error(ErrorCode::UnexpectedToken, "expected a width percentage", i_);
        const std::string& s = toks_[i_].payload;
        const int v = s.size() > 3 ? 1000 : std::stoi(s);
        if (v < 10 || v > 90) throw Error(ErrorCode::InvalidRange, "box width must be 10-90%", i_);
        ++i_;
        return v;
    }

    FloatSide side_attr() {
        if (i_ >= toks_.size() || toks_[i_].kind != TokenKind::attr ||
            (toks_[i_].payload != "left" && toks_[i_].payload != "right"))
            throw Error(ErrorCode::UnexpectedToken, "expected 'left' or 'right'", i_);
        return toks_[i_++].payload == "left" ? FloatSide::left : FloatSide::right;
    }

    void expect(TokenKind kind, const char* what) {
        if (i_ >= toks_.size() || toks_[i_].kind != kind)
            throw Error(kind == TokenKind::rbrace ? ErrorCode::UnbalancedBrace : ErrorCode::UnexpectedToken,
                        std::string("expected ") + what, i_);
        ++i_;
    }

    const TokenSeq& toks_;
    std::size_t i_ = 0;
};

}  // namespace

MarkupProgram parse(const TokenSeq& tokens, Grammar grammar) {
    Parser p(tokens);
    return grammar == Grammar::formula ? p.formula() : p.boxes();
}

MarkupProgram parse_source(std::string_view source, Grammar grammar) {
    return parse(tokenize(source, grammar), grammar);
}

// Canonical forms -----------------------------------------------------------------

namespace {

void box_tokens(const Box& b, TokenSeq& out) {
    out.push_back({TokenKind::boxopen, "box("});
    out.push_back({TokenKind::attr, std::to_string(b.width_pct)});
    out.push_back({TokenKind::attr, b.side == FloatSide::left ? "left" : "right"});
    out.push_back({TokenKind::boxclose, ")"});
    out.push_back({TokenKind::lbrace, "{"});
    for (const auto& c : b.children) box_tokens(c, out);
    out.push_back({TokenKind::rbrace, "}"});
}

void script_tokens(TokenKind kind, const std::string& glyphs, TokenSeq& out) {
    if (glyphs.empty()) return;
    out.push_back({kind, kind == TokenKind::sup ? "^" : "_"});
    out.push_back({TokenKind::lbrace, "{"});
    for (char g : glyphs) out.push_back({TokenKind::glyph, std::string(1, g)});
    out.push_back({TokenKind::rbrace, "}"});
}

void box_source(const Box& b, std::string& out) {
    out += "box(" + std::to_string(b.width_pct) + (b.side == FloatSide::left ? ",left){" : ",right){");
    for (const auto& c : b.children) box_source(c, out);
    out += '}';
}

}  // namespace

TokenSeq tokens_of(const MarkupProgram& p) {
    TokenSeq out;
    if (p.grammar == Grammar::formula) {
        for (const auto& item : p.items) {
            if (item.base) {
                out.push_back({TokenKind::glyph, std::string(1, *item.base)});
            } else {
                out.push_back({TokenKind::lbrace, "{"});
                out.push_back({TokenKind::rbrace, "}"});
            }
            script_tokens(TokenKind::sup, item.sup, out);
            script_tokens(TokenKind::sub, item.sub, out);
        }
    } else {
        for (const auto& b : p.boxes) box_tokens(b, out);
    }
    return out;
}

std::string to_source(const MarkupProgram& p) {
    std::string out;
    if (p.grammar == Grammar::formula) {
        for (const auto& t : tokens_of(p)) out += t.payload;
    } else {
        for (const auto& b : p.boxes) box_source(b, out);
    }
    return out;
}

// Layout and rendering ---------------------------------------------------------------

std::vector<PlacedGlyph> layout_formula(const MarkupProgram& p, const CanvasSpec& cs) {
    cs.validate();
    std::vector<PlacedGlyph> out;
    const int top = cs.baseline_row - cs.glyph_height;
    int x = 0;
    for (const auto& item : p.items) {
        int cursor = x;
        if (item.base) {
            out.push_back({*item.base, top, cursor});
            cursor += cs.advance;
        }
        for (std::size_t k = 0; k < item.sup.size(); ++k)
            out.push_back({item.sup[k], top + cs.sup_offset, cursor + static_cast<int>(k) * cs.advance});
        for (std::size_t k = 0; k < item.sub.size(); ++k)
            out.push_back({item.sub[k], top + cs.sub_offset, cursor + static_cast<int>(k) * cs.advance});
        x = cursor + static_cast<int>(std::max(item.sup.size(), item.sub.size())) * cs.advance;
        if (x > cs.width) throw Error(ErrorCode::CanvasOverflow, "formula wider than canvas");
    }
    return out;
}

namespace {

constexpr int kLeafBoxHeight = 8;
constexpr int kBoxInset = 2;  // border + one pixel of padding

int box_height(const Box& b) {
    if (b.children.empty()) return kLeafBoxHeight;
    int h = 0;
    for (const auto& c : b.children) h = std::max(h, box_height(c));
    return h + 2 * kBoxInset;
}

// Floats siblings inside [x0, x1): left floats pack rightwards from x0,
// right floats pack leftwards from x1, in document order.
void place_row(const std::vector<Box>& boxes, int x0, int x1, int y, const CanvasSpec& cs,
               std::vector<PlacedBox>& out) {
    const int span = x1 - x0;
    int left = x0;
    int right = x1;
    for (const auto& b : boxes) {
        const int w = b.width_pct * span / 100;
        const int h = box_height(b);
        if (w < 2 * kBoxInset + 1 || y + h > cs.height)
            throw Error(ErrorCode::CanvasOverflow, "box does not fit its container");
        int bx;
        if (b.side == FloatSide::left) {
            bx = left;
            left += w;
        } else {
            right -= w;
            bx = right;
        }
        if (left > right) throw Error(ErrorCode::CanvasOverflow, "floated boxes overlap");
        out.push_back({y, bx, h, w});
        if (!b.children.empty()) place_row(b.children, bx + kBoxInset, bx + w - kBoxInset, y + kBoxInset, cs, out);
    }
}

}  // namespace

std::vector<PlacedBox> layout_boxes(const MarkupProgram& p, const CanvasSpec& cs) {
    if (cs.height <= 0 || cs.width <= 0) throw Error(ErrorCode::InvalidRange, "canvas dimensions must be positive");
    std::vector<PlacedBox> out;
    place_row(p.boxes, 0, cs.width, 0, cs, out);
    return out;
}

void draw_box(ImageBuffer& img, const PlacedBox& b) {
    if (b.top < 0 || b.left < 0 || b.top + b.height > img.height || b.left + b.width > img.width)
        throw Error(ErrorCode::CanvasOverflow, "box outside canvas");
    for (int c = b.left; c < b.left + b.width; ++c) {
        img.at(b.top, c) = 0.0f;
        img.at(b.top + b.height - 1, c) = 0.0f;
    }
    for (int r = b.top; r < b.top + b.height; ++r) {
        img.at(r, b.left) = 0.0f;
        img.at(r, b.left + b.width - 1) = 0.0f;
    }
}

ImageBuffer render(const MarkupProgram& p, const CanvasSpec& cs) {
    ImageBuffer img(cs.height, cs.width, 1.0f);
    if (p.grammar == Grammar::formula) {
        for (const auto& g : layout_formula(p, cs)) stamp_glyph(img, g);
    } else {
        for (const auto& b : layout_boxes(p, cs)) draw_box(img, b);
    }
    return img;
}

// Token ids ----------------------------------------------------------------------------

namespace {

constexpr int kGlyphBase = 3;
constexpr int kNumGlyphs = 43;
constexpr int kSupId = kGlyphBase + kNumGlyphs;
constexpr int kSubId = kSupId + 1;
constexpr int kLbraceId = kSupId + 2;
constexpr int kRbraceId = kSupId + 3;
constexpr int kBoxOpenId = kSupId + 4;
constexpr int kBoxCloseId = kSupId + 5;
constexpr int kWidthBase = kSupId + 6;  // widths 10..90
constexpr int kLeftId = kWidthBase + 81;
constexpr int kRightId = kLeftId + 1;
constexpr int kVocabSize = kRightId + 1;

}  // namespace

int vocab_size() { return kVocabSize; }

int token_id(const Token& t) {
    switch (t.kind) {
        case TokenKind::glyph: {
            const auto pos = glyph_vocabulary().find(t.payload.at(0));
            if (pos == std::string_view::npos) throw Error(ErrorCode::UnknownCharacter, "glyph outside vocabulary");
            return kGlyphBase + static_cast<int>(pos);
        }
        case TokenKind::sup: return kSupId;
        case TokenKind::sub: return kSubId;
        case TokenKind::lbrace: return kLbraceId;
        case TokenKind::rbrace: return kRbraceId;
        case TokenKind::boxopen: return kBoxOpenId;
        case TokenKind::boxclose: return kBoxCloseId;
        case TokenKind::attr:
            if (t.payload == "left") return kLeftId;
            if (t.payload == "right") return kRightId;
            {
                const int v = std::stoi(t.payload);
                if (v < 10 || v > 90) throw Error(ErrorCode::InvalidRange, "width attribute outside 10-90");
                return kWidthBase + (v - 10);
            }
    }
    throw Error(ErrorCode::UnexpectedToken, "unknown token kind");
}

Token token_from_id(int id) {
    if (id >= kGlyphBase && id < kSupId)
        return {TokenKind::glyph, std::string(1, glyph_vocabulary()[static_cast<std::size_t>(id - kGlyphBase)])};
    switch (id) {
        case kSupId: return {TokenKind::sup, "^"};
        case kSubId: return {TokenKind::sub, "_"};
        case kLbraceId: return {TokenKind::lbrace, "{"};
        case kRbraceId: return {TokenKind::rbrace, "}"};
        case kBoxOpenId: return {TokenKind::boxopen, "box("};
        case kBoxCloseId: return {TokenKind::boxclose, ")"};
        case kLeftId: return {TokenKind::attr, "left"};
        case kRightId: return {TokenKind::attr, "right"};
        default: break;
    }
    if (id >= kWidthBase && id < kLeftId) return {TokenKind::attr, std::to_string(id - kWidthBase + 10)};
    throw Error(ErrorCode::InvalidRange, "token id " + std::to_string(id) + " has no token");
}

int TokenIds::length() const {
    int n = 0;
    for (auto m : mask) n += m;
    return n;
}

TokenIds encode(const MarkupProgram& p, int max_len) {
    if (max_len < 2) throw Error(ErrorCode::InvalidRange, "max_len must leave room for bos/eos");
    const TokenSeq toks = tokens_of(p);
    TokenIds out;
    out.ids.assign(static_cast<std::size_t>(max_len), kPadId);
    out.mask.assign(static_cast<std::size_t>(max_len), 0);
    const std::size_t body = std::min(toks.size(), static_cast<std::size_t>(max_len - 2));
    out.ids[0] = kBosId;
    for (std::size_t i = 0; i < body; ++i) out.ids[i + 1] = token_id(toks[i]);
    out.ids[body + 1] = kEosId;
    std::fill_n(out.mask.begin(), body + 2, 1);
    return out;
}

TokenSeq decode(const TokenIds& ids) {
    TokenSeq out;
    for (std::size_t i = 0; i < ids.ids.size(); ++i) {
        const int id = ids.ids[i];
        if (!ids.mask.empty() && !ids.mask[i]) continue;
        if (id == kPadId || id == kBosId || id == kEosId) continue;
        out.push_back(token_from_id(id));
    }
    return out;
}

// Perturbation ---------------------------------------------------------------------------

namespace {

int count_leaf_boxes(const std::vector<Box>& boxes) {
    int n = 0;
    for (const auto& b : boxes) n += b.children.empty() ? 1 : count_leaf_boxes(b.children);
    return n;
}

std::vector<Box> drop_leaf_boxes(const std::vector<Box>& boxes, const std::set<int>& drop, int& index) {
    std::vector<Box> out;
    for (const auto& b : boxes) {
        if (b.children.empty()) {
            if (!drop.contains(index++)) out.push_back(b);
            continue;
        }
        Box copy = b;
        copy.children = drop_leaf_boxes(b.children, drop, index);
        // A container emptied by the removal goes too, so it never turns into a new leaf.
        if (!copy.children.empty()) out.push_back(std::move(copy));
    }
    return out;
}

}  // namespace

int leaf_count(const MarkupProgram& p) {
    if (p.grammar == Grammar::boxes) return count_leaf_boxes(p.boxes);
    int n = 0;
    for (const auto& item : p.items)
        n += (item.base ? 1 : 0) + static_cast<int>(item.sup.size() + item.sub.size());
    return n;
}

MarkupProgram perturb(const MarkupProgram& p, int k, Stream& rng) {
    const int leaves = leaf_count(p);
    if (k < 0) throw Error(ErrorCode::InvalidRange, "k must be non-negative");
    if (k > leaves)
        throw Error(ErrorCode::NotEnoughSymbols,
                    "cannot remove " + std::to_string(k) + " of " + std::to_string(leaves) + " leaves");
    const auto order = permutation(static_cast<std::size_t>(leaves), rng);
    std::set<int> drop;
    for (int i = 0; i < k; ++i) drop.insert(static_cast<int>(order[static_cast<std::size_t>(i)]));

    MarkupProgram out;
    out.grammar = p.grammar;
    int index = 0;
    if (p.grammar == Grammar::boxes) {
        out.boxes = drop_leaf_boxes(p.boxes, drop, index);
        return out;
    }
    for (const auto& item : p.items) {
        FormulaItem kept;
        if (item.base && !drop.contains(index++)) kept.base = item.base;
        for (char g : item.sup)
            if (!drop.contains(index++)) kept.sup.push_back(g);
        for (char g : item.sub)
            if (!drop.contains(index++)) kept.sub.push_back(g);
        if (kept.base || !kept.sup.empty() || !kept.sub.empty()) out.items.push_back(std::move(kept));
    }
    return out;
}

// Corpus generation ---------------------------------------------------------------------------

namespace {

constexpr int kMaxAttempts = 100000;

MarkupProgram random_formula(int n_leaves, Stream& rng) {
    const auto vocab = glyph_vocabulary();
    auto glyph = [&] { return vocab[rng.uniform_int(vocab.size())]; };
    MarkupProgram p;
    p.grammar = Grammar::formula;
    int placed = 0;
    while (placed < n_leaves) {
        FormulaItem item;
        item.base = glyph();
        ++placed;
        int remaining = n_leaves - placed;
        if (remaining > 0 && rng.uniform() < 0.3) {
            const int len = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::min(3, remaining))));
            for (int i = 0; i < len; ++i) item.sup.push_back(glyph());
            placed += len;
            remaining -= len;
        }
        if (remaining > 0 && rng.uniform() < 0.2) {
            const int len = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::min(3, remaining))));
            for (int i = 0; i < len; ++i) item.sub.push_back(glyph());
            placed += len;
        }
        p.items.push_back(std::move(item));
    }
    return p;
}

std::vector<int> random_widths(int count, Stream& rng) {
    std::vector<int> widths;
    int used = 0;
    for (int i = 0; i < count; ++i) {
        const int reserve = 10 * (count - 1 - i);
        const int hi = std::min(90, 100 - used - reserve);
        const int w = 10 + 5 * static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>((hi - 10) / 5 + 1)));
        widths.push_back(w);
        used += w;
    }
    return widths;
}

std::optional<MarkupProgram> random_boxes(int n_boxes, Stream& rng) {
    MarkupProgram p;
    p.grammar = Grammar::boxes;
    const int top = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::min(3, n_boxes))));
    int remaining = n_boxes - top;
    const auto widths = random_widths(top, rng);
    for (int i = 0; i < top; ++i) {
        Box b;
        b.width_pct = widths[static_cast<std::size_t>(i)];
        b.side = rng.uniform() < 0.5 ? FloatSide::left : FloatSide::right;
        if (remaining > 0 && (i == top - 1 || rng.uniform() < 0.6)) {
            const int c = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::min(3, remaining))));
            remaining -= c;
            const auto cw = random_widths(c, rng);
            for (int j = 0; j < c; ++j) {
                Box child;
                child.width_pct = cw[static_cast<std::size_t>(j)];
                child.side = rng.uniform() < 0.5 ? FloatSide::left : FloatSide::right;
                b.children.push_back(child);
            }
        }
        p.boxes.push_back(std::move(b));
    }
    if (remaining != 0) return std::nullopt;
    return p;
}

int total_boxes(const std::vector<Box>& boxes) {
    int n = 0;
    for (const auto& b : boxes) n += 1 + total_boxes(b.children);
    return n;
}

}  // namespace

std::vector<Example> generate_corpus(Grammar grammar, int n, LengthRange lengths, const Stream& rng,
                                     const CanvasSpec& canvas) {
    if (n < 0 || lengths.min < 1 || lengths.max < lengths.min)
        throw Error(ErrorCode::InvalidRange, "invalid corpus size or length range");
    std::vector<Example> out;
    out.reserve(static_cast<std::size_t>(n));
    long attempts = 0;
    long accepted = 0;
    for (int i = 0; i < n; ++i) {
        Stream ex = rng.derive(static_cast<std::uint64_t>(i));
        for (;;) {
            ++attempts;
            if (attempts >= kMaxAttempts && accepted * 100 < attempts)
                throw Error(ErrorCode::GenerationStalled, "more than 99% of sampled programs were rejected");
            const int target =
                lengths.min + static_cast<int>(ex.uniform_int(static_cast<std::uint64_t>(lengths.max - lengths.min + 1)));
            std::optional<MarkupProgram> prog;
            if (grammar == Grammar::formula) {
                prog = random_formula(target, ex);
            } else {
                prog = random_boxes(target, ex);
                if (prog && total_boxes(prog->boxes) != target) prog.reset();
            }
            if (!prog) continue;
            try {
                ImageBuffer img = render(*prog, canvas);
                out.push_back({std::move(*prog), std::move(img)});
                ++accepted;
                break;
            } catch (const Error& e) {
                if (e.code() != ErrorCode::CanvasOverflow) throw;
            }
        }
    }
    return out;
}

}  // namespace inkdiff
