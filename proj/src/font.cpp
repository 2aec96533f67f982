#include "inkdiff/error.hpp"
#include "inkdiff/markup.hpp"

#include <array>
#include <string>

namespace inkdiff {

namespace {

struct GlyphRows {
    char glyph;
    const char* rows[7];
};

// 5x7 bitmaps, '#' = ink.
constexpr GlyphRows kFont[] = {
    {'0', {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."}},
    {'1', {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {'2', {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"}},
    {'3', {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."}},
    {'4', {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."}},
    {'5', {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."}},
    {'6', {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."}},
    {'7', {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."}},
    {'8', {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."}},
    {'9', {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."}},
    {'a', {".....", ".....", ".###.", "....#", ".####", "#...#", ".####"}},
    {'b', {"#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."}},
    {'c', {".....", ".....", ".###.", "#....", "#....", "#...#", ".###."}},
    {'d', {"....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"}},
    {'e', {".....", ".....", ".###.", "#...#", "#####", "#....", ".###."}},
    {'f', {"..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."}},
    {'g', {".....", ".####", "#...#", "#...#", ".####", "....#", ".###."}},
    {'h', {"#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"}},
    {'i', {"..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."}},
    {'j', {"...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."}},
    {'k', {"#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."}},
    {'l', {".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {'m', {".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"}},
    {'n', {".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"}},
    {'o', {".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."}},
    {'p', {".....", ".....", "####.", "#...#", "####.", "#....", "#...."}},
    {'q', {".....", ".....", ".##.#", "#..##", ".####", "....#", "....#"}},
    {'r', {".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."}},
    {'s', {".....", ".....", ".###.", "#....", ".###.", "....#", "####."}},
    {'t', {".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."}},
    {'u', {".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"}},
    {'v', {".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."}},
    {'w', {".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."}},
    {'x', {".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"}},
    {'y', {".....", ".....", "#...#", "#...#", ".####", "....#", ".###."}},
    {'z', {".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"}},
    {'+', {".....", "..#..", "..#..", "#####", "..#..", "..#..", "....."}},
    {'-', {".....", ".....", ".....", "#####", ".....", ".....", "....."}},
    {'=', {".....", ".....", "#####", ".....", "#####", ".....", "....."}},
    {'(', {"...#.", "..#..", ".#...", ".#...", ".#...", "..#..", "...#."}},
    {')', {".#...", "..#..", "...#.", "...#.", "...#.", "..#..", ".#..."}},
    {'/', {".....", "....#", "...#.", "..#..", ".#...", "#....", "....."}},
    {'*', {".....", "..#..", "#.#.#", ".###.", "#.#.#", "..#..", "....."}},
};

struct FontTable {
    std::array<std::array<unsigned char, 7>, 128> bits{};
    std::array<bool, 128> present{};
    std::string vocabulary;

    FontTable() {
        for (const auto& g : kFont) {
            auto& rows = bits[static_cast<unsigned char>(g.glyph)];
            for (int r = 0; r < 7; ++r) {
                unsigned char v = 0;
                for (int c = 0; c < 5; ++c)
                    if (g.rows[r][c] == '#') v |= static_cast<unsigned char>(1u << (4 - c));
                rows[r] = v;
            }
            present[static_cast<unsigned char>(g.glyph)] = true;
            vocabulary.push_back(g.glyph);
        }
    }
};

const FontTable& font() {
    static const FontTable table;
    return table;
}

}  // namespace

std::string_view glyph_vocabulary() { return font().vocabulary; }

bool is_glyph(char c) {
    const auto u = static_cast<unsigned char>(c);
    return u < 128 && font().present[u];
}

const std::array<unsigned char, 7>& glyph_bitmap(char c) {
    if (!is_glyph(c)) throw Error(ErrorCode::UnknownCharacter, std::string("no bitmap for '") + c + "'");
    return font().bits[static_cast<unsigned char>(c)];
}

void stamp_glyph(ImageBuffer& img, const PlacedGlyph& g) {
    const auto& rows = glyph_bitmap(g.glyph);
    for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 5; ++c)
            if (rows[r] & (1u << (4 - c))) {
                const int y = g.top + r;
                const int x = g.left + c;
                if (y < 0 || y >= img.height || x < 0 || x >= img.width)
                    throw Error(ErrorCode::CanvasOverflow, std::string("glyph '") + g.glyph + "' outside canvas");
                img.at(y, x) = 0.0f;
            }
}

}  // namespace inkdiff
