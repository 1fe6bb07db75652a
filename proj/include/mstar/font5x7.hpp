// Fixed 5x7 bitmap font for the synthetic renderer: digits and letters
// (lowercase input renders with the same glyph shapes). Each glyph is 7 rows
// of 5 bits, MSB = leftmost column.
#pragma once

#include <array>
#include <cstdint>

namespace mstar::font5x7 {

constexpr int kGlyphW = 5;
constexpr int kGlyphH = 7;

using Glyph = std::array<uint8_t, kGlyphH>;

constexpr Glyph kLetters[26] = {
    {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},  // a
    {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},  // b
    {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E},  // c
    {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E},  // d
    {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F},  // e
    {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},  // f
    {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F},  // g
    {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},  // h
    {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E},  // i
    {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},  // j
    {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11},  // k
    {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},  // l
    {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11},  // m
    {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11},  // n
    {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E},  // o
    {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},  // p
    {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D},  // q
    {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},  // r
    {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E},  // s
    {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},  // t
    {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E},  // u
    {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},  // v
    {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11},  // w
    {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},  // x
    {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04},  // y
    {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F},  // z
};

constexpr Glyph kDigits[10] = {
    {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E},  // 0
    {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},  // 1
    {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F},  // 2
    {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},  // 3
    {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},  // 4
    {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},  // 5
    {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},  // 6
    {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
    {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},  // 8
    {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},  // 9
};

constexpr Glyph kBlank = {0, 0, 0, 0, 0, 0, 0};

// Returns the glyph for a renderable character; space maps to a blank cell,
// anything else to nullptr.
inline const Glyph* glyph(char c) {
  if (c >= 'a' && c <= 'z') return &kLetters[c - 'a'];
  if (c >= '0' && c <= '9') return &kDigits[c - '0'];
  if (c == ' ') return &kBlank;
  return nullptr;
}

}  // namespace mstar::font5x7
