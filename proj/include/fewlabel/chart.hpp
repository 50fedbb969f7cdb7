#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fewlabel/image_io.hpp"

namespace fewlabel {

namespace detail {

// 5x7 bitmap font; bit 4 is the leftmost column.
inline const std::array<std::uint8_t, 7>* glyph(char c) {
  static const std::array<std::uint8_t, 7> digits[10] = {
      {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};
  static const std::array<std::uint8_t, 7> letters[26] = {
      {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}, {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},
      {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}, {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C},
      {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}, {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},
      {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}, {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},
      {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}, {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},
      {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}, {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},
      {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}, {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11},
      {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},
      {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}, {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},
      {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}, {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},
      {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},
      {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11}, {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},
      {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}};
  static const std::array<std::uint8_t, 7> dot = {0, 0, 0, 0, 0, 0x0C, 0x0C};
  static const std::array<std::uint8_t, 7> dash = {0, 0, 0, 0x1F, 0, 0, 0};
  static const std::array<std::uint8_t, 7> underscore = {0, 0, 0, 0, 0, 0, 0x1F};
  static const std::array<std::uint8_t, 7> percent = {0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13};
  static const std::array<std::uint8_t, 7> equals = {0, 0x1F, 0, 0x1F, 0, 0, 0};
  static const std::array<std::uint8_t, 7> colon = {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0};
  static const std::array<std::uint8_t, 7> plus = {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0};
  static const std::array<std::uint8_t, 7> slash = {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10};
  if (c >= '0' && c <= '9') return &digits[c - '0'];
  if (c >= 'A' && c <= 'Z') return &letters[c - 'A'];
  if (c >= 'a' && c <= 'z') return &letters[c - 'a'];
  switch (c) {
    case '.': return &dot;
    case '-': return &dash;
    case '_': return &underscore;
    case '%': return &percent;
    case '=': return &equals;
    case ':': return &colon;
    case '+': return &plus;
    case '/': return &slash;
    default: return nullptr;  // rendered as space
  }
}

}  // namespace detail

struct Color {
  std::uint8_t r, g, b;
};

inline void fill_rect(ImageRGB8& img, int x0, int y0, int w, int h, Color c) {
  for (int y = y0; y < y0 + h; ++y) {
    if (y < 0 || y >= img.height) continue;
    for (int x = x0; x < x0 + w; ++x) {
      if (x < 0 || x >= img.width) continue;
      img.at(y, x, 0) = c.r;
      img.at(y, x, 1) = c.g;
      img.at(y, x, 2) = c.b;
    }
  }
}

inline void draw_text(ImageRGB8& img, int x, int y, const std::string& text, Color c,
                      int scale = 1) {
  int cx = x;
  for (char ch : text) {
    const auto* g = detail::glyph(ch);
    if (g) {
      for (int row = 0; row < 7; ++row) {
        for (int col = 0; col < 5; ++col) {
          if (((*g)[row] >> (4 - col)) & 1) {
            fill_rect(img, cx + col * scale, y + row * scale, scale, scale, c);
          }
        }
      }
    }
    cx += 6 * scale;
  }
}

struct BarChartEntry {
  std::string label;
  double value = 0.0;
};

// Horizontal bar chart with an optional vertical reference line (drawn at
// the baseline value across the plot area).
inline void write_bar_chart(const std::string& path, const std::string& title,
                            const std::vector<BarChartEntry>& entries, double baseline = -1.0,
                            const std::string& baseline_label = "") {
  const int label_w = 170;
  const int plot_w = 420;
  const int value_w = 70;
  const int row_h = 22;
  const int top = 28;
  ImageRGB8 img;
  img.width = label_w + plot_w + value_w;
  img.height = top + row_h * static_cast<int>(entries.size()) + 26;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 255);

  const Color black{0, 0, 0};
  const Color bar{70, 110, 190};
  const Color ref{200, 40, 40};

  draw_text(img, 8, 8, title, black);
  double max_v = baseline > 0 ? baseline : 0.0;
  for (const auto& e : entries) max_v = std::max(max_v, e.value);
  if (max_v <= 0.0) max_v = 1.0;

  for (std::size_t i = 0; i < entries.size(); ++i) {
    const int y = top + static_cast<int>(i) * row_h;
    draw_text(img, 8, y + 6, entries[i].label, black);
    const int w = static_cast<int>(plot_w * entries[i].value / (1.1 * max_v));
    fill_rect(img, label_w, y + 4, w, row_h - 8, bar);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", entries[i].value);
    draw_text(img, label_w + plot_w + 6, y + 6, buf, black);
  }
  if (baseline > 0.0) {
    const int x = label_w + static_cast<int>(plot_w * baseline / (1.1 * max_v));
    fill_rect(img, x, top - 4, 2, row_h * static_cast<int>(entries.size()) + 8, ref);
    if (!baseline_label.empty()) {
      draw_text(img, std::max(8, x - 40), img.height - 14, baseline_label, ref);
    }
  }
  write_bmp(path, img);
}

}  // namespace fewlabel
