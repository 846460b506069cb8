#include "cap/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "cap/image_io.hpp"

namespace cap {

namespace {

// 3x5 glyphs, one row per 3-bit mask, top to bottom.
const char* glyph(char c) {
  switch (c) {
    case '0': return "\7\5\5\5\7";
    case '1': return "\2\6\2\2\7";
    case '2': return "\7\1\7\4\7";
    case '3': return "\7\1\7\1\7";
    case '4': return "\5\5\7\1\1";
    case '5': return "\7\4\7\1\7";
    case '6': return "\7\4\7\5\7";
    case '7': return "\7\1\1\1\1";
    case '8': return "\7\5\7\5\7";
    case '9': return "\7\5\7\1\7";
    case '.': return "\0\0\0\0\2";
    case '-': return "\0\0\7\0\0";
    case 'e': return "\0\7\7\4\7";
    case '+': return "\0\2\7\2\0";
    default: return "\0\0\0\0\0";
  }
}

struct Canvas {
  Tensor img;
  int w, h;
  Canvas(int width, int height) : img({3, height, width}, 1.0), w(width), h(height) {}

  void dot(int x, int y, const double* rgb) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];
  }
  void line(double x0, double y0, double x1, double y1, const double* rgb) {
    const int n = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
    for (int i = 0; i <= n; ++i) {
      const double t = static_cast<double>(i) / n;
      const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
      const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
      dot(x, y, rgb);
      dot(x, y + 1, rgb);
    }
  }
  void text(int x, int y, const std::string& s, const double* rgb) {
    for (char ch : s) {
      const char* g = glyph(ch);
      for (int r = 0; r < 5; ++r) {
        for (int col = 0; col < 3; ++col) {
          if (g[r] & (4 >> col)) {
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) dot(x + 2 * col + dx, y + 2 * r + dy, rgb);
            }
          }
        }
      }
      x += 8;
    }
  }
};

std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

Series colored_series(std::vector<double> x, std::vector<double> y, int i) {
  static const double palette[][3] = {{0.12, 0.47, 0.71}, {1.0, 0.5, 0.05}, {0.17, 0.63, 0.17},
                                      {0.84, 0.15, 0.16}, {0.58, 0.4, 0.74}, {0.55, 0.34, 0.29}};
  Series s{std::move(x), std::move(y), {}};
  const auto& p = palette[i % 6];
  std::copy(p, p + 3, s.rgb);
  return s;
}

void plot_lines(const std::filesystem::path& path, const std::vector<Series>& series, int width, int height) {
  if (width < 64 || height < 64) throw std::invalid_argument("plot_lines: canvas too small");
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    if (!s.x.empty() && s.x.size() != s.y.size()) throw std::invalid_argument("plot_lines: x and y differ in length");
    for (std::size_t i = 0; i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      const double x = s.x.empty() ? static_cast<double>(i) : s.x[i];
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  Canvas cv(width, height);
  const double axis[3] = {0.2, 0.2, 0.2};
  const int left = 56, right = width - 12, top = 20, bottom = height - 24;
  cv.line(left, top, left, bottom, axis);
  cv.line(left, bottom, right, bottom, axis);
  if (std::isfinite(xmin)) {
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) {
      ymin -= 0.5;
      ymax += 0.5;
    }
    const auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (right - left); };
    const auto py = [&](double y) { return bottom - (y - ymin) / (ymax - ymin) * (bottom - top); };
    for (const auto& s : series) {
      bool have = false;
      double lx = 0, ly = 0;
      for (std::size_t i = 0; i < s.y.size(); ++i) {
        if (!std::isfinite(s.y[i])) {
          have = false;
          continue;
        }
        const double x = px(s.x.empty() ? static_cast<double>(i) : s.x[i]), y = py(s.y[i]);
        if (have) cv.line(lx, ly, x, y, s.rgb);
        cv.dot(static_cast<int>(x), static_cast<int>(y), s.rgb);
        lx = x;
        ly = y;
        have = true;
      }
    }
    cv.text(4, top, label(ymax), axis);
    cv.text(4, bottom - 10, label(ymin), axis);
    cv.text(left, bottom + 8, label(xmin), axis);
    cv.text(right - 8 * static_cast<int>(label(xmax).size()), bottom + 8, label(xmax), axis);
  }
  write_png(path, cv.img, 8);
}

}  // namespace cap
