#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace cap {

struct Series {
  std::vector<double> x;  // empty: 0, 1, 2, ...
  std::vector<double> y;
  double rgb[3] = {0.1, 0.3, 0.8};
};

/// Line chart as an 8-bit PNG: axes, one polyline per series, and the y range
/// printed at the top-left and bottom-left corners.
void plot_lines(const std::filesystem::path& path, const std::vector<Series>& series, int width = 480,
                int height = 320);

/// A distinct colour for series `i`.
Series colored_series(std::vector<double> x, std::vector<double> y, int i);

}  // namespace cap
