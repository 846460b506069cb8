#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cap/attack.hpp"
#include "cap/tensor.hpp"

namespace cap {

/// Decodes a PNG (any colour type, 8 or 16 bit) or binary PPM/PGM into a
/// {3, H, W} tensor in [0, 1]. Alpha is dropped, grey is replicated.
Tensor read_image(const std::filesystem::path& path);

/// Lossless PNG, RGB, 8 or 16 bits per channel. Values are clamped to [0, 1]
/// and rounded to the nearest code.
void write_png(const std::filesystem::path& path, const Tensor& image, int bit_depth = 8);

/// Rounds every value to the nearest code of a `bit_depth` grid.
Tensor quantize(const Tensor& image, int bit_depth);

/// Rounds x' to the 16-bit grid while keeping |x' - x| <= eta: codes that
/// would leave the ball are moved one step back inside. Clean images read from
/// 8 or 16 bit files lie on the grid, so the stored file keeps the budget exactly.
ImageSet quantize_within_budget(const ImageSet& images);

/// Center crop to a square, then resample to size x size (area averaging when
/// shrinking, bilinear when enlarging).
Tensor center_crop_resize(const Tensor& image, int size);

struct IngestResult {
  ImageList images;
  std::vector<std::string> files;  // lexicographic
  std::vector<std::string> skipped;
};

/// Loads every decodable image in `dir` (lexicographic filename order) at
/// size x size, rounded to `bit_depth` codes (8 for photographs, 16 for stored
/// protected sets). Unreadable files are skipped with a warning; an empty
/// result is an error.
IngestResult ingest(const std::filesystem::path& dir, int size = 64, int bit_depth = 8);

/// Writes `images` as img_00.png, img_01.png, ... under `dir`.
std::vector<std::filesystem::path> write_image_set(const std::filesystem::path& dir, const ImageList& images,
                                                   int bit_depth);

}  // namespace cap
