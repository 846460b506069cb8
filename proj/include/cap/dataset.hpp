#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cap/tensor.hpp"

namespace cap {

/// Identity-level appearance: palette and face geometry.
struct FaceParams {
  double skin[3];
  double hair[3];
  double background[3];
  double eye_color[3];
  double mouth_color[3];
  double face_rx, face_ry;  // ellipse radii, fraction of the image
  double eye_gap, eye_y, eye_r;
  double mouth_y, mouth_w;
  double hair_line;  // hair covers the head above this height

  static FaceParams random(std::uint64_t identity_seed);
};

/// Renders one image of an identity. `variation_seed` jitters pose, scale,
/// lighting and sensor noise.
Tensor render_face(const FaceParams& face, std::uint64_t variation_seed, int size);

/// Writes `identities` subdirectories (id_00, id_01, ...) with
/// `images_per_identity` 8-bit PNGs each. Deterministic per seed.
std::filesystem::path synth_dataset(const std::filesystem::path& root, int identities, int images_per_identity,
                                    std::uint64_t seed, int size = 64);

/// Subdirectories of `root` in lexicographic order, or {root} when it has none.
std::vector<std::filesystem::path> identity_dirs(const std::filesystem::path& root);

}  // namespace cap
