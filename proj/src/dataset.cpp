#include "cap/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "cap/image_io.hpp"
#include "cap/random.hpp"

namespace cap {

namespace fs = std::filesystem;

namespace {

void set_rgb(double* dst, double r, double g, double b) {
  dst[0] = r;
  dst[1] = g;
  dst[2] = b;
}

bool inside_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

}  // namespace

FaceParams FaceParams::random(std::uint64_t identity_seed) {
  Rng rng(derive_seed(identity_seed, {0xFACEu}));
  FaceParams f{};
  const double tone = rng.uniform();
  set_rgb(f.skin, 0.95 - 0.55 * tone + rng.uniform(-0.03, 0.03), 0.80 - 0.50 * tone + rng.uniform(-0.03, 0.03),
          0.70 - 0.48 * tone + rng.uniform(-0.03, 0.03));
  const double shade = rng.uniform(0.05, 0.8);
  set_rgb(f.hair, shade * rng.uniform(0.8, 1.2), shade * rng.uniform(0.6, 0.9), shade * rng.uniform(0.3, 0.7));
  set_rgb(f.background, rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
  set_rgb(f.eye_color, rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.6));
  set_rgb(f.mouth_color, rng.uniform(0.5, 0.85), rng.uniform(0.15, 0.35), rng.uniform(0.15, 0.35));
  for (double* c : {f.skin, f.hair, f.background}) {
    for (int i = 0; i < 3; ++i) c[i] = std::clamp(c[i], 0.0, 1.0);
  }
  f.face_rx = rng.uniform(0.22, 0.32);
  f.face_ry = rng.uniform(0.30, 0.40);
  f.eye_gap = rng.uniform(0.16, 0.26);
  f.eye_y = rng.uniform(-0.10, -0.02);
  f.eye_r = rng.uniform(0.03, 0.055);
  f.mouth_y = rng.uniform(0.13, 0.20);
  f.mouth_w = rng.uniform(0.06, 0.13);
  f.hair_line = rng.uniform(-0.30, -0.15);
  return f;
}

Tensor render_face(const FaceParams& f, std::uint64_t variation_seed, int size) {
  if (size < 4) throw std::invalid_argument("render_face: size must be >= 4");
  Rng rng(derive_seed(variation_seed, {0x7A21u}));
  const double cx = 0.5 + rng.uniform(-0.04, 0.04);
  const double cy = 0.48 + rng.uniform(-0.04, 0.04);
  const double scale = rng.uniform(0.94, 1.06);
  const double gain = rng.uniform(0.9, 1.1);
  const double light_angle = rng.uniform(0.0, 6.283185307179586);
  const double light_amp = rng.uniform(0.0, 0.08);
  const double lx = std::cos(light_angle), ly = std::sin(light_angle);

  const int hi = 2 * size;
  Tensor big({3, hi, hi});
  const double rx = f.face_rx * scale, ry = f.face_ry * scale;
  for (int py = 0; py < hi; ++py) {
    for (int px = 0; px < hi; ++px) {
      const double x = (px + 0.5) / hi, y = (py + 0.5) / hi;
      double c[3];
      set_rgb(c, f.background[0] * (0.9 + 0.2 * y), f.background[1] * (0.9 + 0.2 * y), f.background[2] * (0.9 + 0.2 * y));
      // neck
      if (std::abs(x - cx) < 0.45 * rx && y > cy && y < 1.0) set_rgb(c, 0.85 * f.skin[0], 0.85 * f.skin[1], 0.85 * f.skin[2]);
      if (inside_ellipse(x, y, cx, cy - 0.04 * scale, rx * 1.12, ry * 1.08)) set_rgb(c, f.hair[0], f.hair[1], f.hair[2]);
      if (inside_ellipse(x, y, cx, cy, rx, ry)) {
        const double ly_face = (y - cy) / ry;
        if (ly_face >= f.hair_line / 0.35) {
          set_rgb(c, f.skin[0], f.skin[1], f.skin[2]);
        }
      }
      for (int side : {-1, 1}) {
        const double ex = cx + side * 0.5 * f.eye_gap * scale, ey = cy + f.eye_y * scale;
        const double er = f.eye_r * scale;
        if (inside_ellipse(x, y, ex, ey, er, 0.7 * er)) set_rgb(c, 0.95, 0.95, 0.92);
        if (inside_ellipse(x, y, ex, ey, 0.5 * er, 0.5 * er)) set_rgb(c, f.eye_color[0], f.eye_color[1], f.eye_color[2]);
      }
      if (inside_ellipse(x, y, cx, cy + 0.06 * scale, 0.025 * scale, 0.05 * scale)) {
        set_rgb(c, 0.8 * f.skin[0], 0.8 * f.skin[1], 0.8 * f.skin[2]);
      }
      if (inside_ellipse(x, y, cx, cy + f.mouth_y * scale, f.mouth_w * scale, 0.022 * scale)) {
        set_rgb(c, f.mouth_color[0], f.mouth_color[1], f.mouth_color[2]);
      }
      const double light = gain * (1.0 + light_amp * ((x - 0.5) * lx + (y - 0.5) * ly) * 2.0);
      for (int ch = 0; ch < 3; ++ch) big.at(ch, py, px) = c[ch] * light;
    }
  }
  Tensor out = center_crop_resize(big, size);
  for (double& v : out.values()) v = std::clamp(v + 0.01 * rng.normal(), 0.0, 1.0);
  return out;
}

fs::path synth_dataset(const fs::path& root, int identities, int images_per_identity, std::uint64_t seed, int size) {
  if (identities < 1 || images_per_identity < 1) throw std::invalid_argument("synth_dataset: counts must be >= 1");
  for (int id = 0; id < identities; ++id) {
    const FaceParams face = FaceParams::random(derive_seed(seed, {static_cast<std::uint64_t>(id)}));
    char name[32];
    std::snprintf(name, sizeof name, "id_%02d", id);
    const fs::path dir = root / name;
    fs::create_directories(dir);
    for (int i = 0; i < images_per_identity; ++i) {
      const Tensor im = render_face(face, derive_seed(seed, {static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(i) + 1}), size);
      std::snprintf(name, sizeof name, "img_%02d.png", i);
      write_png(dir / name, im, 8);
    }
  }
  return root;
}

std::vector<fs::path> identity_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::invalid_argument("not a directory: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) out.push_back(root);
  return out;
}

}  // namespace cap
