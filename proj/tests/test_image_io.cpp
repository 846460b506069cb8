#include <doctest.h>

#include <fstream>

#include "cap/dataset.hpp"
#include "cap/hashing.hpp"
#include "cap/image_io.hpp"
#include "cap/metrics.hpp"
#include "cap/plot.hpp"
#include "test_support.hpp"

using namespace cap;
using cap::testing::TempDir;

namespace {

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

double cosine(const Tensor& a, const Tensor& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("png round trip is exact at 8 and 16 bits") {
  TempDir dir("png");
  Rng rng(3);
  const Tensor img = rng.uniform_tensor({3, 5, 7}, 0.0, 1.0);
  for (int bits : {8, 16}) {
    const Tensor q = quantize(img, bits);
    const auto p = dir / ("img" + std::to_string(bits) + ".png");
    write_png(p, q, bits);
    CHECK(same_values(read_image(p), q));
    const double step = 1.0 / (std::ldexp(1.0, bits) - 1.0);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(q[i] - img[i]) <= 0.5 * step + 1e-15);
  }
  write_png(dir / "again.png", quantize(img, 16), 16);
  CHECK(sha256_file(dir / "again.png") == sha256_file(dir / "img16.png"));
  CHECK_THROWS(write_png(dir / "x.png", img, 12));
  CHECK_THROWS(write_png(dir / "x.png", Tensor({1, 2, 2}), 8));
}

TEST_CASE("binary pnm files decode with their maxval") {
  TempDir dir("pnm");
  // 2x1 RGB, maxval 255: (255, 0, 51) and (0, 102, 255)
  write_bytes(dir / "a.ppm", std::string("P6\n# comment\n2 1\n255\n") + std::string("\xFF\x00\x33\x00\x66\xFF", 6));
  const Tensor a = read_image(dir / "a.ppm");
  CHECK(a.shape() == Shape{3, 1, 2});
  CHECK(a.at(0, 0, 0) == 1.0);
  CHECK(a.at(2, 0, 0) == doctest::Approx(0.2));
  CHECK(a.at(1, 0, 1) == doctest::Approx(0.4));
  // 1x1 grey, maxval 1000 (two bytes): 500 -> 0.5 on every channel
  write_bytes(dir / "b.pgm", std::string("P5 1 1 1000\n") + std::string("\x01\xF4", 2));
  const Tensor b = read_image(dir / "b.pgm");
  for (int c = 0; c < 3; ++c) CHECK(b.at(c, 0, 0) == 0.5);
  write_bytes(dir / "c.ppm", "P6\n4 4\n255\n\x01\x02");
  CHECK_THROWS(read_image(dir / "c.ppm"));
  write_bytes(dir / "d.png", "not an image at all");
  CHECK_THROWS(read_image(dir / "d.png"));
  CHECK_THROWS(read_image(dir / "missing.png"));
}

TEST_CASE("center crop and resize") {
  SUBCASE("area averaging over exact blocks") {
    Tensor img({1, 4, 4});
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) img.at(0, y, x) = y * 4 + x;
    }
    const Tensor out = center_crop_resize(img, 2);
    CHECK(out.at(0, 0, 0) == doctest::Approx((0 + 1 + 4 + 5) / 4.0));
    CHECK(out.at(0, 1, 1) == doctest::Approx((10 + 11 + 14 + 15) / 4.0));
  }
  SUBCASE("non-square input keeps the centre") {
    Tensor img({1, 2, 4});
    for (int y = 0; y < 2; ++y) {
      for (int x = 0; x < 4; ++x) img.at(0, y, x) = x;
    }
    const Tensor out = center_crop_resize(img, 2);
    CHECK(out.at(0, 0, 0) == 1.0);
    CHECK(out.at(0, 0, 1) == 2.0);
  }
  SUBCASE("constant images stay constant at any size") {
    const Tensor img({3, 7, 5}, 0.25);
    for (int size : {1, 3, 5, 9, 16}) {
      const Tensor out = center_crop_resize(img, size);
      CHECK(out.shape() == Shape{3, size, size});
      for (double v : out.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }
  }
  SUBCASE("same size is untouched") {
    Rng rng(1);
    const Tensor img = rng.uniform_tensor({3, 6, 6}, 0.0, 1.0);
    CHECK(same_values(center_crop_resize(img, 6), img));
  }
  CHECK_THROWS(center_crop_resize(Tensor({3, 4, 4}), 0));
}

TEST_CASE("16-bit publishing stays inside the budget") {
  Rng rng(11);
  const double eta = 4.0 / 255.0;
  ImageList clean{quantize(rng.uniform_tensor({3, 6, 6}, 0.0, 1.0), 8)};
  ImageSet set = ImageSet::from_clean(clean, eta, "q");
  for (std::size_t i = 0; i < set.perturbed[0].size(); ++i) {
    set.perturbed[0][i] = std::clamp(clean[0][i] + rng.uniform(-eta, eta), 0.0, 1.0);
  }
  const ImageSet q = quantize_within_budget(set);
  for (std::size_t i = 0; i < q.perturbed[0].size(); ++i) {
    const double v = q.perturbed[0][i];
    CHECK(std::abs(v * 65535.0 - std::round(v * 65535.0)) < 1e-9);
    CHECK(std::abs(v - clean[0][i]) <= eta + 1e-12);
    CHECK(std::abs(v - set.perturbed[0][i]) <= 1.0 / 65535.0 + 1e-12);
  }
}

TEST_CASE("ingest orders by filename, skips junk and resizes") {
  TempDir dir("ingest");
  Rng rng(5);
  write_png(dir / "b.png", quantize(rng.uniform_tensor({3, 20, 30}, 0.0, 1.0), 8), 8);
  write_png(dir / "a.png", Tensor({3, 8, 8}, 0.5), 16);
  write_bytes(dir / "c.ppm", std::string("P6 1 1 255\n") + std::string("\x00\x00\x00", 3));
  write_bytes(dir / "notes.txt", "hello");
  std::filesystem::create_directories(dir / "sub");
  const IngestResult r = ingest(dir.path(), 12);
  CHECK(r.files == std::vector<std::string>{"a.png", "b.png", "c.ppm"});
  CHECK(r.skipped == std::vector<std::string>{"notes.txt"});
  REQUIRE(r.images.size() == 3);
  for (const auto& im : r.images) {
    CHECK(im.shape() == Shape{3, 12, 12});
    for (double v : im.values()) CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
  }
  CHECK(r.images[0][0] == doctest::Approx(128.0 / 255.0));

  TempDir empty("ingest_empty");
  CHECK_THROWS(ingest(empty.path(), 8));
  write_bytes(empty / "x.txt", "junk");
  CHECK_THROWS(ingest(empty.path(), 8));
}

TEST_CASE("write_image_set names files in order") {
  TempDir dir("set");
  const auto paths = write_image_set(dir / "out", {Tensor({3, 2, 2}, 0.0), Tensor({3, 2, 2}, 1.0)}, 8);
  REQUIRE(paths.size() == 2);
  CHECK(paths[1].filename() == "img_01.png");
  CHECK(read_image(paths[1])[0] == 1.0);
}

TEST_CASE("synthetic dataset layout and determinism") {
  TempDir a("synth_a"), b("synth_b");
  synth_dataset(a.path(), 2, 4, 21, 24);
  synth_dataset(b.path(), 2, 4, 21, 24);
  int files = 0;
  for (const auto& d : identity_dirs(a.path())) {
    for (const auto& f : std::filesystem::directory_iterator(d)) {
      ++files;
      const auto rel = std::filesystem::relative(f.path(), a.path());
      CHECK(sha256_file(f.path()) == sha256_file(b.path() / rel));
    }
  }
  CHECK(files == 8);
  CHECK(identity_dirs(a.path()).size() == 2);
  CHECK(identity_dirs(a.path() / "id_00") == std::vector<std::filesystem::path>{a.path() / "id_00"});
  CHECK_THROWS(synth_dataset(a.path(), 0, 4, 1, 24));
  CHECK(!same_values(render_face(FaceParams::random(1), 2, 16), render_face(FaceParams::random(1), 3, 16)));
}

TEST_CASE("synthetic identities are closer to themselves than to each other") {
  const FeatureExtractor ex(cap::testing::narrow_vgg());
  const int ids = 4, per = 4;
  std::vector<std::vector<Tensor>> emb(ids);
  for (int i = 0; i < ids; ++i) {
    const FaceParams face = FaceParams::random(derive_seed(8, {static_cast<std::uint64_t>(i)}));
    for (int j = 0; j < per; ++j) emb[i].push_back(embedding(ex, render_face(face, derive_seed(8, {100u + i, 1u + j}), 32)));
  }
  double within = 0, across = 0;
  int nw = 0, na = 0;
  for (int i = 0; i < ids; ++i) {
    for (int k = 0; k < ids; ++k) {
      for (int j = 0; j < per; ++j) {
        for (int l = 0; l < per; ++l) {
          if (i == k && j >= l) continue;
          const double c = cosine(emb[i][j], emb[k][l]);
          if (i == k) {
            within += c;
            ++nw;
          } else if (i < k) {
            across += c;
            ++na;
          }
        }
      }
    }
  }
  MESSAGE("within " << within / nw << " across " << across / na);
  CHECK(across / na < within / nw);
}

TEST_CASE("line plots are deterministic PNGs") {
  TempDir dir("plot");
  const std::vector<Series> s{colored_series({}, {1.0, 3.0, std::nan(""), 2.0}, 0),
                              colored_series({0, 1, 2, 3}, {0.5, 0.5, 0.5, 0.5}, 1)};
  plot_lines(dir / "a.png", s, 200, 120);
  plot_lines(dir / "b.png", s, 200, 120);
  CHECK(sha256_file(dir / "a.png") == sha256_file(dir / "b.png"));
  const Tensor img = read_image(dir / "a.png");
  CHECK(img.shape() == Shape{3, 120, 200});
  plot_lines(dir / "empty.png", {}, 100, 100);
  CHECK_THROWS(plot_lines(dir / "bad.png", {colored_series({1.0}, {1.0, 2.0}, 0)}));
  CHECK_THROWS(plot_lines(dir / "bad.png", s, 10, 10));
}
