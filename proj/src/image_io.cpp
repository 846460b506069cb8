#include "cap/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>

#include "cap/log.hpp"

namespace cap {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const fs::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_fail(png_structp png, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = message;
  std::longjmp(png_jmpbuf(png), 1);
}

void png_quiet(png_structp, png_const_charp) {}

Tensor read_png(const fs::path& path) {
  File f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw std::runtime_error(path.string() + ": not a PNG file");
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_quiet);
  if (!png) throw std::runtime_error("libpng: out of memory");
  png_infop info = png_create_info_struct(png);
  Tensor out;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error(path.string() + ": " + (error.empty() ? "corrupt PNG" : error));
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int bits = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * h);
  rows.resize(h);
  for (int y = 0; y < h; ++y) rows[y] = buffer.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out = Tensor({3, h, w});
  const double scale = bits == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v;
        if (bits == 16) {
          const png_byte* p = rows[y] + (x * 3 + c) * 2;
          v = static_cast<double>((p[0] << 8) | p[1]);
        } else {
          v = static_cast<double>(rows[y][x * 3 + c]);
        }
        out.at(c, y, x) = v / scale;
      }
    }
  }
  return out;
}

// Binary PPM (P6) / PGM (P5), maxval up to 65535.
Tensor read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw std::runtime_error(path.string() + ": unsupported image format");
  const auto next_int = [&]() {
    int v = -1;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    in >> v;
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (!in || w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
    throw std::runtime_error(path.string() + ": bad PNM header");
  }
  in.get();
  const int channels = magic == "P6" ? 3 : 1;
  const int bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw std::runtime_error(path.string() + ": truncated");
  Tensor out({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const std::size_t i = (static_cast<std::size_t>(y) * w + x) * channels + (channels == 3 ? c : 0);
        const double v = bytes == 2 ? (raw[2 * i] << 8 | raw[2 * i + 1]) : raw[i];
        out.at(c, y, x) = v / maxval;
      }
    }
  }
  return out;
}

double sample_bilinear(const Tensor& im, int c, double y, double x) {
  const int h = im.dim(1), w = im.dim(2);
  y = std::clamp(y, 0.0, h - 1.0);
  x = std::clamp(x, 0.0, w - 1.0);
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * im.at(c, y0, x0) + fx * im.at(c, y0, x1)) +
         fy * ((1 - fx) * im.at(c, y1, x0) + fx * im.at(c, y1, x1));
}

// Weights of source cells [i, i+1) overlapping [a, b).
std::vector<std::pair<int, double>> overlaps(double a, double b, int limit) {
  std::vector<std::pair<int, double>> out;
  for (int i = static_cast<int>(std::floor(a)); i < b && i < limit; ++i) {
    const double w = std::min<double>(b, i + 1) - std::max<double>(a, i);
    if (w > 0) out.emplace_back(i, w);
  }
  return out;
}

}  // namespace

Tensor read_image(const fs::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw std::runtime_error("cannot open " + path.string());
  char head[2] = {0, 0};
  probe.read(head, 2);
  probe.close();
  if (head[0] == 'P' && (head[1] == '5' || head[1] == '6')) return read_pnm(path);
  return read_png(path);
}

void write_png(const fs::path& path, const Tensor& image, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw std::invalid_argument("write_png: bit depth must be 8 or 16");
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("write_png: expected a {3, H, W} image");
  if (!image.all_finite()) throw std::invalid_argument("write_png: non-finite pixel");
  const int h = image.dim(1), w = image.dim(2);
  const int bytes = bit_depth / 8;
  const double scale = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<png_byte> buffer(static_cast<std::size_t>(h) * w * 3 * bytes);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const auto code = static_cast<unsigned>(std::lround(std::clamp(image.at(c, y, x), 0.0, 1.0) * scale));
        const std::size_t i = ((static_cast<std::size_t>(y) * w + x) * 3 + c) * bytes;
        if (bytes == 2) {
          buffer[i] = static_cast<png_byte>(code >> 8);
          buffer[i + 1] = static_cast<png_byte>(code & 0xFF);
        } else {
          buffer[i] = static_cast<png_byte>(code);
        }
      }
    }
  }
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * w * 3 * bytes;

  File f = open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_quiet);
  if (!png) throw std::runtime_error("libpng: out of memory");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error(path.string() + ": " + (error.empty() ? "PNG write failed" : error));
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, bit_depth, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw std::runtime_error(path.string() + ": write failed");
}

Tensor quantize(const Tensor& image, int bit_depth) {
  const double scale = std::ldexp(1.0, bit_depth) - 1.0;
  Tensor out = image;
  for (double& v : out.values()) v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * scale)) / scale;
  return out;
}

ImageSet quantize_within_budget(const ImageSet& images) {
  constexpr double scale = 65535.0;
  ImageSet out = images;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = 0; j < images.clean[i].size(); ++j) {
      const double x = images.clean[i][j];
      long q = std::lround(std::clamp(images.perturbed[i][j], 0.0, 1.0) * scale);
      while (q > 0 && static_cast<double>(q) / scale - x > images.eta) --q;
      while (q < 65535 && x - static_cast<double>(q) / scale > images.eta) ++q;
      out.perturbed[i][j] = static_cast<double>(q) / scale;
      if (std::abs(out.perturbed[i][j] - x) > images.eta) {
        throw std::logic_error("quantize_within_budget: no 16-bit code within the budget; clean image is off-grid");
      }
    }
  }
  return out;
}

Tensor center_crop_resize(const Tensor& image, int size) {
  if (size < 1) throw std::invalid_argument("center_crop_resize: size must be >= 1");
  if (image.rank() != 3) throw std::invalid_argument("center_crop_resize: expected a {C, H, W} image");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == size && w == size) return image;
  const int side = std::min(h, w);
  const int oy = (h - side) / 2, ox = (w - side) / 2;
  Tensor out({c, size, size});
  const double step = static_cast<double>(side) / size;
  if (side >= size) {
    for (int y = 0; y < size; ++y) {
      const auto wy = overlaps(y * step, (y + 1) * step, side);
      for (int x = 0; x < size; ++x) {
        const auto wx = overlaps(x * step, (x + 1) * step, side);
        for (int ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (const auto& [sy, ay] : wy) {
            for (const auto& [sx, ax] : wx) s += ay * ax * image.at(ch, oy + sy, ox + sx);
          }
          double area = 0.0;
          for (const auto& [sy, ay] : wy) {
            for (const auto& [sx, ax] : wx) area += ay * ax;
          }
          out.at(ch, y, x) = s / area;
        }
      }
    }
    return out;
  }
  Tensor crop({c, side, side});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) crop.at(ch, y, x) = image.at(ch, oy + y, ox + x);
    }
  }
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        out.at(ch, y, x) = sample_bilinear(crop, ch, (y + 0.5) * step - 0.5, (x + 0.5) * step - 0.5);
      }
    }
  }
  return out;
}

IngestResult ingest(const fs::path& dir, int size, int bit_depth) {
  if (!fs::is_directory(dir)) throw std::invalid_argument("ingest: not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  IngestResult out;
  for (const auto& f : files) {
    try {
      out.images.push_back(quantize(center_crop_resize(read_image(f), size), bit_depth));
      out.files.push_back(f.filename().string());
    } catch (const std::exception& e) {
      out.skipped.push_back(f.filename().string());
      log_warn("ingest.skipped", {{"file", f.string()}, {"reason", e.what()}});
    }
  }
  if (out.images.empty()) throw std::runtime_error("ingest: no decodable images in " + dir.string());
  return out;
}

std::vector<fs::path> write_image_set(const fs::path& dir, const ImageList& images, int bit_depth) {
  fs::create_directories(dir);
  std::vector<fs::path> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%02zu.png", i);
    out.push_back(dir / name);
    write_png(out.back(), images[i], bit_depth);
  }
  return out;
}

}  // namespace cap
