#include "fgreid/overlay.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace fgreid::inline FGREID_PRECISION {

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

}  // namespace

Tensor upsample_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
  if (map.rank() != 2 || map.size() == 0) throw ShapeError("upsample_bilinear expects a non-empty (h, w) map");
  if (out_h == 0 || out_w == 0) throw ShapeError("upsample_bilinear target must be non-empty");
  const std::size_t h = map.dim(0);
  const std::size_t w = map.dim(1);
  Tensor out({out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1 - wx) * map[y0 * w + x0] + wx * map[y0 * w + x1];
      const double bottom = (1 - wx) * map[y1 * w + x0] + wx * map[y1 * w + x1];
      out[y * out_w + x] = static_cast<Real>((1 - wy) * top + wy * bottom);
    }
  }
  return out;
}

RgbImage render_attention_overlay(const Tensor& frame, const Tensor& attention, double alpha) {
  if (frame.rank() != 3 || frame.dim(2) != 3) throw ShapeError("overlay frame must be (H, W, 3), got " + to_string(frame.shape()));
  const std::size_t height = frame.dim(0);
  const std::size_t width = frame.dim(1);
  const Tensor heat = upsample_bilinear(attention, height, width);
  RgbImage image{width, height, std::vector<std::uint8_t>(width * height * 3)};
  for (std::size_t i = 0; i < width * height; ++i) {
    const double a = std::clamp(static_cast<double>(heat[i]), 0.0, 1.0);
    const double heat_rgb[3] = {255.0 * a, 0.0, 255.0 * (1.0 - a)};
    for (std::size_t c = 0; c < 3; ++c) {
      const double base = 255.0 * std::clamp(static_cast<double>(frame[i * 3 + c]), 0.0, 1.0);
      image.pixels[i * 3 + c] = to_byte((1 - alpha) * base + alpha * heat_rgb[c]);
    }
  }
  return image;
}

void write_ppm(const RgbImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  RgbImage image;
  int maxval = 0;
  in >> magic >> image.width >> image.height >> maxval;
  if (!in || magic != "P6" || maxval != 255) throw std::runtime_error(path.string() + " is not an 8-bit P6 pixmap");
  in.get();
  image.pixels.resize(image.width * image.height * 3);
  in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!in) throw std::runtime_error(path.string() + " is truncated");
  return image;
}

void export_attention_overlay(const Tensor& frame, const Tensor& attention, const std::filesystem::path& path) {
  write_ppm(render_attention_overlay(frame, attention), path);
}

}  // namespace fgreid::inline FGREID_PRECISION
