#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fgreid/tensor.hpp"

namespace fgreid::inline FGREID_PRECISION {

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  std::uint8_t channel(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

/// Half-pixel-centred bilinear resize of a (h, w) map, edges clamped.
Tensor upsample_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w);

/// Blends a heat colouring of `attention` (h, w) over `frame` (H, W, 3) with
/// pixel values in [0, 1]. Heat runs from blue (0) to red (1).
RgbImage render_attention_overlay(const Tensor& frame, const Tensor& attention, double alpha = 0.5);

/// Binary P6 pixmap, 8 bits per channel.
void write_ppm(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_ppm(const std::filesystem::path& path);

void export_attention_overlay(const Tensor& frame, const Tensor& attention, const std::filesystem::path& path);

}  // namespace fgreid::inline FGREID_PRECISION
