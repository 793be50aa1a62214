#pragma once

// Grayscale ingestion, histograms and rendering of label maps.
// Reads 8-bit PGM (P5) and 8-bit PNG (gray, gray+alpha, RGB, RGBA, palette);
// writes PGM (P5) and PNG.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

#include "pvseg/network.hpp"
#include "pvseg/tensor.hpp"

namespace pvseg {

/// Intensities in [0, 1], row-major height x width.
struct ImageGray {
  RowMatrix<double> pixels;

  Index width() const { return pixels.cols(); }
  Index height() const { return pixels.rows(); }
};

struct ImageRGB {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;  // r, g, b interleaved, row-major

  std::array<std::uint8_t, 3> at(Index y, Index x) const {
    const auto* p = &pixels[static_cast<std::size_t>(3 * (y * width + x))];
    return {p[0], p[1], p[2]};
  }
};

ImageGray load_grayscale(const std::filesystem::path& path);

/// Writes round(p * 255) per pixel.
void save_pgm(const ImageGray& image, const std::filesystem::path& path);
void save_png(const ImageGray& image, const std::filesystem::path& path);
void save_png(const ImageRGB& image, const std::filesystem::path& path);

/// Raw cluster ids (must fit in 0..255) as pixel values.
void save_label_pgm(const LabelMap& labels, const std::filesystem::path& path);
LabelMap load_label_pgm(const std::filesystem::path& path);

/// Bin b counts pixels with round(p * 255) == b.
std::array<std::size_t, 256> histogram(const ImageGray& image);

/// Color of cluster `label` in a palette of `q_max` evenly spaced hues at full
/// saturation and value (hue = 360 * label / q_max degrees).
std::array<std::uint8_t, 3> palette_color(int label, int q_max);

ImageRGB colorize(const LabelMap& labels, int q_max);

/// Each cluster drawn at the mean source intensity of its pixels; with
/// `invert`, at 1 - mean (bright faults rendered dark).
ImageGray labels_to_gray(const LabelMap& labels, const ImageGray& source, bool invert = false);

/// 1 x H x W tensor of the intensities.
Tensor<double> to_tensor(const ImageGray& image);

}  // namespace pvseg
