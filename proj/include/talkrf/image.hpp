#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace talkrf {

/// H x W x 3 linear RGB in [0, 1], row-major with interleaved channels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), rgb(w * h * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  std::size_t pixels() const { return width * height; }

  bool operator==(const Image&) const = default;
};

/// 8-bit RGB PNG. Values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

}  // namespace talkrf
