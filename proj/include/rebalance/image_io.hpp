#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace rebalance {

/// Height x width grayscale intensities in [0, 1], row-major.
struct ImagePatch {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  ImagePatch() = default;
  ImagePatch(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }

  bool operator==(const ImagePatch&) const = default;
};

struct PatchSize {
  int height = 64;
  int width = 64;

  bool operator==(const PatchSize&) const = default;
};

/// Decoded image samples, interleaved by channel (1 = gray, 3 = RGB).
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 1;
  unsigned maxval = 255;
  std::vector<std::uint16_t> samples;
};

/// Decodes binary/ASCII PGM (P5/P2) or PNG. Throws IngestError on failure.
RawImage decode_image(const std::filesystem::path& path);

/// Rec. 601 luma for color input, scaled by maxval into [0, 1].
ImagePatch to_grayscale(const RawImage& image);

/// Bilinear resampling with half-pixel centers and edge clamping.
ImagePatch resize_bilinear(const ImagePatch& image, PatchSize size);

ImagePatch flip_horizontal(const ImagePatch& image);

/// Quantizes to 8 bits (round to nearest) and writes a binary PGM.
void write_pgm(const std::filesystem::path& path, const ImagePatch& image);

/// Writes an 8-bit gray or RGB PNG.
void write_png(const std::filesystem::path& path, const RawImage& image);

}  // namespace rebalance
