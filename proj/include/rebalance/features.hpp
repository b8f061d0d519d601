#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "rebalance/image_io.hpp"

namespace rebalance {

/// Dense row-major real matrix.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  bool operator==(const Matrix&) const = default;
};

struct GaborParams {
  double wavelength_px = 4.0;
  double orientation_rad = 0.0;
  double sigma_px = 2.24;
  double aspect = 0.5;
  double phase_rad = 0.0;
  int half_width = 6;

  bool operator==(const GaborParams&) const = default;
};

struct GaborBank {
  std::vector<Matrix> kernels;
  std::vector<GaborParams> params;

  std::size_t size() const { return kernels.size(); }
};

/// F consecutive blocks of B normalized histogram bins.
struct FeatureVector {
  std::vector<double> values;
  int filters = 0;
  int bins = 0;

  bool operator==(const FeatureVector&) const = default;
};

inline constexpr int kDefaultBins = 32;

/// 4 orientations x 2 wavelengths (4 px, 8 px), sigma = 0.56 lambda,
/// aspect 0.5, even phase, half width ceil(2 sigma) + 1. Wavelength-major.
std::vector<GaborParams> default_gabor_params();

/// Samples the raw Gabor function on [-h, h]^2 (no DC removal).
Matrix gabor_kernel_raw(const GaborParams& p);

/// Builds zero-mean kernels in parameter order.
GaborBank build_gabor_bank(const std::vector<GaborParams>& params);

/// Same-size cross-correlation with mirror (reflect-101) padding.
Matrix edge_map(const ImagePatch& image, const Matrix& kernel);

/// Histogram of |response| scaled by its maximum into `bins` equal bins over
/// [0, 1]; an all-zero response puts all mass in bin 0.
std::vector<double> activation_histogram(const Matrix& response, int bins);

FeatureVector feature_vector(const ImagePatch& image, const GaborBank& bank, int bins);

std::vector<FeatureVector> extract_features(const std::vector<ImagePatch>& images,
                                            const GaborBank& bank, int bins,
                                            std::size_t workers = 0);

// --- feature cache -----------------------------------------------------------

struct FeatureCacheMeta {
  std::vector<GaborParams> bank;
  int bins = kDefaultBins;
  PatchSize patch_size{};

  bool operator==(const FeatureCacheMeta&) const = default;
};

struct FeatureCache {
  FeatureCacheMeta meta;
  std::vector<std::int64_t> ids;
  std::vector<FeatureVector> features;

  /// Index of `id` in the cache, or throws CompatibilityError.
  std::size_t index_of(std::int64_t id) const;
  const FeatureVector& at(std::int64_t id) const { return features[index_of(id)]; }
};

/// Writes `id,f_0,...` CSV plus a `<stem>.json` sidecar holding `meta`.
void write_feature_cache(const std::filesystem::path& csv_path, const FeatureCache& cache);

/// Reads both files; throws MissingArtifactError if absent.
FeatureCache read_feature_cache(const std::filesystem::path& csv_path);

/// Throws CompatibilityError naming the first field that differs.
void check_cache_compatible(const FeatureCacheMeta& cached, const FeatureCacheMeta& wanted);

}  // namespace rebalance
