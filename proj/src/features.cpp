#include "rebalance/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "rebalance/error.hpp"
#include "rebalance/format.hpp"
#include "rebalance/parallel.hpp"

namespace rebalance {

namespace {

void check_params(const GaborParams& p) {
  const bool finite = std::isfinite(p.wavelength_px) && std::isfinite(p.orientation_rad) &&
                      std::isfinite(p.sigma_px) && std::isfinite(p.aspect) &&
                      std::isfinite(p.phase_rad);
  if (!finite) throw UsageError("Gabor parameter is not finite");
  if (!(p.wavelength_px > 0.0) || !(p.sigma_px > 0.0) || !(p.aspect > 0.0) || p.half_width < 1) {
    throw UsageError("Gabor parameters need wavelength, sigma, aspect > 0 and half_width >= 1");
  }
}

// Mirror index without repeating the edge sample: -1 -> 1, n -> n - 2.
int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

nlohmann::json to_json(const GaborParams& p) {
  return {{"wavelength_px", p.wavelength_px}, {"orientation_rad", p.orientation_rad},
          {"sigma_px", p.sigma_px},           {"aspect", p.aspect},
          {"phase_rad", p.phase_rad},         {"half_width", p.half_width}};
}

GaborParams gabor_from_json(const nlohmann::json& j) {
  GaborParams p;
  p.wavelength_px = j.at("wavelength_px").get<double>();
  p.orientation_rad = j.at("orientation_rad").get<double>();
  p.sigma_px = j.at("sigma_px").get<double>();
  p.aspect = j.at("aspect").get<double>();
  p.phase_rad = j.at("phase_rad").get<double>();
  p.half_width = j.at("half_width").get<int>();
  return p;
}

}  // namespace

std::vector<GaborParams> default_gabor_params() {
  std::vector<GaborParams> out;
  for (const double wavelength : {4.0, 8.0}) {
    for (int k = 0; k < 4; ++k) {
      GaborParams p;
      p.wavelength_px = wavelength;
      p.orientation_rad = k * std::numbers::pi / 4.0;
      p.sigma_px = 0.56 * wavelength;
      p.aspect = 0.5;
      p.phase_rad = 0.0;
      p.half_width = static_cast<int>(std::ceil(2.0 * p.sigma_px)) + 1;
      out.push_back(p);
    }
  }
  return out;
}

Matrix gabor_kernel_raw(const GaborParams& p) {
  check_params(p);
  const int h = p.half_width;
  Matrix k(2 * h + 1, 2 * h + 1);
  const double c = std::cos(p.orientation_rad);
  const double s = std::sin(p.orientation_rad);
  const double two_sigma_sq = 2.0 * p.sigma_px * p.sigma_px;
  const double gamma_sq = p.aspect * p.aspect;
  for (int y = -h; y <= h; ++y) {
    for (int x = -h; x <= h; ++x) {
      const double xr = x * c + y * s;
      const double yr = -x * s + y * c;
      k.at(y + h, x + h) = std::exp(-(xr * xr + gamma_sq * yr * yr) / two_sigma_sq) *
                           std::cos(2.0 * std::numbers::pi * xr / p.wavelength_px + p.phase_rad);
    }
  }
  return k;
}

GaborBank build_gabor_bank(const std::vector<GaborParams>& params) {
  if (params.empty()) throw UsageError("Gabor bank needs at least one filter");
  GaborBank bank;
  for (const auto& p : params) {
    Matrix k = gabor_kernel_raw(p);
    double sum = 0.0;
    for (double v : k.data) sum += v;
    const double mean = sum / static_cast<double>(k.data.size());
    for (double& v : k.data) v -= mean;
    bank.kernels.push_back(std::move(k));
    bank.params.push_back(p);
  }
  return bank;
}

Matrix edge_map(const ImagePatch& image, const Matrix& kernel) {
  if (kernel.rows % 2 == 0 || kernel.cols % 2 == 0) {
    throw UsageError("edge_map: kernel dimensions must be odd");
  }
  if (kernel.rows > image.height || kernel.cols > image.width) {
    throw UsageError("edge_map: kernel larger than image");
  }
  const int hy = kernel.rows / 2;
  const int hx = kernel.cols / 2;
  const int H = image.height;
  const int W = image.width;
  const int PW = W + 2 * hx;

  std::vector<double> padded(static_cast<std::size_t>(H + 2 * hy) * PW);
  for (int r = 0; r < H + 2 * hy; ++r) {
    const int sr = reflect101(r - hy, H);
    for (int c = 0; c < PW; ++c) padded[static_cast<std::size_t>(r) * PW + c] = image.at(sr, reflect101(c - hx, W));
  }

  Matrix out(H, W);
  for (int ky = 0; ky < kernel.rows; ++ky) {
    for (int kx = 0; kx < kernel.cols; ++kx) {
      const double w = kernel.at(ky, kx);
      if (w == 0.0) continue;
      for (int r = 0; r < H; ++r) {
        const double* src = &padded[static_cast<std::size_t>(r + ky) * PW + kx];
        double* dst = &out.data[static_cast<std::size_t>(r) * W];
        for (int c = 0; c < W; ++c) dst[c] += w * src[c];
      }
    }
  }
  return out;
}

std::vector<double> activation_histogram(const Matrix& response, int bins) {
  if (bins < 2) throw UsageError("activation_histogram: need at least 2 bins");
  if (response.data.empty()) throw UsageError("activation_histogram: empty response");
  double peak = 0.0;
  for (double v : response.data) peak = std::max(peak, std::abs(v));

  std::vector<double> hist(bins, 0.0);
  if (peak == 0.0) {
    hist[0] = 1.0;
    return hist;
  }
  std::vector<std::size_t> counts(bins, 0);
  for (double v : response.data) {
    const double scaled = std::abs(v) / peak;
    const int bin = std::min(static_cast<int>(scaled * bins), bins - 1);
    ++counts[bin];
  }
  const double n = static_cast<double>(response.data.size());
  for (int b = 0; b < bins; ++b) hist[b] = static_cast<double>(counts[b]) / n;
  return hist;
}

FeatureVector feature_vector(const ImagePatch& image, const GaborBank& bank, int bins) {
  if (bank.kernels.empty()) throw UsageError("feature_vector: empty filter bank");
  FeatureVector fv;
  fv.filters = static_cast<int>(bank.kernels.size());
  fv.bins = bins;
  fv.values.reserve(static_cast<std::size_t>(fv.filters) * bins);
  for (const auto& kernel : bank.kernels) {
    const auto hist = activation_histogram(edge_map(image, kernel), bins);
    fv.values.insert(fv.values.end(), hist.begin(), hist.end());
  }
  return fv;
}

std::vector<FeatureVector> extract_features(const std::vector<ImagePatch>& images,
                                            const GaborBank& bank, int bins, std::size_t workers) {
  return parallel_map(images.size(), workers,
                      [&](std::size_t i) { return feature_vector(images[i], bank, bins); });
}

std::size_t FeatureCache::index_of(std::int64_t id) const {
  const auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) {
    throw CompatibilityError("feature cache has no entry for record " + std::to_string(id));
  }
  return static_cast<std::size_t>(it - ids.begin());
}

void write_feature_cache(const std::filesystem::path& csv_path, const FeatureCache& cache) {
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw IngestError("cannot write feature cache " + csv_path.string());
  const std::size_t width =
      cache.features.empty() ? cache.meta.bank.size() * cache.meta.bins : cache.features.front().values.size();
  out << "id";
  for (std::size_t i = 0; i < width; ++i) out << ",f_" << i;
  out << '\n';
  for (std::size_t r = 0; r < cache.ids.size(); ++r) {
    out << cache.ids[r];
    for (double v : cache.features[r].values) out << ',' << format_double(v);
    out << '\n';
  }

  nlohmann::json j;
  j["bins"] = cache.meta.bins;
  j["patch_size"] = {cache.meta.patch_size.height, cache.meta.patch_size.width};
  j["bank"] = nlohmann::json::array();
  for (const auto& p : cache.meta.bank) j["bank"].push_back(to_json(p));
  auto sidecar = csv_path;
  std::ofstream side(sidecar.replace_extension(".json"), std::ios::binary);
  side << j.dump(2) << '\n';
}

FeatureCache read_feature_cache(const std::filesystem::path& csv_path) {
  auto sidecar = csv_path;
  sidecar.replace_extension(".json");
  if (!std::filesystem::exists(csv_path) || !std::filesystem::exists(sidecar)) {
    throw MissingArtifactError("feature cache not found: " + csv_path.string());
  }
  FeatureCache cache;
  try {
    std::ifstream side(sidecar);
    nlohmann::json j;
    side >> j;
    cache.meta.bins = j.at("bins").get<int>();
    cache.meta.patch_size = {j.at("patch_size").at(0).get<int>(), j.at("patch_size").at(1).get<int>()};
    for (const auto& p : j.at("bank")) cache.meta.bank.push_back(gabor_from_json(p));
  } catch (const nlohmann::json::exception& e) {
    throw CompatibilityError("malformed feature cache header " + sidecar.string() + ": " + e.what());
  }

  std::ifstream in(csv_path);
  std::string line;
  std::getline(in, line);
  const std::size_t width = cache.meta.bank.size() * static_cast<std::size_t>(cache.meta.bins);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    FeatureVector fv;
    fv.filters = static_cast<int>(cache.meta.bank.size());
    fv.bins = cache.meta.bins;
    try {
      cache.ids.push_back(std::stoll(cell));
      while (std::getline(ss, cell, ',')) fv.values.push_back(parse_double(cell));
    } catch (const std::exception&) {
      throw CompatibilityError("malformed feature cache row " + std::to_string(row));
    }
    if (fv.values.size() != width) {
      throw CompatibilityError("feature cache row " + std::to_string(row) + " has " +
                               std::to_string(fv.values.size()) + " values, header implies " +
                               std::to_string(width));
    }
    cache.features.push_back(std::move(fv));
  }
  return cache;
}

void check_cache_compatible(const FeatureCacheMeta& cached, const FeatureCacheMeta& wanted) {
  if (cached.bins != wanted.bins) {
    throw CompatibilityError("feature cache built with B=" + std::to_string(cached.bins) +
                             ", config asks for B=" + std::to_string(wanted.bins));
  }
  if (cached.bank != wanted.bank) {
    throw CompatibilityError("feature cache was built with different Gabor bank parameters");
  }
  if (cached.patch_size != wanted.patch_size) {
    throw CompatibilityError("feature cache was built for a different patch size");
  }
}

}  // namespace rebalance
