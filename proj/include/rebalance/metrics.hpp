#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rebalance {

struct ScoredSample {
  std::int64_t id = 0;
  double score = 0.0;
  /// Starved class is the positive class.
  bool positive = false;
};

struct PRPoint {
  double threshold = 0.0;
  double recall = 0.0;
  double precision = 0.0;

  bool operator==(const PRPoint&) const = default;
};

struct PRCurve {
  /// One point per rank, ascending recall.
  std::vector<PRPoint> points;
  /// Mean of the precision at each positive's rank.
  double average_precision = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

struct FARPoint {
  double threshold = 0.0;
  double false_alarms_per_area = 0.0;
  double p_d = 0.0;

  bool operator==(const FARPoint&) const = default;
};

inline constexpr const char* kUnitPerKm2 = "fa_per_km2";
inline constexpr const char* kUnitPer1000 = "fa_per_1000_samples";

struct FARCurve {
  /// One point per distinct score, swept from high to low.
  std::vector<FARPoint> points;
  /// (1 / cutoff) * integral over [0, cutoff] of the right-continuous step
  /// function through the points, starting at (0, 0).
  double auc = 0.0;
  double cutoff = 1.0;
  double total_area = 0.0;
  std::string unit = kUnitPerKm2;
};

/// Ranks by descending score; within equal scores negatives come first.
PRCurve pr_curve(std::vector<ScoredSample> samples);

FARCurve far_curve(std::vector<ScoredSample> samples, double total_area_km2, double cutoff = 1.0);

/// Same sweep with area measured in thousands of samples, for data without
/// survey geometry.
FARCurve far_curve_per_1000(std::vector<ScoredSample> samples, double cutoff = 1.0);

/// Negatives per positive.
double imbalance_ratio(std::size_t positives, std::size_t negatives);

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Standalone SVG line plot; identical inputs give identical bytes.
void write_svg_plot(const std::filesystem::path& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<PlotSeries>& series, double x_marker = -1.0);

void write_pr_csv(const std::filesystem::path& path, const PRCurve& curve);
void write_far_csv(const std::filesystem::path& path, const FARCurve& curve);

/// pr.csv, far.csv, pr.svg and far.svg in `out_dir`.
void emit_curves(const PRCurve& pr, const FARCurve& far, const std::filesystem::path& out_dir,
                 const std::string& label = "model");

}  // namespace rebalance
