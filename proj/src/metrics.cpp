#include "rebalance/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "rebalance/error.hpp"
#include "rebalance/format.hpp"

namespace rebalance {

namespace {

void sort_pessimistic(std::vector<ScoredSample>& samples) {
  for (const auto& s : samples) {
    if (!std::isfinite(s.score)) throw NumericError("non-finite score for id " + std::to_string(s.id));
  }
  std::sort(samples.begin(), samples.end(), [](const ScoredSample& a, const ScoredSample& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.positive != b.positive) return !a.positive;
    return a.id < b.id;
  });
}

std::size_t count_positives(const std::vector<ScoredSample>& samples) {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [](const ScoredSample& s) { return s.positive; }));
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

PRCurve pr_curve(std::vector<ScoredSample> samples) {
  const std::size_t positives = count_positives(samples);
  if (positives == 0) throw UsageError("pr_curve: no positive samples");
  sort_pessimistic(samples);

  PRCurve curve;
  curve.positives = positives;
  curve.negatives = samples.size() - positives;
  std::size_t tp = 0;
  long double precision_sum = 0.0L;
  for (std::size_t rank = 1; rank <= samples.size(); ++rank) {
    const auto& s = samples[rank - 1];
    if (s.positive) {
      ++tp;
      precision_sum += static_cast<long double>(tp) / static_cast<long double>(rank);
    }
    curve.points.push_back({s.score, static_cast<double>(tp) / static_cast<double>(positives),
                            static_cast<double>(tp) / static_cast<double>(rank)});
  }
  curve.average_precision = static_cast<double>(precision_sum / static_cast<long double>(positives));
  return curve;
}

namespace {

FARCurve far_sweep(std::vector<ScoredSample> samples, double area, double cutoff) {
  if (!(area > 0.0) || !std::isfinite(area)) throw UsageError("far_curve: total area must be positive");
  if (!(cutoff > 0.0)) throw UsageError("far_curve: cutoff must be positive");
  const std::size_t positives = count_positives(samples);
  if (positives == 0) throw UsageError("far_curve: no positive samples");
  sort_pessimistic(samples);

  FARCurve curve;
  curve.cutoff = cutoff;
  curve.total_area = area;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < samples.size();) {
    const double threshold = samples[i].score;
    while (i < samples.size() && samples[i].score == threshold) {
      if (samples[i].positive) ++tp;
      else ++fp;
      ++i;
    }
    curve.points.push_back({threshold, static_cast<double>(fp) / area,
                            static_cast<double>(tp) / static_cast<double>(positives)});
  }

  long double integral = 0.0L;
  double x_prev = 0.0;
  double y_prev = 0.0;
  for (const auto& p : curve.points) {
    if (p.false_alarms_per_area >= cutoff) break;
    integral += static_cast<long double>(y_prev) * (p.false_alarms_per_area - x_prev);
    x_prev = p.false_alarms_per_area;
    y_prev = p.p_d;
  }
  integral += static_cast<long double>(y_prev) * (cutoff - x_prev);
  curve.auc = static_cast<double>(integral / cutoff);
  return curve;
}

}  // namespace

FARCurve far_curve(std::vector<ScoredSample> samples, double total_area_km2, double cutoff) {
  return far_sweep(std::move(samples), total_area_km2, cutoff);
}

FARCurve far_curve_per_1000(std::vector<ScoredSample> samples, double cutoff) {
  const double area = static_cast<double>(samples.size()) / 1000.0;
  FARCurve curve = far_sweep(std::move(samples), area, cutoff);
  curve.unit = kUnitPer1000;
  return curve;
}

double imbalance_ratio(std::size_t positives, std::size_t negatives) {
  if (positives == 0) throw UsageError("imbalance_ratio: no positives");
  return static_cast<double>(negatives) / static_cast<double>(positives);
}

void write_svg_plot(const std::filesystem::path& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<PlotSeries>& series, double x_marker) {
  bool any = false;
  double x_max = 0.0, y_max = 0.0, y_min = 0.0;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) throw NumericError("non-finite plot value");
      x_max = any ? std::max(x_max, x) : x;
      y_max = any ? std::max(y_max, y) : y;
      y_min = any ? std::min(y_min, y) : y;
      any = true;
    }
  }
  if (!any) throw UsageError("cannot plot a curve with no points");
  y_min = std::min(y_min, 0.0);
  if (x_marker > x_max) x_max = x_marker;
  if (x_max <= 0.0) x_max = 1.0;
  if (y_max <= y_min) y_max = y_min + 1.0;

  constexpr double W = 480, H = 360, L = 60, R = 20, T = 40, B = 50;
  auto sx = [&](double x) { return L + (W - L - R) * x / x_max; };
  auto sy = [&](double y) { return H - B - (H - T - B) * (y - y_min) / (y_max - y_min); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\">\n"
      << "<rect width=\"480\" height=\"360\" fill=\"white\"/>\n"
      << "<text x=\"240\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape_xml(title) << "</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << escape_xml(x_label) << "</text>\n"
      << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
      << (T + H - B) / 2 << ")\">" << escape_xml(y_label) << "</text>\n"
      << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-size=\"10\">0</text>\n"
      << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" text-anchor=\"end\" font-size=\"10\">"
      << format_double(x_max) << "</text>\n"
      << "<text x=\"" << L - 4 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
      << format_double(y_max) << "</text>\n";
  if (x_marker > 0.0) {
    out << "<line x1=\"" << fixed(sx(x_marker)) << "\" y1=\"" << T << "\" x2=\"" << fixed(sx(x_marker))
        << "\" y2=\"" << H - B << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = colors[i % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < series[i].points.size(); ++j) {
      if (j) out << ' ';
      out << fixed(sx(series[i].points[j].first)) << ',' << fixed(sy(series[i].points[j].second));
    }
    out << "\"/>\n";
    out << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (i + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
        << color << "\">" << escape_xml(series[i].name) << "</text>\n";
  }
  out << "</svg>\n";
}

void write_pr_csv(const std::filesystem::path& path, const PRCurve& curve) {
  if (curve.points.empty()) throw UsageError("PR curve has no points");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  out << "threshold,recall,precision\n";
  for (const auto& p : curve.points) {
    out << format_double(p.threshold) << ',' << format_double(p.recall) << ',' << format_double(p.precision) << '\n';
  }
}

void write_far_csv(const std::filesystem::path& path, const FARCurve& curve) {
  if (curve.points.empty()) throw UsageError("FAR curve has no points");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  out << "threshold," << curve.unit << ",p_d\n";
  for (const auto& p : curve.points) {
    out << format_double(p.threshold) << ',' << format_double(p.false_alarms_per_area) << ','
        << format_double(p.p_d) << '\n';
  }
}

void emit_curves(const PRCurve& pr, const FARCurve& far, const std::filesystem::path& out_dir,
                 const std::string& label) {
  if (pr.points.empty() || far.points.empty()) throw UsageError("emit_curves: empty curve");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IngestError("cannot create " + out_dir.string() + ": " + ec.message());

  write_pr_csv(out_dir / "pr.csv", pr);
  write_far_csv(out_dir / "far.csv", far);

  PlotSeries pr_series{label + " (AP " + fixed(pr.average_precision) + ")", {}};
  for (const auto& p : pr.points) pr_series.points.emplace_back(p.recall, p.precision);
  write_svg_plot(out_dir / "pr.svg", "Precision-Recall", "recall", "precision", {pr_series});

  PlotSeries far_series{label + " (AUC " + fixed(far.auc) + ")", {{0.0, 0.0}}};
  for (const auto& p : far.points) far_series.points.emplace_back(p.false_alarms_per_area, p.p_d);
  write_svg_plot(out_dir / "far.svg", "False alarm rate", far.unit, "p_d", {far_series}, far.cutoff);
}

}  // namespace rebalance
