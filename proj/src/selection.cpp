#include "rebalance/selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "rebalance/error.hpp"
#include "rebalance/format.hpp"
#include "rebalance/parallel.hpp"
#include "rebalance/rng.hpp"

namespace rebalance {

void validate(const SelectionConfig& cfg) {
  if (cfg.m_farthest < 1) throw UsageError("selection: M must be >= 1");
  if (cfg.m_farthest > cfg.n_closest) throw UsageError("selection: M must not exceed N");
  if (cfg.n_closest > cfg.subsample_k) throw UsageError("selection: N must not exceed subsample_k");
  if (cfg.large_ref_cap < 1) throw UsageError("selection: large_ref_cap must be >= 1");
}

std::vector<std::int64_t> subsample_source(std::vector<std::int64_t> ids, std::size_t k,
                                           std::uint64_t seed) {
  if (ids.empty()) throw UsageError("subsample_source: empty source list");
  if (k < 1) throw UsageError("subsample_source: k must be >= 1");
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  std::vector<std::int64_t> out;
  for (auto i : sample_indices(ids.size(), k, rng)) out.push_back(ids[i]);
  return out;
}

double l2_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw UsageError("l2_distance: length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - v[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

double l2_distance(const FeatureVector& u, const FeatureVector& v) {
  return l2_distance(std::span<const double>(u.values), std::span<const double>(v.values));
}

NearestReference min_dist_to_class(const FeatureVector& v, const std::vector<FeatureVector>& refs) {
  if (refs.empty()) throw UsageError("min_dist_to_class: empty reference set");
  NearestReference best{l2_distance(v, refs[0]), 0};
  for (std::size_t i = 1; i < refs.size(); ++i) {
    const double d = l2_distance(v, refs[i]);
    if (d < best.distance) best = {d, i};
  }
  return best;
}

SelectionResult select_supplement(const std::map<std::int64_t, FeatureVector>& candidates,
                                  const std::vector<FeatureVector>& starved_refs,
                                  const std::vector<FeatureVector>& large_refs,
                                  const SelectionConfig& cfg, std::size_t workers) {
  if (candidates.empty()) throw UsageError("select_supplement: no candidates");
  if (starved_refs.empty()) throw UsageError("select_supplement: no starved-class references");
  if (large_refs.empty()) throw UsageError("select_supplement: no large-class references");
  if (cfg.m_farthest < 1 || cfg.m_farthest > cfg.n_closest) {
    throw UsageError("select_supplement: need 1 <= M <= N");
  }

  std::vector<const std::pair<const std::int64_t, FeatureVector>*> entries;
  entries.reserve(candidates.size());
  for (const auto& entry : candidates) entries.push_back(&entry);

  const auto d_starved = parallel_map(entries.size(), workers, [&](std::size_t i) {
    return min_dist_to_class(entries[i]->second, starved_refs).distance;
  });

  struct Scored {
    std::int64_t id;
    double distance;
    std::size_t entry;
  };
  std::vector<Scored> stage1;
  stage1.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) stage1.push_back({entries[i]->first, d_starved[i], i});
  std::sort(stage1.begin(), stage1.end(), [](const Scored& a, const Scored& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  });
  stage1.resize(std::min(cfg.n_closest, stage1.size()));

  SelectionResult result;
  for (const auto& s : stage1) {
    result.shortlist_ids.push_back(s.id);
    result.d_starved[s.id] = s.distance;
  }

  const auto d_large = parallel_map(stage1.size(), workers, [&](std::size_t i) {
    return min_dist_to_class(entries[stage1[i].entry]->second, large_refs).distance;
  });
  std::vector<Scored> stage2;
  stage2.reserve(stage1.size());
  for (std::size_t i = 0; i < stage1.size(); ++i) stage2.push_back({stage1[i].id, d_large[i], stage1[i].entry});
  std::sort(stage2.begin(), stage2.end(), [](const Scored& a, const Scored& b) {
    return a.distance != b.distance ? a.distance > b.distance : a.id < b.id;
  });
  for (const auto& s : stage2) result.d_large[s.id] = s.distance;
  stage2.resize(std::min(cfg.m_farthest, stage2.size()));
  for (const auto& s : stage2) result.selected_ids.push_back(s.id);
  return result;
}

void write_selection_csv(const std::filesystem::path& path, const SelectionResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());

  std::vector<std::int64_t> order = result.shortlist_ids;
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    const double da = result.d_large.at(a);
    const double db = result.d_large.at(b);
    return da != db ? da > db : a < b;
  });
  std::vector<std::int64_t> selected = result.selected_ids;
  std::sort(selected.begin(), selected.end());

  out << "id,stage,d_starved,d_large\n";
  for (const auto id : order) {
    const bool is_selected = std::binary_search(selected.begin(), selected.end(), id);
    out << id << ',' << (is_selected ? "selected" : "shortlist") << ','
        << format_double(result.d_starved.at(id)) << ',' << format_double(result.d_large.at(id))
        << '\n';
  }
}

SelectionResult read_selection_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("selection file not found: " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "id,stage,d_starved,d_large") {
    throw CompatibilityError("unexpected selection header in " + path.string());
  }
  SelectionResult result;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id_s, stage, ds, dl;
    std::getline(ss, id_s, ',');
    std::getline(ss, stage, ',');
    std::getline(ss, ds, ',');
    std::getline(ss, dl, ',');
    try {
      const std::int64_t id = std::stoll(id_s);
      result.d_starved[id] = parse_double(ds);
      result.d_large[id] = parse_double(dl);
      result.shortlist_ids.push_back(id);
      if (stage == "selected") result.selected_ids.push_back(id);
      else if (stage != "shortlist") throw std::invalid_argument("stage");
    } catch (const std::exception&) {
      throw CompatibilityError("malformed selection row " + std::to_string(row) + " in " + path.string());
    }
  }
  std::sort(result.shortlist_ids.begin(), result.shortlist_ids.end(), [&](std::int64_t a, std::int64_t b) {
    const double da = result.d_starved.at(a);
    const double db = result.d_starved.at(b);
    return da != db ? da < db : a < b;
  });
  return result;
}

}  // namespace rebalance
