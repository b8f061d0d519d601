#include "rebalance/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rebalance/error.hpp"
#include "rebalance/parallel.hpp"
#include "rebalance/rng.hpp"

namespace rebalance {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

// Splits one CSV line; double-quoted fields may contain commas and "" escapes.
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(trim(field));
  return fields;
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

Split parse_split(const std::string& token) {
  if (token == "train") return Split::train;
  if (token == "val") return Split::val;
  if (token == "test") return Split::test;
  throw std::invalid_argument("unknown split token '" + token + "'");
}

std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  auto p = csv;
  return p.replace_extension(".json");
}

void read_sidecar(const std::filesystem::path& path, DatasetManifest& manifest) {
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
    if (j.contains("survey_area_km2")) {
      for (const auto& [key, value] : j.at("survey_area_km2").items()) {
        manifest.survey_area_km2[parse_split(key)] = value.get<double>();
      }
    }
    if (j.contains("patch_size")) {
      const auto& ps = j.at("patch_size");
      manifest.patch_size = {ps.at(0).get<int>(), ps.at(1).get<int>()};
    }
  } catch (const std::exception& e) {
    throw IngestError("malformed manifest sidecar " + path.string() + ": " + e.what());
  }
}

}  // namespace

std::string_view to_string(Role role) { return role == Role::target ? "target" : "source"; }

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string_view to_string(TargetLabel label) {
  return label == TargetLabel::starved ? "starved" : "large";
}

std::string SampleRecord::label_token() const {
  if (role == Role::target && target_label) return std::string(to_string(*target_label));
  return category;
}

std::filesystem::path DatasetManifest::resolve(const SampleRecord& record) const {
  if (record.image_path.is_absolute() || base_dir.empty()) return record.image_path;
  return base_dir / record.image_path;
}

std::int64_t DatasetManifest::max_id() const {
  std::int64_t m = 0;
  for (const auto& r : records) m = std::max(m, r.id);
  return m;
}

DatasetManifest parse_manifest_csv(std::istream& in, const std::string& source_name) {
  DatasetManifest manifest;
  std::string line;
  std::size_t row = 0;

  if (!std::getline(in, line)) throw IngestError(source_name + ": empty manifest");
  ++row;
  const auto header = split_csv_line(line);
  const std::vector<std::string> expected{"id", "path", "role", "split", "label"};
  if (header != expected) {
    throw IngestError(source_name + ": header must be 'id,path,role,split,label'");
  }

  std::set<std::int64_t> seen;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    auto fail = [&](const std::string& why) {
      throw IngestError(source_name + ": row " + std::to_string(row) + ": " + why);
    };
    if (fields.size() != 5) fail("expected 5 fields, got " + std::to_string(fields.size()));

    SampleRecord rec;
    try {
      std::size_t used = 0;
      rec.id = std::stoll(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      fail("malformed id '" + fields[0] + "'");
    }
    if (fields[1].empty()) fail("empty path");
    rec.image_path = fields[1];

    if (fields[2] == "target") rec.role = Role::target;
    else if (fields[2] == "source") rec.role = Role::source;
    else fail("unknown role token '" + fields[2] + "'");

    try {
      rec.split = parse_split(fields[3]);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }

    if (rec.role == Role::target) {
      if (fields[4] == "starved") rec.target_label = TargetLabel::starved;
      else if (fields[4] == "large") rec.target_label = TargetLabel::large;
      else fail("unknown target label token '" + fields[4] + "'");
    } else {
      if (fields[4].empty()) fail("source record without a category");
      rec.category = fields[4];
    }

    if (!seen.insert(rec.id).second) fail("duplicate id " + std::to_string(rec.id));
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("manifest not found: " + path.string());
  DatasetManifest manifest = parse_manifest_csv(in, path.string());
  manifest.base_dir = path.parent_path();
  const auto sidecar = sidecar_path(path);
  if (std::filesystem::exists(sidecar)) read_sidecar(sidecar, manifest);
  validate_manifest(manifest);
  return manifest;
}

void validate_manifest(const DatasetManifest& manifest) {
  std::set<std::int64_t> ids;
  for (const auto& r : manifest.records) {
    if (!ids.insert(r.id).second) throw IngestError("duplicate id " + std::to_string(r.id));
    if (r.role == Role::target && !r.target_label) {
      throw IngestError("target record " + std::to_string(r.id) + " has no starved/large label");
    }
    if (r.role == Role::source && r.category.empty()) {
      throw IngestError("source record " + std::to_string(r.id) + " has no category");
    }
  }
  for (const auto& [split, area] : manifest.survey_area_km2) {
    if (!(area > 0.0) || !std::isfinite(area)) {
      throw IngestError("survey_area_km2 for split " + std::string(to_string(split)) +
                        " must be strictly positive");
    }
  }
  if (manifest.patch_size.height <= 0 || manifest.patch_size.width <= 0) {
    throw IngestError("patch_size must be positive");
  }
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestError("cannot write manifest " + path.string());
  out << "id,path,role,split,label\n";
  for (const auto& r : manifest.records) {
    out << r.id << ',' << quote_csv(r.image_path.generic_string()) << ',' << to_string(r.role)
        << ',' << to_string(r.split) << ',' << quote_csv(r.label_token()) << '\n';
  }
  nlohmann::json j;
  j["patch_size"] = {manifest.patch_size.height, manifest.patch_size.width};
  if (!manifest.survey_area_km2.empty()) {
    nlohmann::json areas = nlohmann::json::object();
    for (const auto& [split, area] : manifest.survey_area_km2) areas[std::string(to_string(split))] = area;
    j["survey_area_km2"] = areas;
  }
  std::ofstream side(sidecar_path(path));
  side << j.dump(2) << '\n';
}

ImagePatch load_image(const SampleRecord& record, const std::filesystem::path& resolved_path,
                      PatchSize patch_size) {
  try {
    const RawImage raw = decode_image(resolved_path);
    if (raw.width <= 0 || raw.height <= 0) throw IngestError("zero-dimension image");
    ImagePatch patch = resize_bilinear(to_grayscale(raw), patch_size);
    if (record.hflip) patch = flip_horizontal(patch);
    return patch;
  } catch (const IngestError& e) {
    throw IngestError("record " + std::to_string(record.id) + ": " + e.what());
  }
}

std::vector<ImagePatch> load_patches(const DatasetManifest& manifest,
                                     const std::vector<SampleRecord>& records,
                                     std::size_t workers) {
  return parallel_map(records.size(), workers, [&](std::size_t i) {
    return load_image(records[i], manifest.resolve(records[i]), manifest.patch_size);
  });
}

std::vector<SampleRecord> select_records(const DatasetManifest& manifest, Role role, Split split) {
  std::vector<SampleRecord> out;
  for (const auto& r : manifest.records) {
    if (r.role == role && r.split == split) out.push_back(r);
  }
  return out;
}

ClassCounts count_target(const DatasetManifest& manifest, Split split) {
  ClassCounts counts;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    if (r.is_starved()) ++counts.starved;
    if (r.is_large()) ++counts.large;
  }
  return counts;
}

DatasetManifest upsample_starved(const DatasetManifest& manifest, int factor, bool hflip_replicas) {
  if (factor < 1) throw UsageError("upsample factor must be >= 1");
  DatasetManifest out = manifest;
  out.records.clear();
  std::int64_t next_id = manifest.max_id() + 1;
  for (const auto& r : manifest.records) {
    out.records.push_back(r);
    if (!(r.split == Split::train && r.is_starved())) continue;
    for (int k = 1; k < factor; ++k) {
      SampleRecord replica = r;
      replica.id = next_id++;
      // Odd replicas are mirrored when augmentation is on.
      replica.hflip = hflip_replicas ? (r.hflip != (k % 2 == 1)) : r.hflip;
      out.records.push_back(std::move(replica));
    }
  }
  return out;
}

DatasetManifest subsample_large(const DatasetManifest& manifest, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0)) throw UsageError("subsample ratio must be positive");
  const ClassCounts counts = count_target(manifest, Split::train);
  if (counts.starved == 0) throw UsageError("subsample_large: train split has no starved records");
  if (counts.large == 0) throw UsageError("subsample_large: train split has no large records");

  const auto wanted = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(counts.starved)));
  Rng rng(seed);
  const auto keep_idx = sample_indices(counts.large, wanted, rng);
  std::vector<bool> keep(counts.large, false);
  for (auto i : keep_idx) keep[i] = true;

  DatasetManifest out = manifest;
  out.records.clear();
  std::size_t large_index = 0;
  for (const auto& r : manifest.records) {
    if (r.split == Split::train && r.is_large()) {
      if (keep[large_index++]) out.records.push_back(r);
    } else {
      out.records.push_back(r);
    }
  }
  return out;
}

DatasetManifest stratified_split(const DatasetManifest& manifest, double val_fraction,
                                 std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw UsageError("val_fraction must lie in (0, 1)");
  }
  const ClassCounts counts = count_target(manifest, Split::train);
  if (counts.starved == 0 || counts.large == 0) {
    throw UsageError("stratified_split: train split must contain both classes");
  }
  Rng rng(seed);
  auto pick = [&](std::size_t n, const char* name) {
    const auto moved = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    if (moved >= n) {
      throw UsageError(std::string("stratified_split: class ") + name +
                       " would have no train records left");
    }
    std::vector<bool> flag(n, false);
    for (auto i : sample_indices(n, moved, rng)) flag[i] = true;
    return flag;
  };
  const auto move_starved = pick(counts.starved, "starved");
  const auto move_large = pick(counts.large, "large");

  DatasetManifest out = manifest;
  std::size_t si = 0;
  std::size_t li = 0;
  for (auto& r : out.records) {
    if (r.split != Split::train || r.role != Role::target) continue;
    const bool move = r.is_starved() ? move_starved[si++] : move_large[li++];
    if (move) r.split = Split::val;
  }
  return out;
}

}  // namespace rebalance
