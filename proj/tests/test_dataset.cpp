#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "rebalance/dataset.hpp"
#include "rebalance/error.hpp"
#include "support.hpp"

using namespace rebalance;

namespace {

DatasetManifest parse(const std::string& text) {
  std::istringstream in(text);
  return parse_manifest_csv(in, "inline");
}

DatasetManifest toy_manifest(std::size_t starved, std::size_t large) {
  DatasetManifest m;
  std::int64_t id = 1;
  for (std::size_t i = 0; i < starved; ++i) {
    m.records.push_back({id, "s" + std::to_string(id) + ".pgm", Role::target, Split::train, TargetLabel::starved, "", false});
    ++id;
  }
  for (std::size_t i = 0; i < large; ++i) {
    m.records.push_back({id, "l" + std::to_string(id) + ".pgm", Role::target, Split::train, TargetLabel::large, "", false});
    ++id;
  }
  return m;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

// Half-pixel-centred bilinear sample of `img` at output pixel (r, c).
double bilinear_oracle(const ImagePatch& img, int out_h, int out_w, int r, int c) {
  auto coord = [](int d, int in, int out) {
    const double s = (d + 0.5) * in / out - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  const double y = coord(r, img.height, out_h);
  const double x = coord(c, img.width, out_w);
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - y0;
  const double fx = x - x0;
  return (1 - fy) * ((1 - fx) * img.at(y0, x0) + fx * img.at(y0, x1)) +
         fy * ((1 - fx) * img.at(y1, x0) + fx * img.at(y1, x1));
}

}  // namespace

TEST_CASE("manifest parses a well-formed three-row file") {
  const auto m = parse(
      "id,path,role,split,label\n"
      "1,a.pgm,target,train,starved\n"
      "2,b.png,target,test,large\n"
      "3,c.png,source,train,\"crates, wooden\"\n");
  REQUIRE(m.records.size() == 3);
  CHECK(m.records[0].is_starved());
  CHECK(m.records[1].split == Split::test);
  CHECK(m.records[2].role == Role::source);
  CHECK(m.records[2].category == "crates, wooden");
}

TEST_CASE("manifest errors name the row and token") {
  const auto msg = error_of([] { parse("id,path,role,split,label\n1,a.pgm,target,train,starved\n2,b.pgm,tgt,train,large\n"); });
  CHECK(msg.find("row 3") != std::string::npos);
  CHECK(msg.find("tgt") != std::string::npos);

  const auto dup = error_of([] { parse("id,path,role,split,label\n7,a.pgm,target,train,starved\n7,b.pgm,target,train,large\n"); });
  CHECK(dup.find("duplicate id 7") != std::string::npos);

  CHECK_THROWS_AS(parse("id,path,role,split\n"), IngestError);
  CHECK_THROWS_AS(parse("id,path,role,split,label\n1,a.pgm,target,train,crate\n"), IngestError);
  CHECK_THROWS_AS(parse("id,path,role,split,label\n1,a.pgm,source,train,\n"), IngestError);
  CHECK_THROWS_AS(load_manifest("/nonexistent/manifest.csv"), IngestError);
}

TEST_CASE("manifest round-trips through csv and sidecar") {
  testing::TempDir dir;
  DatasetManifest m = toy_manifest(2, 3);
  m.records.push_back({9, "src/x.png", Role::source, Split::train, std::nullopt, "ladder", false});
  m.survey_area_km2[Split::test] = 0.58;
  m.patch_size = {168, 168};
  write_manifest(m, dir / "m.csv");
  const auto back = load_manifest(dir / "m.csv");
  CHECK(back.records == m.records);
  CHECK(back.survey_area_km2 == m.survey_area_km2);
  CHECK(back.patch_size == m.patch_size);
  CHECK(back.resolve(back.records[0]) == dir.path() / "s1.pgm");
}

TEST_CASE("sidecar rejects non-positive survey area") {
  testing::TempDir dir;
  testing::write_file(dir / "m.csv", "id,path,role,split,label\n1,a.pgm,target,test,starved\n");
  testing::write_file(dir / "m.json", R"({"survey_area_km2": {"test": 0.0}})");
  CHECK_THROWS_AS(load_manifest(dir / "m.csv"), IngestError);
}

TEST_CASE("white images load as all ones") {
  testing::TempDir dir;
  ImagePatch white(168, 168, 1.0);
  write_pgm(dir / "w.pgm", white);
  RawImage rgb{5, 4, 3, 255, std::vector<std::uint16_t>(5 * 4 * 3, 255)};
  write_png(dir / "w.png", rgb);

  SampleRecord rec;
  rec.id = 1;
  for (const char* name : {"w.pgm", "w.png"}) {
    const auto patch = load_image(rec, dir / name, {64, 64});
    CHECK(patch.height == 64);
    CHECK(patch.width == 64);
    CHECK(std::all_of(patch.pixels.begin(), patch.pixels.end(), [](double v) { return v == 1.0; }));
  }
}

TEST_CASE("rgb conversion uses rec. 601 luma") {
  RawImage rgb{1, 1, 3, 255, {255, 0, 0}};
  CHECK(to_grayscale(rgb).at(0, 0) == doctest::Approx(0.299).epsilon(1e-15));
  rgb.samples = {0, 255, 0};
  CHECK(to_grayscale(rgb).at(0, 0) == doctest::Approx(0.587).epsilon(1e-15));
  rgb.samples = {0, 0, 255};
  CHECK(to_grayscale(rgb).at(0, 0) == doctest::Approx(0.114).epsilon(1e-15));
}

TEST_CASE("bilinear 2x2 to 4x4 matches the hand oracle") {
  ImagePatch src(2, 2);
  src.at(0, 1) = 1.0;
  src.at(1, 0) = 1.0;
  const auto out = resize_bilinear(src, {4, 4});
  // Sample coordinates are {0, 0.25, 0.75, 1} on both axes.
  const double expected[4][4] = {{0.0, 0.25, 0.75, 1.0},
                                 {0.25, 0.375, 0.625, 0.75},
                                 {0.75, 0.625, 0.375, 0.25},
                                 {1.0, 0.75, 0.25, 0.0}};
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      CHECK(out.at(r, c) == doctest::Approx(expected[r][c]).epsilon(1e-15));
      CHECK(std::abs(out.at(r, c) - bilinear_oracle(src, 4, 4, r, c)) < 1e-15);
    }
  }
}

TEST_CASE("bilinear resize matches the oracle on random images") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 2 + static_cast<int>(rng.uniform_index(30));
    const int w = 2 + static_cast<int>(rng.uniform_index(30));
    const int oh = 1 + static_cast<int>(rng.uniform_index(40));
    const int ow = 1 + static_cast<int>(rng.uniform_index(40));
    const auto img = testing::random_patch(h, w, rng);
    const auto out = resize_bilinear(img, {oh, ow});
    for (int r = 0; r < oh; ++r) {
      for (int c = 0; c < ow; ++c) CHECK(std::abs(out.at(r, c) - bilinear_oracle(img, oh, ow, r, c)) < 1e-12);
    }
  }
}

TEST_CASE("image decoding handles ascii pgm and rejects junk") {
  testing::TempDir dir;
  testing::write_file(dir / "a.pgm", "P2\n# comment\n2 2\n4\n0 4\n2 4\n");
  const auto raw = decode_image(dir / "a.pgm");
  CHECK(raw.width == 2);
  CHECK(raw.height == 2);
  const auto g = to_grayscale(raw);
  CHECK(g.pixels == std::vector<double>{0.0, 1.0, 0.5, 1.0});

  testing::write_file(dir / "junk.pgm", "not an image");
  CHECK_THROWS_AS(decode_image(dir / "junk.pgm"), IngestError);
  testing::write_file(dir / "empty.pgm", "P5\n0 3\n255\n");
  SampleRecord rec;
  rec.id = 42;
  const auto msg = error_of([&] { load_image(rec, dir / "empty.pgm", {4, 4}); });
  CHECK(msg.find("record 42") != std::string::npos);
}

TEST_CASE("loaded patches are bit-identical across loads and worker counts") {
  testing::TempDir dir;
  Rng rng(5);
  DatasetManifest m;
  m.base_dir = dir.path();
  m.patch_size = {16, 16};
  for (int i = 1; i <= 12; ++i) {
    const std::string name = std::to_string(i) + ".pgm";
    write_pgm(dir / name, testing::random_patch(20 + i, 17, rng));
    m.records.push_back({i, name, Role::target, Split::train, TargetLabel::large, "", i % 2 == 0});
  }
  const auto a = load_patches(m, m.records, 1);
  const auto b = load_patches(m, m.records, 4);
  CHECK(a == b);
  for (const auto& p : a) {
    CHECK(*std::min_element(p.pixels.begin(), p.pixels.end()) >= 0.0);
    CHECK(*std::max_element(p.pixels.begin(), p.pixels.end()) <= 1.0);
  }
  // Even ids carry the flip flag.
  SampleRecord plain = m.records[1];
  plain.hflip = false;
  CHECK(a[1] == flip_horizontal(load_image(plain, m.resolve(plain), m.patch_size)));
}

TEST_CASE("upsample_starved multiplies the starved train count") {
  const auto m = toy_manifest(869, 3);
  const auto up = upsample_starved(m, 10);
  CHECK(count_target(up, Split::train).starved == 8690);
  CHECK(count_target(up, Split::train).large == 3);

  const auto small = upsample_starved(toy_manifest(2, 5), 3);
  CHECK(count_target(small, Split::train).starved == 6);
  CHECK(count_target(small, Split::train).large == 5);
  std::set<std::int64_t> ids;
  for (const auto& r : small.records) ids.insert(r.id);
  CHECK(ids.size() == small.records.size());

  CHECK(upsample_starved(m, 1) == m);
  CHECK_THROWS_AS(upsample_starved(m, 0), UsageError);
}

TEST_CASE("upsample with flips marks odd replicas") {
  const auto up = upsample_starved(toy_manifest(1, 1), 4, true);
  std::vector<bool> flips;
  for (const auto& r : up.records) {
    if (r.is_starved()) flips.push_back(r.hflip);
  }
  CHECK(flips == std::vector<bool>{false, true, false, true});
}

TEST_CASE("subsample_large keeps round(ratio * starved) large records") {
  auto m = toy_manifest(10, 1000);
  m.records.push_back({5000, "t.pgm", Role::target, Split::test, TargetLabel::large, "", false});
  const auto a = subsample_large(m, 1.0, 42);
  CHECK(count_target(a, Split::train).large == 10);
  CHECK(count_target(a, Split::train).starved == 10);
  CHECK(count_target(a, Split::test).large == 1);
  CHECK(a == subsample_large(m, 1.0, 42));
  CHECK(count_target(subsample_large(m, 200.0, 42), Split::train).large == 1000);
  CHECK_THROWS_AS(subsample_large(toy_manifest(0, 5), 1.0, 1), UsageError);
}

TEST_CASE("stratified_split moves a rounded fraction per class") {
  const auto m = toy_manifest(100, 1000);
  const auto s = stratified_split(m, 0.1, 3);
  CHECK(count_target(s, Split::val).starved == 10);
  CHECK(count_target(s, Split::val).large == 100);
  CHECK(count_target(s, Split::train).starved == 90);
  CHECK(s == stratified_split(m, 0.1, 3));
  CHECK_FALSE(s == stratified_split(m, 0.1, 4));
  CHECK_THROWS_AS(stratified_split(toy_manifest(1, 10), 0.9, 3), UsageError);
}
