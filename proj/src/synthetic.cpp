#include "rebalance/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rebalance/error.hpp"

namespace rebalance::synthetic {
namespace {

constexpr double kPi = std::numbers::pi;

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

double smoothstep(double edge, double x) {
  // 1 inside (x <= -edge), 0 outside (x >= edge).
  const double t = std::clamp((edge - x) / (2.0 * edge), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

void blend(ImagePatch& img, int r, int c, double value, double alpha) {
  if (alpha <= 0.0) return;
  double& p = img.at(r, c);
  p = (1.0 - alpha) * p + alpha * value;
}

void clamp_unit(ImagePatch& img) {
  for (double& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
}

void add_noise(ImagePatch& img, double sd, Rng& rng) {
  for (double& p : img.pixels) p += rng.normal(0.0, sd);
}

// Low-frequency seabed with multiplicative speckle.
ImagePatch seabed(int n, Rng& rng) {
  ImagePatch img(n, n);
  const double level = uniform(rng, 0.3, 0.45);
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    const double angle = uniform(rng, 0.0, kPi);
    const double k = 2.0 * kPi / uniform(rng, 24.0, 80.0);
    waves.push_back({k * std::cos(angle), k * std::sin(angle), uniform(rng, 0.0, 2.0 * kPi),
                     uniform(rng, 0.02, 0.06)});
  }
  const double speckle = uniform(rng, 0.12, 0.2);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      double v = level;
      for (const auto& w : waves) v += w.amp * std::cos(w.kx * c + w.ky * r + w.phase);
      img.at(r, c) = v * (1.0 + rng.normal(0.0, speckle));
    }
  }
  return img;
}

// Flat gray with a mild gradient and additive noise.
ImagePatch plain_background(int n, Rng& rng) {
  ImagePatch img(n, n);
  const double level = uniform(rng, 0.15, 0.6);
  const double gx = uniform(rng, -0.003, 0.003);
  const double gy = uniform(rng, -0.003, 0.003);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) img.at(r, c) = level + gx * (c - n / 2) + gy * (r - n / 2);
  }
  add_noise(img, uniform(rng, 0.01, 0.06), rng);
  return img;
}

struct Box {
  double cx, cy, half_w, half_h, angle;

  // Coordinates in the box frame.
  void local(int r, int c, double& u, double& v) const {
    const double dx = c - cx;
    const double dy = r - cy;
    u = dx * std::cos(angle) + dy * std::sin(angle);
    v = -dx * std::sin(angle) + dy * std::cos(angle);
  }

  // Soft inside weight.
  double inside(int r, int c) const {
    double u = 0.0, v = 0.0;
    local(r, c, u, v);
    const double d = std::max(std::abs(u) - half_w, std::abs(v) - half_h);
    return smoothstep(0.6, d);
  }
};

// Darkens the region behind `box` along +x, as a sonar shadow.
void draw_shadow(ImagePatch& img, const Box& box, double length, double depth) {
  const int n = img.height;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      double best = 0.0;
      for (double s = 1.0; s <= length; s += 1.0) {
        const int cc = static_cast<int>(std::lround(c - s));
        if (cc < 0) break;
        best = std::max(best, box.inside(r, cc));
        if (best >= 1.0) break;
      }
      if (best > 0.0) img.at(r, c) *= 1.0 - depth * best;
    }
  }
}

void draw_slatted_box(ImagePatch& img, const Box& box, double period, double duty,
                      double bright, double body) {
  const int n = img.height;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double a = box.inside(r, c);
      if (a <= 0.0) continue;
      double u = 0.0, v = 0.0;
      box.local(r, c, u, v);
      double phase = (u + box.half_w) / period;
      phase -= std::floor(phase);
      const bool slat = phase < duty;
      const double rim = std::abs(v) > box.half_h - 1.5 ? 1.0 : 0.0;
      blend(img, r, c, slat || rim > 0.0 ? bright : body, a);
    }
  }
}

void draw_solid_box(ImagePatch& img, const Box& box, double value) {
  const int n = img.height;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) blend(img, r, c, value, box.inside(r, c));
  }
}

void draw_outline_box(ImagePatch& img, const Box& box, double width, double value, bool cross) {
  const int n = img.height;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      double u = 0.0, v = 0.0;
      box.local(r, c, u, v);
      const double d = std::max(std::abs(u) - box.half_w, std::abs(v) - box.half_h);
      double dist = std::abs(d);
      if (cross && d < 0.0) dist = std::min({dist, std::abs(u), std::abs(v)});
      blend(img, r, c, value, smoothstep(0.6, dist - width / 2.0));
    }
  }
}

void draw_blob(ImagePatch& img, double cx, double cy, double sx, double sy, double value) {
  const int n = img.height;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double dx = (c - cx) / sx;
      const double dy = (r - cy) / sy;
      blend(img, r, c, value, std::exp(-0.5 * (dx * dx + dy * dy)));
    }
  }
}

void draw_segment(ImagePatch& img, double x0, double y0, double x1, double y1, double width,
                  double value) {
  const int n = img.height;
  const double lx = x1 - x0;
  const double ly = y1 - y0;
  const double len2 = std::max(lx * lx + ly * ly, 1e-9);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double t = std::clamp(((c - x0) * lx + (r - y0) * ly) / len2, 0.0, 1.0);
      const double dx = c - (x0 + t * lx);
      const double dy = r - (y0 + t * ly);
      blend(img, r, c, value, smoothstep(0.6, std::hypot(dx, dy) - width / 2.0));
    }
  }
}

void draw_ring(ImagePatch& img, double cx, double cy, double radius, double width, double value,
               bool filled) {
  const int n = img.height;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double d = std::hypot(c - cx, r - cy) - radius;
      const double dist = filled ? d : std::abs(d) - width / 2.0;
      blend(img, r, c, value, smoothstep(0.6, dist));
    }
  }
}

void draw_stripes(ImagePatch& img, double angle, double period, double amp, double phase0) {
  const int n = img.height;
  const double kx = 2.0 * kPi / period * std::cos(angle);
  const double ky = 2.0 * kPi / period * std::sin(angle);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) img.at(r, c) += amp * std::cos(kx * c + ky * r + phase0);
  }
}

Box random_box(int n, Rng& rng, double min_w, double max_w, double min_h, double max_h,
               double jitter) {
  Box box{};
  box.cx = n / 2.0 + uniform(rng, -jitter, jitter);
  box.cy = n / 2.0 + uniform(rng, -jitter, jitter);
  box.half_w = uniform(rng, min_w, max_w) / 2.0;
  box.half_h = uniform(rng, min_h, max_h) / 2.0;
  box.angle = uniform(rng, 0.0, kPi);
  return box;
}

}  // namespace

const std::vector<std::string>& source_categories() {
  static const std::vector<std::string> names{"ladder", "grid",  "fence", "window",
                                              "disc",   "ring",  "cloud", "speckle"};
  return names;
}

ImagePatch make_starved(int n, Rng& rng) {
  ImagePatch img = seabed(n, rng);
  const Box box = random_box(n, rng, 10.0, 24.0, 7.0, 16.0, 14.0);
  draw_shadow(img, box, uniform(rng, 3.0, 12.0), uniform(rng, 0.3, 0.8));
  draw_slatted_box(img, box, uniform(rng, 3.0, 6.0), uniform(rng, 0.35, 0.65),
                   uniform(rng, 0.5, 0.85), uniform(rng, 0.3, 0.45));
  clamp_unit(img);
  return img;
}

ImagePatch make_large(int n, Rng& rng) {
  ImagePatch img = seabed(n, rng);
  const double kind = rng.uniform();
  if (kind < 0.3) {
    // bare seabed
  } else if (kind < 0.55) {
    const int rocks = 1 + static_cast<int>(rng.uniform_index(3));
    for (int i = 0; i < rocks; ++i) {
      const double cx = uniform(rng, 8.0, n - 8.0);
      const double cy = uniform(rng, 8.0, n - 8.0);
      const double s = uniform(rng, 2.0, 6.0);
      Box shade{cx, cy, s, s * uniform(rng, 0.6, 1.0), 0.0};
      draw_shadow(img, shade, uniform(rng, 3.0, 10.0), uniform(rng, 0.3, 0.7));
      draw_blob(img, cx, cy, s, s * uniform(rng, 0.6, 1.2), uniform(rng, 0.6, 0.95));
    }
  } else if (kind < 0.75) {
    draw_stripes(img, uniform(rng, 0.0, kPi), uniform(rng, 4.0, 10.0), uniform(rng, 0.08, 0.2),
                 uniform(rng, 0.0, 2.0 * kPi));
  } else if (kind < 0.85) {
    const int lines = 1 + static_cast<int>(rng.uniform_index(3));
    for (int i = 0; i < lines; ++i) {
      draw_segment(img, uniform(rng, 0.0, n), uniform(rng, 0.0, n), uniform(rng, 0.0, n),
                   uniform(rng, 0.0, n), uniform(rng, 1.0, 2.5), uniform(rng, 0.5, 0.9));
    }
  } else {
    const Box box = random_box(n, rng, 10.0, 24.0, 7.0, 16.0, 14.0);
    draw_shadow(img, box, uniform(rng, 5.0, 12.0), uniform(rng, 0.5, 0.8));
    draw_solid_box(img, box, uniform(rng, 0.55, 0.9));
  }
  clamp_unit(img);
  return img;
}

ImagePatch make_source(std::size_t category, int n, Rng& rng) {
  ImagePatch img = plain_background(n, rng);
  const double ink = rng.uniform() < 0.5 ? uniform(rng, 0.75, 1.0) : uniform(rng, 0.0, 0.1);
  switch (category) {
    case 0: {  // ladder
      const Box box = random_box(n, rng, 12.0, 40.0, 8.0, 24.0, 12.0);
      draw_slatted_box(img, box, uniform(rng, 3.0, 6.0), uniform(rng, 0.35, 0.6), ink,
                       img.at(n / 2, n / 2));
      break;
    }
    case 1: {  // grid
      const Box box = random_box(n, rng, 16.0, 44.0, 16.0, 44.0, 10.0);
      const double period = uniform(rng, 4.0, 8.0);
      for (double u = -box.half_w; u <= box.half_w; u += period) {
        const double x0 = box.cx + u * std::cos(box.angle) - box.half_h * -std::sin(box.angle);
        const double y0 = box.cy + u * std::sin(box.angle) - box.half_h * std::cos(box.angle);
        const double x1 = box.cx + u * std::cos(box.angle) + box.half_h * -std::sin(box.angle);
        const double y1 = box.cy + u * std::sin(box.angle) + box.half_h * std::cos(box.angle);
        draw_segment(img, x0, y0, x1, y1, 1.2, ink);
      }
      for (double v = -box.half_h; v <= box.half_h; v += period) {
        const double x0 = box.cx - box.half_w * std::cos(box.angle) - v * std::sin(box.angle);
        const double y0 = box.cy - box.half_w * std::sin(box.angle) + v * std::cos(box.angle);
        const double x1 = box.cx + box.half_w * std::cos(box.angle) - v * std::sin(box.angle);
        const double y1 = box.cy + box.half_w * std::sin(box.angle) + v * std::cos(box.angle);
        draw_segment(img, x0, y0, x1, y1, 1.2, ink);
      }
      break;
    }
    case 2: {  // fence
      const double angle = uniform(rng, 0.0, kPi);
      const double period = uniform(rng, 4.0, 9.0);
      const double half = uniform(rng, 0.8, 1.6);
      const double offset = uniform(rng, 0.0, period);
      for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
          const double u = c * std::cos(angle) + r * std::sin(angle) + offset;
          const double d = std::abs(u - period * std::round(u / period));
          blend(img, r, c, ink, smoothstep(0.6, d - half));
        }
      }
      break;
    }
    case 3: {  // window
      const Box box = random_box(n, rng, 14.0, 40.0, 14.0, 40.0, 10.0);
      draw_outline_box(img, box, uniform(rng, 1.5, 3.0), ink, true);
      break;
    }
    case 4: {  // disc
      draw_ring(img, n / 2.0 + uniform(rng, -10.0, 10.0), n / 2.0 + uniform(rng, -10.0, 10.0),
                uniform(rng, 5.0, 18.0), 0.0, ink, true);
      break;
    }
    case 5: {  // ring
      draw_ring(img, n / 2.0 + uniform(rng, -10.0, 10.0), n / 2.0 + uniform(rng, -10.0, 10.0),
                uniform(rng, 6.0, 20.0), uniform(rng, 1.5, 3.5), ink, false);
      break;
    }
    case 6: {  // cloud
      const int blobs = 3 + static_cast<int>(rng.uniform_index(5));
      for (int i = 0; i < blobs; ++i) {
        draw_blob(img, uniform(rng, 0.0, n), uniform(rng, 0.0, n), uniform(rng, 4.0, 12.0),
                  uniform(rng, 4.0, 12.0), uniform(rng, 0.0, 1.0));
      }
      break;
    }
    case 7: {  // speckle
      const double sd = uniform(rng, 0.1, 0.25);
      for (double& p : img.pixels) p *= 1.0 + rng.normal(0.0, sd);
      break;
    }
    default:
      throw UsageError("unknown synthetic source category " + std::to_string(category));
  }
  clamp_unit(img);
  return img;
}

Task generate(const Config& config) {
  if (config.patch < 16) throw UsageError("synthetic patch size must be at least 16");
  if (config.starved_train == 0 || config.large_train == 0 || config.starved_test == 0 ||
      config.large_test == 0) {
    throw UsageError("synthetic task needs both classes in train and test");
  }
  Task task;
  std::int64_t next_id = 1;
  const auto fill = [&](ExampleSet& set, std::size_t count, int label, std::string_view tag,
                        auto make) {
    Rng rng(derive_seed(config.seed, tag));
    for (std::size_t i = 0; i < count; ++i) {
      set.add(next_id++, std::make_shared<const ImagePatch>(make(rng)), label);
    }
  };
  const int n = config.patch;
  fill(task.target_train, config.starved_train, kStarvedClass, "train-starved",
       [n](Rng& rng) { return make_starved(n, rng); });
  fill(task.target_train, config.large_train, kLargeClass, "train-large",
       [n](Rng& rng) { return make_large(n, rng); });
  fill(task.target_test, config.starved_test, kStarvedClass, "test-starved",
       [n](Rng& rng) { return make_starved(n, rng); });
  fill(task.target_test, config.large_test, kLargeClass, "test-large",
       [n](Rng& rng) { return make_large(n, rng); });
  const auto& names = source_categories();
  for (std::size_t c = 0; c < names.size(); ++c) {
    fill(task.source, config.source_per_category, static_cast<int>(c), "source-" + names[c],
         [n, c](Rng& rng) { return make_source(c, n, rng); });
  }
  return task;
}

DatasetManifest write_task(const Task& task, const std::filesystem::path& dir, int patch,
                           double test_area_km2) {
  std::filesystem::create_directories(dir / "images");
  DatasetManifest manifest;
  manifest.patch_size = PatchSize{patch, patch};
  manifest.base_dir = dir;
  if (test_area_km2 > 0.0) manifest.survey_area_km2[Split::test] = test_area_km2;

  const auto emit = [&](const ExampleSet& set, Role role, Split split) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      SampleRecord rec;
      rec.id = set.ids[i];
      rec.image_path = std::filesystem::path("images") / (std::to_string(rec.id) + ".pgm");
      rec.role = role;
      rec.split = split;
      if (role == Role::target) {
        rec.target_label =
            set.labels[i] == kStarvedClass ? TargetLabel::starved : TargetLabel::large;
      } else {
        rec.category = source_categories().at(static_cast<std::size_t>(set.labels[i]));
      }
      write_pgm(dir / rec.image_path, *set.images[i]);
      manifest.records.push_back(std::move(rec));
    }
  };
  emit(task.target_train, Role::target, Split::train);
  emit(task.target_test, Role::target, Split::test);
  emit(task.source, Role::source, Split::train);
  write_manifest(manifest, dir / "manifest.csv");
  return manifest;
}

}  // namespace rebalance::synthetic
