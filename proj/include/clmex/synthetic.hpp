#pragma once

// Procedural multi-view "faces". Each (subject, session) is one simultaneous
// capture: the same face, with one expression, rendered from every angle of
// the view set. Heads are modelled as vertical cylinders, so turning the head
// compresses features towards the silhouette and hides the far half of the
// face; the expression signal therefore weakens as |angle| grows.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "clmex/dataset.hpp"
#include "clmex/image.hpp"
#include "clmex/rng.hpp"

namespace clmex {

struct SynthConfig {
  std::size_t subjects = 12;
  std::size_t sessions = 4;
  std::size_t expressions = 4;
  std::vector<int> views{-90, -45, 0, 45, 90};
  std::size_t image_size = 32;
  std::uint64_t seed = 7;
  // 1 renders the full head rotation; 0 keeps every view frontal except for a
  // small sideways shift.
  double view_degradation = 0.8;
  double noise_std = 0.02;
};

class SynthConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kMinSynthImageSize = 16;

struct ExpressionShape {
  const char* name;
  double mouth_curve;  // > 0 corners up
  double mouth_open;   // 0 closed .. 1 wide open
  double brow_raise;   // > 0 raised
  double brow_tilt;    // > 0 inner ends lowered
  double eye_open;     // 1 neutral
};

inline constexpr std::array<ExpressionShape, 8> kExpressionShapes{{
    {"neutral", 0.0, 0.0, 0.0, 0.0, 1.0},
    {"happy", 1.0, 0.25, 0.1, 0.0, 0.75},
    {"sad", -0.9, 0.0, 0.2, -0.9, 0.8},
    {"surprised", 0.0, 1.0, 1.0, 0.0, 1.4},
    {"angry", -0.4, 0.1, -0.7, 1.0, 0.65},
    {"afraid", -0.3, 0.6, 0.8, -0.7, 1.3},
    {"disgust", -0.6, 0.2, -0.4, 0.6, 0.55},
    {"pleased", 0.6, 0.0, 0.0, 0.0, 0.9},
}};

namespace detail {

struct SubjectLook {
  std::array<double, 3> skin, hair, background;
  double face_w, face_h;  // half extents, in image units ([-0.5, 0.5] spans the frame)
  double eye_dx, eye_y, eye_r;
  double mouth_y, mouth_w;
  double mark_u, mark_v, mark_r, mark_tone;
};

struct SessionLook {
  ExpressionShape expr;
  double intensity;
  double light;
  double dx, dy;
};

inline SubjectLook draw_subject(Rng& rng) {
  SubjectLook s{};
  const double r = uniform(rng, 0.65, 0.88);
  s.skin = {r, r * uniform(rng, 0.68, 0.86), r * uniform(rng, 0.5, 0.75)};
  const double h = uniform(rng, 0.05, 0.4);
  s.hair = {h, h * uniform(rng, 0.6, 1.0), h * uniform(rng, 0.4, 0.9)};
  // One studio backdrop for everybody, as in posed expression datasets.
  const double g = uniform(rng, 0.5, 0.56);
  s.background = {g * uniform(rng, 0.97, 1.03), g, g * uniform(rng, 0.97, 1.03)};
  s.face_w = uniform(rng, 0.30, 0.37);
  s.face_h = uniform(rng, 0.38, 0.45);
  s.eye_dx = uniform(rng, 0.11, 0.15);
  s.eye_y = uniform(rng, -0.12, -0.06);
  s.eye_r = uniform(rng, 0.045, 0.06);
  s.mouth_y = uniform(rng, 0.15, 0.21);
  s.mouth_w = uniform(rng, 0.11, 0.15);
  s.mark_u = uniform(rng, -0.2, 0.2);
  s.mark_v = uniform(rng, -0.25, 0.05);
  s.mark_r = uniform(rng, 0.03, 0.05);
  s.mark_tone = bernoulli(rng, 0.5) ? 0.5 : 1.35;
  return s;
}

inline double smooth_inside(double signed_dist, double soft) {
  return std::clamp(0.5 - signed_dist / soft, 0.0, 1.0);
}

/// Frontal face texture at face coordinates (u, v); returns RGB before shading.
inline std::array<double, 3> face_texture(const SubjectLook& s, const SessionLook& e, double u, double v) {
  const double k = e.intensity;
  std::array<double, 3> c = s.skin;
  auto paint = [&](const std::array<double, 3>& ink, double amount) {
    for (int i = 0; i < 3; ++i) c[i] = c[i] * (1.0 - amount) + ink[i] * amount;
  };
  const std::array<double, 3> dark{0.08, 0.06, 0.06};

  // Subject mark (mole / freckle patch).
  const double dm = std::hypot(u - s.mark_u, v - s.mark_v) - s.mark_r;
  if (dm < 0.02) {
    const auto tone = std::array<double, 3>{s.skin[0] * s.mark_tone, s.skin[1] * s.mark_tone, s.skin[2] * s.mark_tone};
    paint(tone, smooth_inside(dm, 0.02));
  }

  // Nose ridge.
  if (std::abs(u) < 0.025 && v > s.eye_y + 0.03 && v < s.mouth_y - 0.06) paint(dark, 0.25);

  const double eye_open = 1.0 + (e.expr.eye_open - 1.0) * k;
  const double brow_raise = e.expr.brow_raise * k;
  const double brow_tilt = e.expr.brow_tilt * k;
  for (double side : {-1.0, 1.0}) {
    const double cx = side * s.eye_dx;
    // Eye: ellipse whose height follows openness.
    const double ry = s.eye_r * 0.75 * eye_open;
    const double de = std::hypot((u - cx) / s.eye_r, (v - s.eye_y) / ry) - 1.0;
    if (de < 0.3) paint(dark, smooth_inside(de * s.eye_r, 0.015));
    // Brow: tilted bar above the eye; inner end lowered by positive tilt.
    const double t = (u - cx) / (1.4 * s.eye_r);
    if (std::abs(t) <= 1.0) {
      const double inner = -side * t;  // +1 towards the nose
      const double by = s.eye_y - s.eye_r * 1.8 - 0.09 * brow_raise + 0.06 * brow_tilt * inner;
      const double db = std::abs(v - by) - 0.018;
      if (db < 0.02) paint(s.hair, smooth_inside(db, 0.015));
    }
  }

  // Mouth: a parabola through the corners, bowed by the curve parameter, with
  // an open-mouth ellipse underneath.
  const double mu = u / s.mouth_w;
  if (std::abs(mu) <= 1.15) {
    const double curve = e.expr.mouth_curve * k;
    const double open = e.expr.mouth_open * k;
    const double line_y = s.mouth_y + 0.1 * curve * (1.0 - mu * mu);
    const double thickness = 0.018 + 0.07 * open;
    const double dl = std::abs(v - (line_y + 0.5 * 0.07 * open)) - thickness;
    if (std::abs(mu) <= 1.0 && dl < 0.02) paint(dark, smooth_inside(dl, 0.015));
  }
  return c;
}

inline Image render_view(const SubjectLook& s, const SessionLook& e, int angle_deg, const SynthConfig& cfg,
                         Rng& noise_rng) {
  const std::size_t n = cfg.image_size;
  Image img(n, n, 3);
  const double theta = cfg.view_degradation * angle_deg * std::numbers::pi / 180.0;
  const double shift = 0.06 * std::sin(angle_deg * std::numbers::pi / 180.0) + e.dx;
  const double radius = s.face_w * 1.08;
  constexpr int kSuper = 3;
  for (std::size_t py = 0; py < n; ++py) {
    for (std::size_t px = 0; px < n; ++px) {
      std::array<double, 3> acc{0, 0, 0};
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double x = (px + (sx + 0.5) / kSuper) / n - 0.5 - shift;
          const double y = (py + (sy + 0.5) / kSuper) / n - 0.5 - e.dy;
          std::array<double, 3> c = s.background;
          const double head_h = s.face_h * 1.1;
          if (std::abs(x) < radius && std::abs(y) < head_h * std::sqrt(std::max(0.0, 1.0 - (x / radius) * (x / radius) * 0.3))) {
            const double psi = std::asin(x / radius);
            const double phi = psi - theta;
            const double shade = 0.55 + 0.45 * std::cos(psi);
            if (std::abs(phi) > std::numbers::pi / 2) {
              c = s.hair;
            } else {
              const double u = radius * std::sin(phi);
              const bool on_face = (u / s.face_w) * (u / s.face_w) + (y / s.face_h) * (y / s.face_h) <= 1.0;
              c = on_face ? face_texture(s, e, u, y) : s.hair;
            }
            for (auto& ch : c) ch *= shade;
          }
          for (int i = 0; i < 3; ++i) acc[i] += c[i];
        }
      }
      for (int i = 0; i < 3; ++i) {
        const double v = acc[i] / (kSuper * kSuper) * e.light + normal(noise_rng, 0.0, cfg.noise_std);
        img.at(py, px, static_cast<std::size_t>(i)) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  quantize_to_float(img);
  return img;
}

inline std::string subject_name(std::size_t s) { return "s" + std::to_string(100 + s).substr(1); }
inline std::string session_name(std::size_t p) { return "p" + std::to_string(p); }

}  // namespace detail

inline std::vector<std::string> synthetic_expression_names(std::size_t count) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < count; ++k) {
    names.push_back(k < kExpressionShapes.size() ? kExpressionShapes[k].name : "expr" + std::to_string(k));
  }
  return names;
}

/// Image file name used for a synthetic record, relative to the manifest.
inline std::string synthetic_image_path(const ManifestRecord& r) {
  return "images/" + r.subject_id + "_" + r.session_id + "_v" + std::to_string(r.view_angle_deg) + ".rawf";
}

/// Renders subjects x sessions x |views| images. Deterministic for a seed.
/// Each subject's sessions cycle through a seeded permutation of expressions.
inline Dataset generate_synthetic_dataset(const SynthConfig& cfg) {
  if (cfg.subjects < 1 || cfg.sessions < 1 || cfg.expressions < 1 || cfg.views.empty()) {
    throw SynthConfigError("synthetic dataset needs at least one subject, session, expression and view");
  }
  if (cfg.image_size < kMinSynthImageSize) {
    throw SynthConfigError("image size " + std::to_string(cfg.image_size) + " is below the minimum of " +
                           std::to_string(kMinSynthImageSize) + " pixels");
  }
  Dataset d;
  d.expression_vocabulary = synthetic_expression_names(cfg.expressions);
  d.view_set = cfg.views;

  std::vector<ExpressionShape> shapes;
  Rng extra(mix_seed(cfg.seed, 0xE));
  for (std::size_t k = 0; k < cfg.expressions; ++k) {
    if (k < kExpressionShapes.size()) {
      shapes.push_back(kExpressionShapes[k]);
    } else {
      shapes.push_back({"extra", uniform(extra, -1, 1), uniform(extra, 0, 1), uniform(extra, -1, 1),
                        uniform(extra, -1, 1), uniform(extra, 0.5, 1.4)});
    }
  }

  for (std::size_t s = 0; s < cfg.subjects; ++s) {
    Rng subject_rng(mix_seed(cfg.seed, 1000 + s));
    const auto look = detail::draw_subject(subject_rng);
    std::vector<std::size_t> order(cfg.expressions);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    shuffle(order, subject_rng);
    for (std::size_t p = 0; p < cfg.sessions; ++p) {
      const std::size_t expr = order[p % order.size()];
      detail::SessionLook session{shapes[expr], uniform(subject_rng, 0.85, 1.0), uniform(subject_rng, 0.9, 1.1),
                                  uniform(subject_rng, -0.03, 0.03), uniform(subject_rng, -0.03, 0.03)};
      for (std::size_t v = 0; v < cfg.views.size(); ++v) {
        Rng noise(mix_seed(cfg.seed, (s * 1000 + p) * 1000 + v));
        Sample sample;
        sample.image = detail::render_view(look, session, cfg.views[v], cfg, noise);
        sample.subject_id = detail::subject_name(s);
        sample.expression = static_cast<int>(expr);
        sample.view_angle_deg = cfg.views[v];
        sample.session_id = detail::session_name(p);
        d.samples.push_back(std::move(sample));
      }
    }
  }
  assign_view_invariant_ids(d);
  return d;
}

inline DatasetManifest manifest_for(const Dataset& d) {
  DatasetManifest m;
  m.expression_vocabulary = d.expression_vocabulary;
  m.view_set = d.view_set;
  for (const auto& s : d.samples) {
    ManifestRecord r{"", s.subject_id, d.expression_vocabulary.at(static_cast<std::size_t>(s.expression)),
                     s.view_angle_deg, s.session_id};
    r.image_path = synthetic_image_path(r);
    m.records.push_back(std::move(r));
  }
  return m;
}

/// Writes `<dir>/manifest.csv` and `<dir>/images/*.rawf`; returns the manifest.
inline DatasetManifest write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  auto m = manifest_for(d);
  m.root = dir;
  for (std::size_t i = 0; i < d.samples.size(); ++i) write_raw_image(dir / m.records[i].image_path, d.samples[i].image);
  write_manifest(dir / "manifest.csv", m);
  return m;
}

}  // namespace clmex
