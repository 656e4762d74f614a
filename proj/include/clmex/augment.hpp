#pragma once

#include <algorithm>
#include <cmath>

#include "clmex/image.hpp"
#include "clmex/rng.hpp"

namespace clmex {

/// Stochastic augmentation settings. Colour jitter strengths are symmetric
/// around identity: a factor is drawn from [1 - s, 1 + s], the hue shift from
/// [-s, s] * 180 degrees.
struct AugmentConfig {
  double min_scale = 0.2;  // crop area fraction
  double max_scale = 1.0;
  double flip_probability = 0.5;
  double grayscale_probability = 0.5;
  double color_probability = 1.0;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.4;
};

/// One concrete draw of the augmentation; `augment` samples it from an rng.
struct AugmentParams {
  double scale = 1.0;   // crop area as a fraction of the image
  double origin_y = 0;  // crop top-left, in pixels
  double origin_x = 0;
  bool flip = false;
  double brightness_factor = 1.0;
  double contrast_factor = 1.0;
  double saturation_factor = 1.0;
  double hue_shift_deg = 0.0;
  bool grayscale = false;

  static AugmentParams identity() { return {}; }
};

// ITU-R BT.601 luma weights.
inline constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

inline AugmentParams sample_augment_params(const AugmentConfig& cfg, std::size_t height, std::size_t width, Rng& rng) {
  AugmentParams p;
  const double lo = std::clamp(cfg.min_scale, 1e-3, 1.0), hi = std::clamp(cfg.max_scale, lo, 1.0);
  p.scale = uniform(rng, lo, hi);
  const double side = std::sqrt(p.scale) * static_cast<double>(std::min(height, width));
  p.origin_y = uniform(rng, 0.0, static_cast<double>(height) - side);
  p.origin_x = uniform(rng, 0.0, static_cast<double>(width) - side);
  p.flip = bernoulli(rng, cfg.flip_probability);
  if (bernoulli(rng, cfg.color_probability)) {
    const auto strength = [](double s) { return std::clamp(s, 0.0, 1.0); };
    p.brightness_factor = uniform(rng, 1.0 - strength(cfg.brightness), 1.0 + strength(cfg.brightness));
    p.contrast_factor = uniform(rng, 1.0 - strength(cfg.contrast), 1.0 + strength(cfg.contrast));
    p.saturation_factor = uniform(rng, 1.0 - strength(cfg.saturation), 1.0 + strength(cfg.saturation));
    p.hue_shift_deg = uniform(rng, -1.0, 1.0) * std::clamp(cfg.hue, 0.0, 0.5) * 180.0;
  }
  p.grayscale = bernoulli(rng, cfg.grayscale_probability);
  return p;
}

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d == 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = 60.0 * std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = 60.0 * ((b - r) / d + 2.0);
  } else {
    h = 60.0 * ((r - g) / d + 4.0);
  }
  if (h < 0.0) h += 360.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = std::fmod(h, 360.0);
  if (h < 0.0) h += 360.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h / 60.0, 2.0) - 1.0));
  const double m = v - c;
  double r1 = 0, g1 = 0, b1 = 0;
  switch (static_cast<int>(h / 60.0) % 6) {
    case 0: r1 = c; g1 = x; break;
    case 1: r1 = x; g1 = c; break;
    case 2: g1 = c; b1 = x; break;
    case 3: g1 = x; b1 = c; break;
    case 4: r1 = x; b1 = c; break;
    default: r1 = c; b1 = x; break;
  }
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

inline double bilinear(const Image& img, double y, double x, std::size_t c) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  if (fy == 0.0 && fx == 0.0) return img.at(y0, x0, c);
  return (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
         fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
}

}  // namespace detail

/// Applies, in order: square crop of area `scale` resized back to the input
/// size, horizontal flip, brightness, contrast, saturation, hue, grayscale.
/// Every stage is skipped when its parameter is the identity, so identity
/// parameters reproduce the input exactly. Output is clamped to [0, 1].
inline Image apply_augment(const Image& in, const AugmentParams& p) {
  const std::size_t h = in.height, w = in.width, ch = in.channels;
  Image out = in;

  const double side = std::sqrt(std::clamp(p.scale, 1e-6, 1.0)) * static_cast<double>(std::min(h, w));
  if (p.scale < 1.0 || p.origin_x != 0.0 || p.origin_y != 0.0) {
    const double sy = side / static_cast<double>(h), sx = side / static_cast<double>(w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < ch; ++c) {
          out.at(y, x, c) = detail::bilinear(in, p.origin_y + (static_cast<double>(y) + 0.5) * sy - 0.5,
                                             p.origin_x + (static_cast<double>(x) + 0.5) * sx - 0.5, c);
        }
  }

  if (p.flip) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w / 2; ++x)
        for (std::size_t c = 0; c < ch; ++c) std::swap(out.at(y, x, c), out.at(y, w - 1 - x, c));
  }

  auto clamp_all = [&] {
    for (auto& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  };
  auto luma = [&](std::size_t y, std::size_t x) {
    return ch >= 3 ? kLumaR * out.at(y, x, 0) + kLumaG * out.at(y, x, 1) + kLumaB * out.at(y, x, 2) : out.at(y, x, 0);
  };

  if (p.brightness_factor != 1.0) {
    for (auto& v : out.pixels) v *= p.brightness_factor;
    clamp_all();
  }
  if (p.contrast_factor != 1.0) {
    double mean = 0.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) mean += luma(y, x);
    mean /= static_cast<double>(h * w);
    for (auto& v : out.pixels) v = (v - mean) * p.contrast_factor + mean;
    clamp_all();
  }
  if (ch >= 3 && p.saturation_factor != 1.0) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double g = luma(y, x);
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = (out.at(y, x, c) - g) * p.saturation_factor + g;
      }
    clamp_all();
  }
  if (ch >= 3 && p.hue_shift_deg != 0.0) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double hh, s, v;
        detail::rgb_to_hsv(out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2), hh, s, v);
        detail::hsv_to_rgb(hh + p.hue_shift_deg, s, v, out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2));
      }
    clamp_all();
  }
  if (ch >= 3 && p.grayscale) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double g = luma(y, x);
        for (std::size_t c = 0; c < ch; ++c) out.at(y, x, c) = g;
      }
  }
  return out;
}

inline Image augment(const Image& in, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(in, sample_augment_params(cfg, in.height, in.width, rng));
}

}  // namespace clmex
