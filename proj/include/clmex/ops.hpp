#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "clmex/tensor.hpp"

namespace clmex {

namespace detail {

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " +
                             to_string(t.shape()));
  }
}

inline void accumulate(const std::shared_ptr<Node>& parent, std::size_t i, double v) {
  parent->grad_buffer()[i] += v;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("add", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [an, bn](const detail::Node& self) {
    for (auto* p : {&an, &bn}) {
      if (!(*p)->requires_grad) continue;
      auto& g = (*p)->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Elementwise factor * a + offset.
inline Tensor affine(const Tensor& a, double factor, double offset) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor + offset;
  auto an = a.node();
  return detail::make_result("affine", a.shape(), std::move(out), {a}, [an, factor](const detail::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

inline Tensor scale(const Tensor& a, double factor) { return affine(a, factor, 0.0); }

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

/// a[m,k] x b[k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += x * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](const detail::Node& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bn->values[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = an->values[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  auto an = a.node();
  return detail::make_result("transpose", {n, m}, std::move(out), {a}, [an, m, n](const detail::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  auto an = a.node();
  return detail::make_result("relu", a.shape(), std::move(out), {a}, [an](const detail::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (an->values[i] > 0.0) g[i] += self.grad[i];
  });
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// input [N,C,H,W], kernel [O,C,KH,KW], optional bias [O] -> [N,O,HO,WO].
/// Lowered per image to an im2col product.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     Conv2dOptions opt = {}) {
  detail::require_rank("conv2d", input, 4);
  detail::require_rank("conv2d", kernel, 4);
  if (opt.stride == 0) throw ShapeError("conv2d", "stride must be positive");
  const std::size_t n_img = input.dim(0), chans = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t outs = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != chans) throw ShapeError("conv2d", input.shape(), kernel.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outs)) {
    throw ShapeError("conv2d", kernel.shape(), bias.shape());
  }
  const std::size_t pad = opt.padding, stride = opt.stride;
  if (h + 2 * pad < kh || w + 2 * pad < kw) throw ShapeError("conv2d", input.shape(), kernel.shape());
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t patch = chans * kh * kw;
  const std::size_t positions = ho * wo;

  auto cols = std::make_shared<std::vector<double>>(n_img * patch * positions, 0.0);
  const auto in = input.values();
  for (std::size_t n = 0; n < n_img; ++n) {
    double* col = cols->data() + n * patch * positions;
    for (std::size_t c = 0; c < chans; ++c)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          double* row = col + ((c * kh + ky) * kw + kx) * positions;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              row[oy * wo + ox] = in[((n * chans + c) * h + iy) * w + ix];
            }
          }
        }
  }

  std::vector<double> out(n_img * outs * positions, 0.0);
  const auto kv = kernel.values();
  for (std::size_t n = 0; n < n_img; ++n) {
    const double* col = cols->data() + n * patch * positions;
    for (std::size_t o = 0; o < outs; ++o) {
      double* dst = out.data() + (n * outs + o) * positions;
      const double b = bias.defined() ? bias[o] : 0.0;
      for (std::size_t p = 0; p < positions; ++p) dst[p] = b;
      for (std::size_t k = 0; k < patch; ++k) {
        const double wk = kv[o * patch + k];
        const double* src = col + k * positions;
        for (std::size_t p = 0; p < positions; ++p) dst[p] += wk * src[p];
      }
    }
  }

  auto inn = input.node(), kn = kernel.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  auto backward = [=](const detail::Node& self) {
    const auto& g = self.grad;
    if (kn->requires_grad) {
      auto& gk = kn->grad_buffer();
      for (std::size_t n = 0; n < n_img; ++n) {
        const double* col = cols->data() + n * patch * positions;
        for (std::size_t o = 0; o < outs; ++o) {
          const double* go = g.data() + (n * outs + o) * positions;
          for (std::size_t k = 0; k < patch; ++k) {
            const double* src = col + k * positions;
            double acc = 0.0;
            for (std::size_t p = 0; p < positions; ++p) acc += go[p] * src[p];
            gk[o * patch + k] += acc;
          }
        }
      }
    }
    if (bn && bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t n = 0; n < n_img; ++n)
        for (std::size_t o = 0; o < outs; ++o) {
          const double* go = g.data() + (n * outs + o) * positions;
          double acc = 0.0;
          for (std::size_t p = 0; p < positions; ++p) acc += go[p];
          gb[o] += acc;
        }
    }
    if (inn->requires_grad) {
      auto& gi = inn->grad_buffer();
      std::vector<double> dcol(patch * positions);
      for (std::size_t n = 0; n < n_img; ++n) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        for (std::size_t o = 0; o < outs; ++o) {
          const double* go = g.data() + (n * outs + o) * positions;
          for (std::size_t k = 0; k < patch; ++k) {
            const double wk = kn->values[o * patch + k];
            double* dst = dcol.data() + k * positions;
            for (std::size_t p = 0; p < positions; ++p) dst[p] += wk * go[p];
          }
        }
        for (std::size_t c = 0; c < chans; ++c)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const double* row = dcol.data() + ((c * kh + ky) * kw + kx) * positions;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                  gi[((n * chans + c) * h + iy) * w + ix] += row[oy * wo + ox];
                }
              }
            }
      }
    }
  };
  if (bias.defined()) {
    return detail::make_result("conv2d", {n_img, outs, ho, wo}, std::move(out), {input, kernel, bias}, backward);
  }
  return detail::make_result("conv2d", {n_img, outs, ho, wo}, std::move(out), {input, kernel}, backward);
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dOptions opt = {}) {
  return conv2d(input, kernel, Tensor{}, opt);
}

/// [N,C,H,W] -> [N,C]
inline Tensor global_average_pool(const Tensor& t) {
  detail::require_rank("global_average_pool", t, 4);
  const std::size_t rows = t.dim(0) * t.dim(1), area = t.dim(2) * t.dim(3);
  if (area == 0) throw ShapeError("global_average_pool", "empty spatial extent");
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t p = 0; p < area; ++p) acc += t[r * area + p];
    out[r] = acc / static_cast<double>(area);
  }
  auto tn = t.node();
  return detail::make_result("global_average_pool", {t.dim(0), t.dim(1)}, std::move(out), {t},
                             [tn, rows, area](const detail::Node& self) {
                               auto& g = tn->grad_buffer();
                               const double inv = 1.0 / static_cast<double>(area);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t p = 0; p < area; ++p) g[r * area + p] += self.grad[r] * inv;
                             });
}

/// x [N,in], weight [out,in], bias [out] -> x * weight^T + bias
inline Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank("dense", x, 2);
  detail::require_rank("dense", weight, 2);
  const std::size_t n = x.dim(0), in = x.dim(1), outs = weight.dim(0);
  if (weight.dim(1) != in) throw ShapeError("dense", x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outs)) {
    throw ShapeError("dense", weight.shape(), bias.shape());
  }
  std::vector<double> out(n * outs);
  const auto xv = x.values(), wv = weight.values();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < outs; ++o) {
      double acc = bias.defined() ? bias[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xv[r * in + i] * wv[o * in + i];
      out[r * outs + o] = acc;
    }
  auto xn = x.node(), wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  auto backward = [=](const detail::Node& self) {
    const auto& g = self.grad;
    if (xn->requires_grad) {
      auto& gx = xn->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < outs; ++o) {
          const double go = g[r * outs + o];
          for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += go * wn->values[o * in + i];
        }
    }
    if (wn->requires_grad) {
      auto& gw = wn->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < outs; ++o) {
          const double go = g[r * outs + o];
          for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += go * xn->values[r * in + i];
        }
    }
    if (bn && bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < outs; ++o) gb[o] += g[r * outs + o];
    }
  };
  if (bias.defined()) return detail::make_result("dense", {n, outs}, std::move(out), {x, weight, bias}, backward);
  return detail::make_result("dense", {n, outs}, std::move(out), {x, weight}, backward);
}

/// (a[i,j] - mean[j]) / scale[j] for a [N,D] tensor; mean and scale are
/// constants, so only `a` receives a gradient.
inline Tensor standardize_columns(const Tensor& a, std::vector<double> mean, std::vector<double> scale) {
  detail::require_rank("standardize_columns", a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (mean.size() != d || scale.size() != d) throw ShapeError("standardize_columns", a.shape(), Shape{mean.size()});
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (a[i * d + j] - mean[j]) / scale[j];
  auto an = a.node();
  return detail::make_result("standardize_columns", a.shape(), std::move(out), {a},
                             [an, n, d, scale = std::move(scale)](const detail::Node& self) {
                               auto& g = an->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i * d + j] / scale[j];
                             });
}

/// Default floor applied to row norms before division.
inline constexpr double kNormFloor = 1e-12;

/// Divides each row of a [N,D] tensor by max(norm, floor). With floor <= 0 a
/// zero-norm row is a domain error.
inline Tensor l2_normalize_rows(const Tensor& t, double floor = kNormFloor) {
  detail::require_rank("l2_normalize_rows", t, 2);
  const std::size_t n = t.dim(0), d = t.dim(1);
  std::vector<double> out(n * d), denom(n);
  std::vector<bool> floored(n, false);
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += t[r * d + j] * t[r * d + j];
    const double norm = std::sqrt(sq);
    if (floor <= 0.0 && norm == 0.0) {
      throw DomainError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    }
    floored[r] = norm < floor;
    denom[r] = floored[r] ? floor : norm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = t[r * d + j] / denom[r];
  }
  auto tn = t.node();
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result("l2_normalize_rows", t.shape(), std::move(out), {t},
                             [tn, y, denom, floored, n, d](const detail::Node& self) {
                               auto& g = tn->grad_buffer();
                               for (std::size_t r = 0; r < n; ++r) {
                                 const double* gy = self.grad.data() + r * d;
                                 if (floored[r]) {
                                   for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[j] / denom[r];
                                   continue;
                                 }
                                 const double* yr = y->data() + r * d;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) dot += yr[j] * gy[j];
                                 for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (gy[j] - yr[j] * dot) / denom[r];
                               }
                             });
}

/// Row-wise log(sum(exp(.))) of a [N,M] tensor -> [N], with the row maximum
/// subtracted before exponentiation. When exclude_diagonal is set, entry (i,i)
/// does not take part in row i.
inline Tensor log_sum_exp_rows(const Tensor& t, bool exclude_diagonal = false) {
  detail::require_rank("log_sum_exp_rows", t, 2);
  const std::size_t n = t.dim(0), m = t.dim(1);
  auto included = [exclude_diagonal](std::size_t i, std::size_t j) { return !(exclude_diagonal && i == j); };
  std::vector<double> out(n);
  auto weights = std::make_shared<std::vector<double>>(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (included(i, j)) mx = std::max(mx, t[i * m + j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw DomainError("log_sum_exp_rows: row " + std::to_string(i) + " has no admissible entries");
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (!included(i, j)) continue;
      const double e = std::exp(t[i * m + j] - mx);
      (*weights)[i * m + j] = e;
      acc += e;
    }
    for (std::size_t j = 0; j < m; ++j) (*weights)[i * m + j] /= acc;
    out[i] = mx + std::log(acc);
  }
  auto tn = t.node();
  return detail::make_result("log_sum_exp_rows", {n}, std::move(out), {t}, [tn, weights, n, m](const detail::Node& self) {
    auto& g = tn->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i] * (*weights)[i * m + j];
  });
}

inline Tensor sum(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  auto tn = t.node();
  return detail::make_result("sum", {}, {acc}, {t}, [tn](const detail::Node& self) {
    auto& g = tn->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor scalar_mean(const Tensor& t) {
  if (t.size() == 0) throw ShapeError("scalar_mean", "empty tensor");
  return scale(sum(t), 1.0 / static_cast<double>(t.size()));
}

/// sum_i weights[i] * t[i] over the flattened tensor; weights are constants.
inline Tensor weighted_sum(const Tensor& t, std::vector<double> weights) {
  if (weights.size() != t.size()) {
    throw ShapeError("weighted_sum", t.shape(), Shape{weights.size()});
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * t[i];
  auto tn = t.node();
  auto w = std::make_shared<std::vector<double>>(std::move(weights));
  return detail::make_result("weighted_sum", {}, {acc}, {t}, [tn, w](const detail::Node& self) {
    auto& g = tn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * (*w)[i];
  });
}

}  // namespace clmex
