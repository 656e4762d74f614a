#pragma once

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clmex/ops.hpp"

namespace clmex {

/// How N_v (the per-group instance count) is read when normalising the
/// positive terms of an anchor.
///   originals: N_v counts the original samples in group v, so an anchor in a
///              group of 2N_v augmented rows has exactly 2N_v - 1 positives
///              and the normaliser equals the positive count.
///   augmented: N_v counts augmented rows, giving 1 / (2 * count - 1).
enum class PositiveCount { originals, augmented };

enum class Reduction { sum, mean };

struct ContrastiveOptions {
  double temperature = 0.1;
  PositiveCount convention = PositiveCount::originals;
  Reduction reduction = Reduction::sum;
  // Rows of Z must be unit-norm within this tolerance; negative disables the check.
  double unit_norm_tolerance = 1e-6;
};

class ContrastiveInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::map<int, std::size_t> group_counts(std::span<const int> ids) {
  std::map<int, std::size_t> counts;
  for (int id : ids) ++counts[id];
  return counts;
}

inline void validate_contrastive(const char* op, const Tensor& z, std::span<const int> ids,
                                 const ContrastiveOptions& opt) {
  require_rank(op, z, 2);
  if (z.dim(0) != ids.size()) throw ShapeError(op, z.shape(), Shape{ids.size()});
  if (z.dim(0) < 2) throw ContrastiveInputError(std::string(op) + ": need at least two rows");
  if (!(opt.temperature > 0.0)) {
    throw ContrastiveInputError(std::string(op) + ": temperature must be > 0, got " +
                                std::to_string(opt.temperature));
  }
  const auto counts = group_counts(ids);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (counts.at(ids[i]) < 2) {
      throw ContrastiveInputError(std::string(op) + ": anchor " + std::to_string(i) + " (group " +
                                  std::to_string(ids[i]) + ") has no positive");
    }
  }
  if (opt.unit_norm_tolerance >= 0.0) {
    const std::size_t d = z.dim(1);
    for (std::size_t i = 0; i < z.dim(0); ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) sq += z[i * d + j] * z[i * d + j];
      if (std::abs(std::sqrt(sq) - 1.0) > opt.unit_norm_tolerance) {
        throw ContrastiveInputError(std::string(op) + ": row " + std::to_string(i) +
                                    " is not unit-norm (norm " + std::to_string(std::sqrt(sq)) + ")");
      }
    }
  }
}

/// Per-anchor positive weight 1 / (2 N_v - 1).
inline double positive_weight(std::size_t rows_in_group, PositiveCount convention) {
  const double n_v = convention == PositiveCount::originals ? 0.5 * static_cast<double>(rows_in_group)
                                                            : static_cast<double>(rows_in_group);
  return 1.0 / (2.0 * n_v - 1.0);
}

/// Shared multi-positive contrastive objective over arbitrary group ids:
///   sum_i w_i * sum_{j != i, g_j = g_i} [ lse_{k != i}(s_ik) - s_ij ],  s = Z Z^T / tau
inline Tensor grouped_contrastive(const char* op, const Tensor& z, std::span<const int> ids,
                                  const ContrastiveOptions& opt) {
  validate_contrastive(op, z, ids, opt);
  const std::size_t rows = ids.size();
  const auto counts = group_counts(ids);

  Tensor sim = scale(matmul(z, transpose(z)), 1.0 / opt.temperature);
  Tensor lse = log_sum_exp_rows(sim, /*exclude_diagonal=*/true);

  std::vector<double> anchor_weight(rows), pair_weight(rows * rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double w = positive_weight(counts.at(ids[i]), opt.convention);
    std::size_t positives = 0;
    for (std::size_t j = 0; j < rows; ++j) {
      if (j != i && ids[j] == ids[i]) {
        pair_weight[i * rows + j] = w;
        ++positives;
      }
    }
    anchor_weight[i] = w * static_cast<double>(positives);
  }
  Tensor loss = sub(weighted_sum(lse, std::move(anchor_weight)), weighted_sum(sim, std::move(pair_weight)));
  if (opt.reduction == Reduction::mean) loss = scale(loss, 1.0 / static_cast<double>(rows));
  return loss;
}

}  // namespace detail

/// Multi-view contrastive loss over 2N projection rows: rows sharing a
/// view-invariant id are positives for one another, every other row is a
/// negative. Sum-reduced over anchors unless options.reduction says otherwise.
inline Tensor clmex_loss(const Tensor& z, std::span<const int> view_ids, const ContrastiveOptions& opt = {}) {
  return detail::grouped_contrastive("clmex_loss", z, view_ids, opt);
}

/// NT-Xent: each id must occur exactly twice (an anchor and its one positive).
inline Tensor simclr_loss(const Tensor& z, std::span<const int> pair_ids, const ContrastiveOptions& opt = {}) {
  for (const auto& [id, count] : detail::group_counts(pair_ids)) {
    if (count != 2) {
      throw ContrastiveInputError("simclr_loss: pair id " + std::to_string(id) + " occurs " +
                                  std::to_string(count) + " times, expected 2");
    }
  }
  return detail::grouped_contrastive("simclr_loss", z, pair_ids, opt);
}

/// Supervised contrastive loss: class labels take the place of view ids.
inline Tensor supcon_loss(const Tensor& z, std::span<const int> labels, const ContrastiveOptions& opt = {}) {
  return detail::grouped_contrastive("supcon_loss", z, labels, opt);
}

class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Mean categorical cross-entropy of logits [B,E] against labels in [0,E).
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw ShapeError("cross_entropy", logits.shape(), Shape{labels.size()});
  if (batch == 0) throw ShapeError("cross_entropy", "empty batch");
  std::vector<double> picked(batch * classes, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw LabelError("cross_entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
    picked[i * classes + static_cast<std::size_t>(labels[i])] = 1.0 / static_cast<double>(batch);
  }
  return sub(scalar_mean(log_sum_exp_rows(logits)), weighted_sum(logits, std::move(picked)));
}

}  // namespace clmex
