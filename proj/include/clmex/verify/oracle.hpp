#pragma once

// Literal loop transcription of the multi-view contrastive loss, used only to
// cross-check the differentiable implementation. No stabilisation beyond
// plain 64-bit arithmetic.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "clmex/losses.hpp"

namespace clmex::verify {

/// z is row-major [rows, dim]. Returns the sum over anchors.
inline double brute_force_contrastive_oracle(std::span<const double> z, std::size_t dim,
                                             std::span<const int> group_ids, double tau,
                                             PositiveCount convention = PositiveCount::originals) {
  const std::size_t rows = group_ids.size();
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) s += z[a * dim + d] * z[b * dim + d];
    return s;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double instances = 0.0;
    for (std::size_t j = 0; j < rows; ++j)
      if (group_ids[j] == group_ids[i]) instances += 1.0;
    const double n_v = convention == PositiveCount::originals ? instances / 2.0 : instances;

    double denominator = 0.0;
    for (std::size_t k = 0; k < rows; ++k)
      if (k != i) denominator += std::exp(dot(i, k) / tau);

    double inner = 0.0;
    for (std::size_t j = 0; j < rows; ++j) {
      if (j == i || group_ids[j] != group_ids[i]) continue;
      inner += std::log(std::exp(dot(i, j) / tau) / denominator);
    }
    total += -1.0 / (2.0 * n_v - 1.0) * inner;
  }
  return total;
}

/// Textbook NT-Xent: every row has exactly one partner with the same id.
inline double nt_xent_oracle(std::span<const double> z, std::size_t dim, std::span<const int> pair_ids, double tau) {
  const std::size_t rows = pair_ids.size();
  auto sim = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) s += z[a * dim + d] * z[b * dim + d];
    return s / tau;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t partner = rows;
    double denominator = 0.0;
    for (std::size_t k = 0; k < rows; ++k) {
      if (k == i) continue;
      denominator += std::exp(sim(i, k));
      if (pair_ids[k] == pair_ids[i]) partner = k;
    }
    total += -std::log(std::exp(sim(i, partner)) / denominator);
  }
  return total;
}

/// Supervised contrastive loss with the average taken outside the log:
/// sum_i -1/|P(i)| sum_{p in P(i)} log softmax_i(p).
inline double supcon_oracle(std::span<const double> z, std::size_t dim, std::span<const int> labels, double tau) {
  const std::size_t rows = labels.size();
  auto sim = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) s += z[a * dim + d] * z[b * dim + d];
    return s / tau;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double denominator = 0.0;
    for (std::size_t a = 0; a < rows; ++a)
      if (a != i) denominator += std::exp(sim(i, a));
    double acc = 0.0;
    std::size_t positives = 0;
    for (std::size_t p = 0; p < rows; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      acc += std::log(std::exp(sim(i, p)) / denominator);
      ++positives;
    }
    total += -acc / static_cast<double>(positives);
  }
  return total;
}

}  // namespace clmex::verify
