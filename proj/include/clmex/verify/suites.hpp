#pragma once

// Property suites shared by the `verify` command and the acceptance run.
// Each suite returns counts plus the worst error it saw, so callers decide
// how to present them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "clmex/losses.hpp"
#include "clmex/ops.hpp"
#include "clmex/verify/gradcheck.hpp"
#include "clmex/verify/oracle.hpp"

namespace clmex::verify {

struct SuiteReport {
  SuiteReport(std::string suite, double tol) : name(std::move(suite)), tolerance(tol) {}

  std::string name;
  double tolerance = 0.0;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double worst_error = 0.0;
  double seconds = 0.0;
  std::vector<std::string> failed_cases;

  bool passed() const { return cases > 0 && failures == 0; }

  void record(const std::string& label, double error) {
    ++cases;
    worst_error = std::max(worst_error, error);
    if (!(error <= tolerance)) {
      ++failures;
      failed_cases.push_back(label);
    }
  }
};

namespace detail {

using Rng64 = std::mt19937_64;

inline Tensor random_tensor(Shape shape, Rng64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

inline Tensor random_unit_rows(std::size_t rows, std::size_t dim, Rng64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(rows * dim);
  for (auto& x : v) x = n(rng);
  NoGradGuard guard;
  return l2_normalize_rows(Tensor::from({rows, dim}, std::move(v))).detach();
}

// Contracts a tensor to a scalar with fixed pseudo-random weights so every
// output element influences the checked gradient differently.
inline Tensor probe(const Tensor& t, std::uint64_t seed = 99) {
  Rng64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(t.size());
  for (auto& x : w) x = dist(rng);
  return weighted_sum(t, std::move(w));
}

// Two consecutive rows per original, the layout the sampler produces.
inline std::vector<int> paired(const std::vector<int>& per_original) {
  std::vector<int> ids;
  for (int g : per_original) ids.insert(ids.end(), {g, g});
  return ids;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

/// Analytic against central-difference gradients for every differentiable op
/// and for the full multi-view loss graph on 8 rows of width 4 at tau 0.1.
inline SuiteReport gradient_suite(std::uint64_t seed = 11, double tolerance = 1e-4) {
  using detail::probe;
  using V = std::vector<Tensor>;
  const auto start = std::chrono::steady_clock::now();
  detail::Rng64 rng(seed);
  auto rt = [&](Shape s, double lo = -1.0, double hi = 1.0) { return detail::random_tensor(std::move(s), rng, lo, hi); };
  SuiteReport rep{"gradients", tolerance};
  auto check = [&](const std::string& label, const std::function<Tensor(const V&)>& fn, V inputs) {
    rep.record(label, check_gradients(fn, std::move(inputs)).max_relative_error);
  };

  check("add", [](const V& in) { return probe(add(in[0], in[1])); }, {rt({2, 3}), rt({2, 3})});
  check("sub", [](const V& in) { return probe(sub(in[0], in[1])); }, {rt({2, 3}), rt({2, 3})});
  check("affine", [](const V& in) { return probe(affine(in[0], -1.7, 0.3)); }, {rt({2, 3})});
  check("matmul", [](const V& in) { return probe(matmul(in[0], in[1])); }, {rt({3, 4}), rt({4, 2})});
  check("transpose", [](const V& in) { return probe(transpose(in[0])); }, {rt({3, 2})});
  check("relu", [](const V& in) { return probe(relu(in[0])); }, {rt({2, 5})});
  check("conv2d", [](const V& in) { return probe(conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 1})); },
        {rt({2, 2, 5, 5}), rt({3, 2, 3, 3}), rt({3})});
  check("conv2d (no bias, stride 1)", [](const V& in) { return probe(conv2d(in[0], in[1])); },
        {rt({1, 2, 4, 4}), rt({2, 2, 3, 3})});
  check("global_average_pool", [](const V& in) { return probe(global_average_pool(in[0])); }, {rt({2, 3, 2, 2})});
  check("dense", [](const V& in) { return probe(dense(in[0], in[1], in[2])); }, {rt({3, 4}), rt({2, 4}), rt({2})});
  check("standardize_columns",
        [](const V& in) { return probe(standardize_columns(in[0], {0.5, -1.0, 2.0}, {2.0, 0.25, 1.5})); },
        {rt({4, 3})});
  check("l2_normalize_rows", [](const V& in) { return probe(l2_normalize_rows(in[0])); }, {rt({3, 4})});
  check("log_sum_exp_rows", [](const V& in) { return probe(log_sum_exp_rows(in[0])); }, {rt({3, 4}, -3, 3)});
  check("log_sum_exp_rows (diagonal excluded)", [](const V& in) { return probe(log_sum_exp_rows(in[0], true)); },
        {rt({4, 4}, -3, 3)});
  check("sum", [](const V& in) { return sum(in[0]); }, {rt({2, 3})});
  check("scalar_mean", [](const V& in) { return scalar_mean(in[0]); }, {rt({3, 3})});
  check("weighted_sum", [](const V& in) { return weighted_sum(in[0], {0.5, -2.0, 1.0, 3.0}); }, {rt({2, 2})});
  const std::vector<int> labels{0, 2, 1};
  check("cross_entropy", [&](const V& in) { return cross_entropy(in[0], labels); }, {rt({3, 3}, -2, 2)});

  // Full loss graph: raw rows -> normalisation -> multi-view loss.
  const auto ids = detail::paired({0, 0, 1, 2});
  for (auto convention : {PositiveCount::originals, PositiveCount::augmented}) {
    check(std::string("clmex_loss graph, ") + (convention == PositiveCount::originals ? "originals" : "augmented"),
          [&](const V& in) {
            return clmex_loss(l2_normalize_rows(in[0]), ids, {.temperature = 0.1, .convention = convention});
          },
          {rt({8, 4})});
  }
  const auto pairs = detail::paired({0, 1, 2, 3});
  check("simclr_loss graph", [&](const V& in) { return simclr_loss(l2_normalize_rows(in[0]), pairs); }, {rt({8, 4})});
  check("supcon_loss graph", [&](const V& in) { return supcon_loss(l2_normalize_rows(in[0]), ids); }, {rt({8, 4})});
  rep.seconds = detail::seconds_since(start);
  return rep;
}

/// The three contrastive losses against the literal loop transcription on
/// randomised batches of at most 32 rows.
inline SuiteReport loss_oracle_suite(std::size_t batches = 100, std::uint64_t seed = 12, double tolerance = 1e-9) {
  const auto start = std::chrono::steady_clock::now();
  detail::Rng64 rng(seed);
  SuiteReport rep{"loss oracle", tolerance};
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t originals = 1 + rng() % 16;
    const std::size_t dim = 2 + rng() % 7;
    const double tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const auto z = detail::random_unit_rows(2 * originals, dim, rng);
    const std::string tag = "batch " + std::to_string(b) + " (2N=" + std::to_string(2 * originals) + ")";

    std::vector<int> groups(originals), singles(originals);
    for (std::size_t i = 0; i < originals; ++i) {
      groups[i] = static_cast<int>(rng() % (1 + originals / 2));
      singles[i] = static_cast<int>(i);
    }
    const auto view_ids = detail::paired(groups);
    for (auto convention : {PositiveCount::originals, PositiveCount::augmented}) {
      const ContrastiveOptions opt{.temperature = tau, .convention = convention};
      rep.record("clmex " + tag, std::abs(clmex_loss(z, view_ids, opt).item() -
                                          brute_force_contrastive_oracle(z.values(), dim, view_ids, tau, convention)));
    }
    const auto pair_ids = detail::paired(singles);
    rep.record("simclr " + tag, std::abs(simclr_loss(z, pair_ids, {.temperature = tau}).item() -
                                         brute_force_contrastive_oracle(z.values(), dim, pair_ids, tau)));

    // Labels are drawn per row; a class seen once is merged into class 0 so
    // every anchor keeps a positive.
    std::vector<int> labels(2 * originals);
    for (auto& l : labels) l = static_cast<int>(rng() % 4);
    for (auto& l : labels) {
      if (std::count(labels.begin(), labels.end(), l) == 1) l = 0;
    }
    if (std::count(labels.begin(), labels.end(), 0) == 1) labels.assign(labels.size(), 0);
    rep.record("supcon " + tag, std::abs(supcon_loss(z, labels, {.temperature = tau}).item() -
                                         brute_force_contrastive_oracle(z.values(), dim, labels, tau)));
  }
  rep.seconds = detail::seconds_since(start);
  return rep;
}

/// Singleton view groups reduce the multi-view loss to NT-Xent, and labels
/// in place of view ids reduce it to the supervised contrastive loss. Both
/// are checked against textbook forms of the target losses.
inline SuiteReport reduction_identity_suite(std::size_t batches = 50, std::uint64_t seed = 13,
                                            double tolerance = 1e-9) {
  const auto start = std::chrono::steady_clock::now();
  detail::Rng64 rng(seed);
  SuiteReport rep{"reduction identities", tolerance};
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t originals = 1 + rng() % 16;
    const std::size_t dim = 2 + rng() % 7;
    const double tau = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const auto z = detail::random_unit_rows(2 * originals, dim, rng);
    const std::string tag = " batch " + std::to_string(b);
    const ContrastiveOptions opt{.temperature = tau};

    std::vector<int> singles(originals), labels(originals);
    for (std::size_t i = 0; i < originals; ++i) {
      singles[i] = static_cast<int>(i);
      labels[i] = static_cast<int>(rng() % 3);
    }
    const auto pair_ids = detail::paired(singles);
    const double clmex_single = clmex_loss(z, pair_ids, opt).item();
    rep.record("clmex=simclr" + tag, std::abs(clmex_single - simclr_loss(z, pair_ids, opt).item()));
    rep.record("clmex=nt-xent" + tag, std::abs(clmex_single - nt_xent_oracle(z.values(), dim, pair_ids, tau)));

    const auto label_ids = detail::paired(labels);
    const double clmex_labels = clmex_loss(z, label_ids, opt).item();
    rep.record("clmex=supcon" + tag, std::abs(clmex_labels - supcon_loss(z, label_ids, opt).item()));
    rep.record("clmex=supcon textbook" + tag,
               std::abs(clmex_labels - supcon_oracle(z.values(), dim, label_ids, tau)));
  }
  rep.seconds = detail::seconds_since(start);
  return rep;
}

/// A single positive pair has loss 0; fully collapsed rows give
/// 2N log(2N - 1) whatever the grouping.
inline SuiteReport closed_form_suite(std::uint64_t seed = 14, double tolerance = 1e-9) {
  const auto start = std::chrono::steady_clock::now();
  detail::Rng64 rng(seed);
  SuiteReport rep{"closed forms", tolerance};
  for (int trial = 0; trial < 10; ++trial) {
    const auto z = detail::random_unit_rows(2, 3 + static_cast<std::size_t>(trial % 4), rng);
    const std::vector<int> ids{trial, trial};
    rep.record("single pair " + std::to_string(trial), std::abs(clmex_loss(z, ids).item()));
  }
  for (std::size_t originals : {1u, 2u, 3u, 5u, 8u, 16u}) {
    const std::size_t rows = 2 * originals;
    std::vector<double> v(rows * 4, 0.0);
    for (std::size_t i = 0; i < rows; ++i) v[i * 4 + 1] = 1.0;
    const auto z = Tensor::from({rows, 4}, v);
    const double expected = static_cast<double>(rows) * std::log(static_cast<double>(rows) - 1.0);
    for (std::size_t groups : {std::size_t{1}, (originals + 1) / 2, originals}) {
      std::vector<int> per(originals);
      for (std::size_t i = 0; i < originals; ++i) per[i] = static_cast<int>(i % groups);
      for (double tau : {0.1, 0.5}) {
        rep.record("collapsed 2N=" + std::to_string(rows) + " groups=" + std::to_string(groups),
                   std::abs(clmex_loss(z, detail::paired(per), {.temperature = tau}).item() - expected));
      }
    }
  }
  rep.seconds = detail::seconds_since(start);
  return rep;
}

inline std::vector<SuiteReport> run_all_suites() {
  return {gradient_suite(), loss_oracle_suite(), reduction_identity_suite(), closed_form_suite()};
}

}  // namespace clmex::verify
