#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "clmex/ops.hpp"
#include "clmex/verify/gradcheck.hpp"

using namespace clmex;

namespace {

// Values bounded away from zero so relu kinks stay outside the FD stencil.
Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    do {
      x = dist(rng);
    } while (std::abs(x) < 0.05);
  }
  return Tensor::from(std::move(shape), std::move(v));
}

// Reduces any tensor to a scalar through fixed random weights so every output
// element contributes to the checked gradient.
Tensor probe(const Tensor& t, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(t.size());
  for (auto& x : w) x = dist(rng);
  return weighted_sum(t, std::move(w));
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST(Tensor, ProductOfShapeMatchesValueCount) {
  EXPECT_THROW(Tensor::from({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_EQ(Tensor::zeros({2, 3, 4}).size(), 24u);
  EXPECT_EQ(Tensor::scalar(3.0).size(), 1u);
}

TEST(Ops, ReluDefinition) {
  auto y = relu(Tensor::from({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Ops, L2NormalizeThreeFourFive) {
  auto y = l2_normalize_rows(Tensor::from({1, 2}, {3, 4}));
  EXPECT_DOUBLE_EQ(y[0], 0.6);
  EXPECT_DOUBLE_EQ(y[1], 0.8);
}

TEST(Ops, L2NormalizeZeroRow) {
  auto y = l2_normalize_rows(Tensor::from({1, 2}, {0, 0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_THROW(l2_normalize_rows(Tensor::from({1, 2}, {0, 0}), 0.0), DomainError);
}

TEST(Ops, L2NormalizeRowsAreUnit) {
  std::mt19937_64 rng(3);
  auto y = l2_normalize_rows(random_tensor({7, 5}, rng, -10, 10));
  for (std::size_t r = 0; r < 7; ++r) {
    double sq = 0;
    for (std::size_t j = 0; j < 5; ++j) sq += y[r * 5 + j] * y[r * 5 + j];
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-9);
  }
}

TEST(Ops, Conv2dSumOfOnes) {
  auto input = Tensor::from({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  auto kernel = Tensor::from({1, 1, 2, 2}, std::vector<double>(4, 1.0));
  auto y = conv2d(input, kernel, {.stride = 1, .padding = 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 4.0);
}

TEST(Ops, Conv2dStridePaddingShape) {
  auto y = conv2d(Tensor::zeros({2, 3, 32, 32}), Tensor::zeros({16, 3, 3, 3}), {.stride = 2, .padding = 1});
  EXPECT_EQ(y.shape(), (Shape{2, 16, 16, 16}));
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.op(), "matmul");
    EXPECT_EQ(e.lhs(), (Shape{2, 3}));
    EXPECT_EQ(e.rhs(), (Shape{4, 2}));
  }
  EXPECT_THROW(dense(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}), Tensor::zeros({4})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3})), ShapeError);
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST(Ops, LogSumExpStableForLargeInputs) {
  auto y = log_sum_exp_rows(Tensor::from({1, 2}, {1000.0, 1000.0}));
  EXPECT_NEAR(y[0], 1000.0 + std::log(2.0), 1e-12);
  auto d = log_sum_exp_rows(Tensor::from({2, 2}, {5.0, 1.0, 2.0, 7.0}), true);
  EXPECT_DOUBLE_EQ(d[0], 1.0);
  EXPECT_DOUBLE_EQ(d[1], 2.0);
  EXPECT_THROW(log_sum_exp_rows(Tensor::from({1, 1}, {1.0}), true), DomainError);
}

TEST(Backward, MeanOfReluPiecewiseLinear) {
  auto w = Tensor::from({2}, {1.0, -1.0}, true);
  scalar_mean(relu(w)).backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.5);
  EXPECT_DOUBLE_EQ(w.grad()[1], 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  auto w = Tensor::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(relu(w).backward(), GraphError);
}

TEST(Backward, RejectsDetachedGraph) {
  auto w = Tensor::from({2}, {1.0, 2.0}, false);
  EXPECT_THROW(sum(w).backward(), GraphError);
  auto p = Tensor::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(sum(p.detach()).backward(), GraphError);
}

TEST(Backward, SecondPassWithoutForwardRejected) {
  auto w = Tensor::from({2}, {1.0, 2.0}, true);
  auto loss = sum(relu(w));
  loss.backward();
  EXPECT_THROW(loss.backward(), GraphError);
}

TEST(Backward, RetainedGraphAccumulates) {
  auto w = Tensor::from({2}, {1.0, 2.0}, true);
  auto loss = sum(scale(w, 3.0));
  loss.backward(true);
  loss.backward();
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

TEST(Backward, NoGradGuardBuildsNoGraph) {
  auto w = Tensor::from({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  auto y = sum(w);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, LinearityOfGradient) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({3, 4}, rng);
  x.set_requires_grad(true);
  auto w = random_tensor({4, 2}, rng);
  auto f = [&] { return probe(relu(matmul(x, w)), 1); };
  auto g_graph = [&] { return probe(l2_normalize_rows(x), 2); };

  f().backward();
  std::vector<double> gf(x.grad().begin(), x.grad().end());
  x.zero_grad();
  g_graph().backward();
  std::vector<double> gg(x.grad().begin(), x.grad().end());
  x.zero_grad();

  const double a = 2.5, b = -0.75;
  add(scale(f(), a), scale(g_graph(), b)).backward();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x.grad()[i], a * gf[i] + b * gg[i], 1e-12);
}

class GradCheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradCheck, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(GetParam());
  using verify::check_gradients;
  using V = std::vector<Tensor>;

  auto r = check_gradients([](const V& in) { return probe(matmul(in[0], in[1])); },
                           {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "matmul";

  r = check_gradients([](const V& in) { return probe(transpose(in[0])); }, {random_tensor({3, 2}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "transpose";

  r = check_gradients([](const V& in) { return probe(relu(in[0])); }, {random_tensor({2, 5}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "relu";

  r = check_gradients(
      [](const V& in) { return probe(conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 1})); },
      {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "conv2d";

  r = check_gradients([](const V& in) { return probe(global_average_pool(in[0])); },
                      {random_tensor({2, 3, 2, 2}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "global_average_pool";

  r = check_gradients([](const V& in) { return probe(dense(in[0], in[1], in[2])); },
                      {random_tensor({3, 4}, rng), random_tensor({2, 4}, rng), random_tensor({2}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "dense";

  r = check_gradients([](const V& in) { return probe(l2_normalize_rows(in[0])); }, {random_tensor({3, 4}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "l2_normalize_rows";

  r = check_gradients([](const V& in) { return probe(log_sum_exp_rows(in[0])); }, {random_tensor({3, 4}, rng, -3, 3)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "log_sum_exp_rows";

  r = check_gradients([](const V& in) { return probe(log_sum_exp_rows(in[0], true)); },
                      {random_tensor({4, 4}, rng, -3, 3)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "log_sum_exp_rows (diagonal excluded)";

  r = check_gradients([](const V& in) { return scalar_mean(in[0]); }, {random_tensor({3, 3}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "scalar_mean";

  r = check_gradients([](const V& in) { return probe(add(in[0], scale(in[1], -1.7))); },
                      {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "add/scale";

  r = check_gradients([](const V& in) { return probe(affine(in[0], 2.0, -1.0)); }, {random_tensor({2, 3}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "affine";

  r = check_gradients(
      [](const V& in) { return probe(standardize_columns(in[0], {0.5, -1.0, 2.0}, {2.0, 0.25, 1.5})); },
      {random_tensor({4, 3}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol) << "standardize_columns";
}

TEST_P(GradCheck, ComposedGraph) {
  std::mt19937_64 rng(GetParam() + 1000);
  using V = std::vector<Tensor>;
  auto r = verify::check_gradients(
      [](const V& in) {
        auto h = relu(conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 1}));
        auto r = dense(global_average_pool(h), in[3], in[4]);
        return scalar_mean(log_sum_exp_rows(matmul(l2_normalize_rows(r), transpose(l2_normalize_rows(r)))));
      },
      {random_tensor({2, 3, 6, 6}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng),
       random_tensor({3, 4}, rng), random_tensor({3}, rng)});
  EXPECT_LE(r.max_relative_error, kGradTol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradCheck, ::testing::Values(1u, 2u, 3u, 4u, 5u));

TEST(GradCheck, NormalizeAtAxisAlignedRow) {
  auto r = verify::check_gradients(
      [](const std::vector<Tensor>& in) { return probe(l2_normalize_rows(in[0]), 5); },
      {Tensor::from({1, 2}, {1.0, 0.0})});
  EXPECT_LE(r.max_relative_error, kGradTol);
}
