#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "clmex/checkpoint.hpp"
#include "clmex/losses.hpp"

using namespace clmex;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig cfg;
  cfg.encoder.conv_channels = {3};
  cfg.encoder.embedding_dim = 4;
  cfg.encoder.image_size = 16;
  cfg.projection.output_dim = 2;
  cfg.num_classes = 3;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "clmex_checkpoint_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresEveryValueExactly) {
  Rng rng(1);
  const auto m = make_model(tiny(), rng);
  auto c = snapshot(m);
  c.rng_state = rng_state(rng);
  c.meta = {{"epoch", 3}};
  save_checkpoint(scratch("a.ckpt"), c);
  const auto back = load_checkpoint(scratch("a.ckpt"));
  EXPECT_EQ(back.architecture, m.config);
  EXPECT_EQ(back.tensors, c.tensors);
  EXPECT_EQ(back.rng_state, c.rng_state);
  EXPECT_EQ(back.meta.at("epoch"), 3);
  EXPECT_FALSE(back.optimizer.has_value());

  const auto restored = restore_model(back);
  const auto a = m.parameters(), b = restored.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(std::ranges::equal(a[i].tensor.values(), b[i].tensor.values()));
  }
}

TEST(Checkpoint, SavingTheSameStateTwiceGivesIdenticalBytes) {
  Rng rng(2);
  const auto c = snapshot(make_model(tiny(), rng));
  save_checkpoint(scratch("b1.ckpt"), c);
  save_checkpoint(scratch("b2.ckpt"), c);
  EXPECT_EQ(slurp(scratch("b1.ckpt")), slurp(scratch("b2.ckpt")));
  EXPECT_EQ(slurp(scratch("b1.ckpt")).substr(0, 8), "CLMXCKPT");
  EXPECT_FALSE(fs::exists(scratch("b1.ckpt.tmp")));
}

TEST(Checkpoint, OptimizerStateSurvivesAndResumesIdentically) {
  Rng rng(3);
  auto m = make_model(tiny(), rng);
  std::vector<Tensor> params;
  std::vector<std::string> names;
  for (const auto& p : m.parameters()) {
    params.push_back(p.tensor);
    names.push_back(p.name);
  }
  Tensor x = Tensor::zeros({2, 3, 16, 16});
  for (auto& v : x.mutable_values()) v = uniform01(rng);
  const std::vector<int> labels{0, 2};
  Adam opt(params, {});
  const auto step = [&](Model& model, Adam& o) {
    o.zero_grad();
    cross_entropy(model.classify(model.encode(x)), labels).backward();
    o.step(1e-2);
  };
  step(m, opt);
  auto c = snapshot(m);
  store_optimizer(c, names, opt.state());
  save_checkpoint(scratch("c.ckpt"), c);

  const auto back = load_checkpoint(scratch("c.ckpt"));
  auto resumed = restore_model(back);
  std::vector<Tensor> rparams;
  for (const auto& p : resumed.parameters()) rparams.push_back(p.tensor);
  Adam ropt(rparams, {});
  restore_optimizer(ropt, names, back);
  EXPECT_EQ(ropt.state().step_count, 1u);

  step(m, opt);
  step(resumed, ropt);
  const auto a = m.parameters(), b = resumed.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(std::ranges::equal(a[i].tensor.values(), b[i].tensor.values()));
}

TEST(Checkpoint, ErrorsAreReported) {
  EXPECT_THROW(load_checkpoint(scratch("missing.ckpt")), CheckpointError);
  std::ofstream(scratch("junk.ckpt")) << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint(scratch("junk.ckpt")), CheckpointError);

  Rng rng(4);
  const auto c = snapshot(make_model(tiny(), rng));
  save_checkpoint(scratch("d.ckpt"), c);
  const auto bytes = slurp(scratch("d.ckpt"));
  std::ofstream(scratch("trunc.ckpt"), std::ios::binary) << bytes.substr(0, bytes.size() - 8);
  EXPECT_THROW(load_checkpoint(scratch("trunc.ckpt")), CheckpointError);

  auto other = tiny();
  other.encoder.embedding_dim = 5;
  auto m = make_model(other, rng);
  EXPECT_THROW(load_parameters(m, c), CheckpointError);

  auto partial = c;
  partial.tensors.pop_back();
  auto m2 = make_model(tiny(), rng);
  EXPECT_THROW(load_parameters(m2, partial), CheckpointError);
  Adam opt({m2.encoder.fc_bias}, {});
  EXPECT_THROW(restore_optimizer(opt, {"encoder.fc.bias"}, c), CheckpointError);
}
