#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "clmex/config.hpp"

using namespace clmex;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsCarryTheReferenceHyperparameters) {
  const RunConfig c;
  EXPECT_EQ(c.pretrain.lr, 1e-4);
  EXPECT_EQ(c.pretrain.weight_decay, 1e-4);
  EXPECT_EQ(c.pretrain.contrastive.temperature, 0.1);
  EXPECT_EQ(c.downstream.probe_epochs, 10u);
  EXPECT_EQ(c.downstream.finetune_epochs, 50u);
  EXPECT_EQ(c.downstream.plateau_factor, 0.5);
  EXPECT_EQ(c.downstream.plateau_patience, 3);
  EXPECT_EQ(c.eval.fractions, (std::vector<double>{1.0, 0.75, 0.5, 0.25, 0.1, 0.05}));
  EXPECT_EQ(c.baseline_epochs(), 60u);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, ParsesSectionsAndLists) {
  const auto c = parse(
      "[data]\nsubjects = 4\nviews = -60, 0, 60\n"
      "[model]\nconv_channels = 8,16\n"
      "[pretrain]\nloss = simclr\nlr = 0.003\n"
      "[downstream]\naugment = false\n"
      "[run]\nseed = 11\n");
  EXPECT_EQ(c.data.synth.subjects, 4u);
  EXPECT_EQ(c.data.synth.views, (std::vector<int>{-60, 0, 60}));
  EXPECT_EQ(c.model.encoder.conv_channels, (std::vector<std::size_t>{8, 16}));
  EXPECT_EQ(c.pretrain.loss, LossKind::simclr);
  EXPECT_EQ(c.pretrain.lr, 0.003);
  EXPECT_FALSE(c.downstream.augment);
  EXPECT_EQ(c.run.seed, 11u);
  EXPECT_EQ(c.data.synth.sessions, 4u);  // untouched keys keep defaults
}

TEST(Config, EchoRoundTripsExactly) {
  auto c = parse("[pretrain]\nlr = 0.00123456789012345\n[augment]\nhue = 0.1\n[eval]\nfractions = 1, 0.3\n");
  const auto text = to_ini(c);
  const auto again = parse(text);
  EXPECT_EQ(to_ini(again), text);
  EXPECT_EQ(again.pretrain.lr, 0.00123456789012345);
  EXPECT_EQ(config_to_json(again), config_to_json(c));
  EXPECT_EQ(config_to_json(c)["pretrain"]["lr"], "0.00123456789012345");
}

TEST(Config, UnknownKeysAndBadValuesNameTheKey) {
  EXPECT_NE(error_of("[pretrain]\nlearning_rate = 1\n").find("pretrain.learning_rate"), std::string::npos);
  EXPECT_NE(error_of("[nosuch]\nx = 1\n").find("nosuch.x"), std::string::npos);
  EXPECT_NE(error_of("[pretrain]\nepochs = ten\n").find("pretrain.epochs"), std::string::npos);
  EXPECT_NE(error_of("[pretrain]\nepochs = -3\n").find("pretrain.epochs"), std::string::npos);
  EXPECT_NE(error_of("[pretrain]\nloss = triplet\n").find("clmex"), std::string::npos);
  EXPECT_NE(error_of("[downstream]\nlabel_fraction = 0\n").find("downstream.label_fraction"), std::string::npos);
  EXPECT_NE(error_of("[pretrain]\ntemperature = 0\n").find("pretrain.temperature"), std::string::npos);
  EXPECT_NE(error_of("[model]\nembedding_dim = 8\nprojection_dim = 16\n").find("model"), std::string::npos);
  EXPECT_NE(error_of("[data]\nsource = manifest\n").find("data.manifest"), std::string::npos);
}

TEST(Config, MissingFileIsAConfigErrorWithThePath) {
  try {
    load_config("/nonexistent/run.ini");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/run.ini"), std::string::npos);
  }
}

TEST(Config, LoadsFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "clmex_config_test.ini";
  std::ofstream(path) << "# comment\n[run]\nseed = 3\n";
  EXPECT_EQ(load_config(path).run.seed, 3u);
}
