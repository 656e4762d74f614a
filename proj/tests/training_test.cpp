#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "clmex/synthetic.hpp"
#include "clmex/training.hpp"

using namespace clmex;
namespace fs = std::filesystem;

namespace {

Dataset small_dataset() {
  SynthConfig s;
  s.subjects = 3;
  s.sessions = 2;
  s.expressions = 2;
  s.views = {-45, 0, 45};
  s.image_size = 16;
  s.seed = 2;
  return generate_synthetic_dataset(s);
}

RunConfig tiny_run() {
  RunConfig c;
  c.model.encoder.conv_channels = {4, 6};
  c.model.encoder.embedding_dim = 8;
  c.model.projection.output_dim = 4;
  c.pretrain.epochs = 2;
  c.pretrain.lr = 1e-3;
  c.pretrain.sampler = {2, 3};
  c.downstream.probe_epochs = 2;
  c.downstream.finetune_epochs = 2;
  c.downstream.batch_size = 4;
  c.downstream.lr = 1e-3;
  c.run.seed = 4;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "clmex_training_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::vector<double>> values_of(const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> out;
  for (const auto& t : ts) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

std::string report_text(const TrainReport& r) {
  std::string s = summary_json(r).dump();
  for (const auto& e : r.epochs) s += to_json(e).dump();
  return s;
}

}  // namespace

TEST(Pretrain, SmokeRunRecordsContiguousFiniteEpochs) {
  const auto d = small_dataset();
  const auto cfg = tiny_run();
  const auto t = pretrain(cfg, d);
  ASSERT_EQ(t.report.epochs.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(t.report.epochs[i].epoch, i + 1);
    EXPECT_TRUE(std::isfinite(t.report.epochs[i].loss));
    EXPECT_TRUE(t.report.epochs[i].view_invariance.has_value());
  }
  // 6 groups at 2 per batch: 3 steps per epoch.
  EXPECT_EQ(t.report.total_steps, cfg.pretrain.epochs * batches_per_epoch(d, cfg.pretrain.sampler));
  EXPECT_EQ(t.report.total_steps, 6u);
  EXPECT_EQ(t.report.epochs.back().steps, 6u);
}

TEST(Pretrain, LabelsHaveNoInfluence) {
  const auto d = small_dataset();
  const auto cfg = tiny_run();
  const auto with = pretrain(cfg, d), without = pretrain(cfg, d.without_labels());
  EXPECT_EQ(values_of(with.model.encoder_tensors()), values_of(without.model.encoder_tensors()));
}

TEST(Pretrain, SupconRequiresLabels) {
  auto cfg = tiny_run();
  cfg.pretrain.loss = LossKind::supcon;
  EXPECT_THROW(pretrain(cfg, small_dataset().without_labels()), DatasetError);
}

TEST(Pretrain, IdenticalRunsGiveIdenticalReportsAndCheckpoints) {
  const auto d = small_dataset();
  const auto cfg = tiny_run();
  const auto a_dir = fresh_dir("det_a"), b_dir = fresh_dir("det_b");
  const auto a = pretrain(cfg, d, {a_dir, false, {}});
  const auto b = pretrain(cfg, d, {b_dir, false, {}});
  auto ra = a.report, rb = b.report;
  ra.checkpoint_path = rb.checkpoint_path = "";
  EXPECT_EQ(report_text(ra), report_text(rb));
  EXPECT_EQ(slurp(a_dir / "pretrain_last.ckpt"), slurp(b_dir / "pretrain_last.ckpt"));
  for (const auto& e : a.report.epochs) EXPECT_EQ(e.wall_time, 0.0);
}

TEST(Pretrain, ResumeAfterInterruptionMatchesUninterruptedRun) {
  const auto d = small_dataset();
  auto cfg = tiny_run();
  cfg.pretrain.epochs = 3;
  const auto full = pretrain(cfg, d);

  // The callback fires before the epoch is checkpointed, so epoch 2 is lost.
  const auto dir = fresh_dir("resume");
  struct Interrupt {};
  TrainOptions crash{dir, false, [](const EpochRecord& r) {
                       if (r.epoch == 2) throw Interrupt{};
                     }};
  EXPECT_THROW(pretrain(cfg, d, crash), Interrupt);
  const auto resumed = pretrain(cfg, d, {dir, true, {}});
  EXPECT_EQ(values_of(resumed.model.encoder_tensors()), values_of(full.model.encoder_tensors()));
  EXPECT_EQ(resumed.report.epochs, full.report.epochs);
}

TEST(Pretrain, DivergenceNamesTheLastGoodCheckpoint) {
  auto cfg = tiny_run();
  // Decoupled decay with lr * wd = 1e10 flips and grows every weight tenfold
  // per digit, so the parameters overflow after a few epochs.
  cfg.pretrain.epochs = 40;
  cfg.pretrain.lr = 1.0;
  cfg.pretrain.weight_decay = 1e10;
  const auto dir = fresh_dir("nan");
  try {
    pretrain(cfg, small_dataset(), {dir, false, {}});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("last good checkpoint: " + (dir / "pretrain_last.ckpt").string()), std::string::npos) << msg;
    EXPECT_NO_THROW(load_checkpoint(dir / "pretrain_last.ckpt"));
  }
}

TEST(Downstream, ProbePhaseLeavesEncoderByteIdentical) {
  const auto d = small_dataset();
  auto cfg = tiny_run();
  const auto pre = pretrain(cfg, d);
  const auto before = values_of(pre.model.encoder_tensors());
  cfg.downstream.finetune_epochs = 0;
  const auto tuned = downstream_train(cfg, pre.model, d);
  EXPECT_EQ(values_of(tuned.model.encoder_tensors()), values_of(pre.model.encoder_tensors()));
  EXPECT_NE(tuned.model.classifier.weight.values()[0], 0.0);

  cfg.downstream.finetune_epochs = 1;
  const auto finetuned = downstream_train(cfg, pre.model, d);
  EXPECT_NE(values_of(finetuned.model.encoder_tensors()), values_of(pre.model.encoder_tensors()));
  // The caller's model is never modified.
  EXPECT_EQ(values_of(pre.model.encoder_tensors()), before);
}

TEST(Downstream, BudgetMatchesTheBaseline) {
  const auto d = small_dataset();
  const auto cfg = tiny_run();
  const auto pre = pretrain(cfg, d);
  const auto tuned = downstream_train(cfg, pre.model, d);
  const auto base = supervised_baseline(cfg, d);
  EXPECT_EQ(tuned.report.total_steps, base.report.total_steps);
  const auto n_train = tuned.report.final_metrics.at("train_samples").get<std::size_t>();
  EXPECT_EQ(tuned.report.total_steps,
            (cfg.downstream.probe_epochs + cfg.downstream.finetune_epochs) *
                supervised_steps_per_epoch(n_train, cfg.downstream.batch_size));
  EXPECT_EQ(tuned.report.epochs.front().stage, "probe");
  EXPECT_EQ(tuned.report.epochs.back().stage, "finetune");
  EXPECT_TRUE(tuned.report.epochs.back().validation_loss.has_value());
}

TEST(Downstream, ReplacesAStaleHeadAndRejectsUnlabeledData) {
  const auto d = small_dataset();
  auto cfg = tiny_run();
  auto pre = pretrain(cfg, d);
  Rng rng(1);
  pre.model.attach_classifier(5, rng);
  const auto tuned = downstream_train(cfg, pre.model, d);
  EXPECT_EQ(tuned.model.classifier.num_classes(), 2u);
  auto unlabeled = d.without_labels();
  EXPECT_THROW(downstream_train(cfg, pre.model, unlabeled), DatasetError);
}

TEST(Downstream, ResumeAfterInterruptionMatchesUninterruptedRun) {
  const auto d = small_dataset();
  const auto cfg = tiny_run();
  const auto pre = pretrain(cfg, d);
  const auto full = downstream_train(cfg, pre.model, d);
  const auto dir = fresh_dir("resume_downstream");
  struct Interrupt {};
  TrainOptions stop{dir, false, [](const EpochRecord& r) {
                      if (r.epoch == 3) throw Interrupt{};
                    }};
  EXPECT_THROW(downstream_train(cfg, pre.model, d, stop), Interrupt);
  const auto resumed = downstream_train(cfg, pre.model, d, {dir, true, {}});
  EXPECT_EQ(values_of(resumed.model.encoder_tensors()), values_of(full.model.encoder_tensors()));
  EXPECT_EQ(resumed.report.epochs, full.report.epochs);
  EXPECT_TRUE(fs::exists(dir / "downstream_best.ckpt"));
}

TEST(Baseline, SmokeRunReportsFiniteLoss) {
  auto cfg = tiny_run();
  cfg.baseline.epochs = 1;
  const auto base = supervised_baseline(cfg, small_dataset());
  ASSERT_EQ(base.report.epochs.size(), 1u);
  EXPECT_TRUE(std::isfinite(base.report.epochs[0].loss));
  EXPECT_EQ(base.report.epochs[0].stage, "baseline");
}

TEST(Diagnostic, ClosedFormCases) {
  const std::vector<int> ids{0, 0, 1, 1, 2, 2};
  const auto same = Tensor::from({6, 2}, std::vector<double>(12, 1.0));
  EXPECT_NEAR(view_invariance_from_embeddings(same, ids), 0.0, 1e-12);

  std::vector<double> ortho(6 * 3, 0.0);
  for (std::size_t i = 0; i < 6; ++i) ortho[i * 3 + static_cast<std::size_t>(ids[i])] = 1.0 + static_cast<double>(i);
  EXPECT_NEAR(view_invariance_from_embeddings(Tensor::from({6, 3}, ortho), ids), 1.0, 1e-12);
}

TEST(Diagnostic, UntrainedEncoderIsNearZero) {
  const auto d = small_dataset();
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    const auto m = make_model(model_config_for(tiny_run(), d), rng);
    EXPECT_NEAR(view_invariance_diagnostic(m, d), 0.0, 0.15) << "seed " << seed;
  }
}

TEST(Report, WritesJsonLinesAndSummary) {
  const auto d = small_dataset();
  auto cfg = tiny_run();
  cfg.pretrain.epochs = 1;
  const auto t = pretrain(cfg, d);
  const auto dir = fresh_dir("report");
  write_report(dir, "pretrain", t.report);
  std::ifstream lines(dir / "pretrain.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto rec = epoch_record_from_json(nlohmann::json::parse(line));
    EXPECT_EQ(rec, t.report.epochs[n]);
    ++n;
  }
  EXPECT_EQ(n, 1u);
  std::ifstream summary(dir / "pretrain_summary.json");
  const auto j = nlohmann::json::parse(summary);
  EXPECT_EQ(j.at("stage"), "pretrain");
  EXPECT_EQ(j.at("config").at("run").at("seed"), "4");
}
