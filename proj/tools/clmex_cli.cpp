// clmex: command-line driver for data generation, training, evaluation and
// the two studies. Logs go to stderr; every artifact lands in --out.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "clmex/eval.hpp"
#include "clmex/synthetic.hpp"
#include "clmex/training.hpp"
#include "clmex/verify/suites.hpp"

namespace fs = std::filesystem;
using namespace clmex;

namespace {

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kUsage = 2,
  kConfig = 3,
  kMissingInput = 4,
  kVerifyFailed = 5,
  kNumerical = 6,
};

class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void log(const std::string& msg) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::cerr << '[' << std::put_time(&tm, "%H:%M:%S") << "] " << msg << '\n';
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> jobs;
  std::string data;  // manifest overriding the config's data source
};

void add_common(CLI::App& cmd, Common& c, bool with_data = true) {
  cmd.add_option("-c,--config", c.config, "INI config file (built-in defaults when omitted)");
  cmd.add_option("-s,--seed", c.seed, "Run seed, overrides run.seed");
  cmd.add_option("-o,--out", c.out, "Output directory (default: $CLMEX_OUT_ROOT/<command>, else runs/<command>)");
  cmd.add_option("-j,--jobs", c.jobs, "Parallel workers for the studies, overrides run.jobs")->check(CLI::PositiveNumber);
  if (with_data) cmd.add_option("--data", c.data, "Dataset manifest, overrides the config's data section");
}

fs::path require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw MissingInput(what + " path is empty");
  if (!fs::is_regular_file(path)) throw MissingInput(what + " not found: " + path);
  return path;
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.run.seed = *c.seed;
  if (c.jobs) cfg.run.jobs = *c.jobs;
  if (!c.data.empty()) {
    cfg.data.source = "manifest";
    cfg.data.manifest = c.data;
  }
  validate(cfg);
  return cfg;
}

fs::path resolve_out(const Common& c, const std::string& command) {
  if (!c.out.empty()) return c.out;
  const char* root = std::getenv("CLMEX_OUT_ROOT");
  return fs::path(root && *root ? root : "runs") / command;
}

// Config echo and version go in before any work starts.
void prepare_out(const fs::path& out, const RunConfig& cfg, const std::string& command) {
  fs::create_directories(out);
  std::ofstream(out / "config.ini") << "; " << command << " run\n" << to_ini(cfg);
  std::ofstream(out / "VERSION") << kVersion << '\n';
  log(command + ": writing to " + out.string());
}

Dataset load_data(const RunConfig& cfg) {
  if (cfg.data.source == "manifest") {
    require_file(cfg.data.manifest, "manifest");
    return load_dataset(fs::path(cfg.data.manifest));
  }
  return generate_synthetic_dataset(cfg.data.synth);
}

SubjectSplit split_data(const RunConfig& cfg) {
  const auto d = load_data(cfg);
  auto split = subject_split(d, cfg.data.test_fraction, cfg.run.seed);
  log("data: " + std::to_string(split.train.size()) + " train / " + std::to_string(split.test.size()) +
      " test images, " + std::to_string(split.test_subjects.size()) + " held-out subjects");
  return split;
}

Model load_model(const std::string& path) { return restore_model(load_checkpoint(require_file(path, "checkpoint"))); }

void write_json(const fs::path& path, const nlohmann::json& j) { std::ofstream(path) << j.dump(2) << '\n'; }

TrainOptions options_for(const fs::path& out, bool resume) {
  return {out, resume, [](const EpochRecord& r) {
            std::ostringstream os;
            os << r.stage << " epoch " << r.epoch << " loss " << r.loss << " lr " << r.lr;
            if (r.validation_loss) os << " val " << *r.validation_loss;
            if (r.view_invariance) os << " view-invariance " << *r.view_invariance;
            log(os.str());
          }};
}

Dataset labeled_subset(const Dataset& train, const RunConfig& cfg) {
  return train.subset(label_subset_indices(train, cfg.downstream.label_fraction, cfg.run.seed));
}

void write_evaluation(const fs::path& out, const Model& model, const Dataset& test) {
  const auto r = evaluate(model, test);
  write_json(out / "evaluation.json", to_json(r));
  write_confusion_csv(out / "confusion.csv", r, test.expression_vocabulary);
  log("test accuracy " + std::to_string(r.overall_accuracy) + " on " + std::to_string(r.n_samples) + " images");
}

// ---------------------------------------------------------------- commands

int run_gen_synth(const SynthConfig& s, const fs::path& out) {
  RunConfig cfg;
  cfg.data.synth = s;
  prepare_out(out, cfg, "gen-synth");
  const auto d = generate_synthetic_dataset(s);
  const auto m = write_dataset(d, out);
  log("wrote " + std::to_string(m.records.size()) + " records to " + (out / "manifest.csv").string());
  return kOk;
}

int run_pretrain(const RunConfig& cfg, const fs::path& out, bool resume) {
  const auto split = split_data(cfg);
  const auto t = pretrain(cfg, split.train, options_for(out, resume));
  save_checkpoint(out / "model.ckpt", snapshot(t.model));
  write_report(out, "pretrain", t.report);
  log("view invariance " + std::to_string(t.report.final_metrics["view_invariance_init"].get<double>()) + " -> " +
      std::to_string(t.report.final_metrics["view_invariance_final"].get<double>()));
  return kOk;
}

int run_downstream(const RunConfig& cfg, const fs::path& out, const std::string& ckpt, bool resume) {
  const auto pre = load_model(ckpt);
  const auto split = split_data(cfg);
  const auto t = downstream_train(cfg, pre, labeled_subset(split.train, cfg), options_for(out, resume));
  save_checkpoint(out / "model.ckpt", snapshot(t.model));
  write_report(out, "downstream", t.report);
  write_evaluation(out, t.model, split.test);
  return kOk;
}

int run_baseline(const RunConfig& cfg, const fs::path& out, bool resume) {
  const auto split = split_data(cfg);
  const auto t = supervised_baseline(cfg, labeled_subset(split.train, cfg), options_for(out, resume));
  save_checkpoint(out / "model.ckpt", snapshot(t.model));
  write_report(out, "baseline", t.report);
  write_evaluation(out, t.model, split.test);
  return kOk;
}

int run_evaluate(const RunConfig& cfg, const fs::path& out, const std::string& ckpt, bool vote) {
  const auto model = load_model(ckpt);
  const auto split = split_data(cfg);
  const auto r = vote ? evaluate_multiview_vote(model, split.test) : evaluate(model, split.test);
  write_json(out / "evaluation.json", to_json(r));
  write_confusion_csv(out / "confusion.csv", r, split.test.expression_vocabulary);
  std::ofstream per_view(out / "per_view.csv");
  per_view << "angle_deg,accuracy,count\n";
  for (const auto& [angle, acc] : r.per_view_accuracy) {
    per_view << angle << ',' << acc << ',' << r.per_view_count.at(angle) << '\n';
  }
  log("accuracy " + std::to_string(r.overall_accuracy) + (vote ? " (multi-view vote)" : ""));
  return kOk;
}

int run_study_views(const RunConfig& cfg, const fs::path& out, const std::string& clmex_ckpt,
                    const std::string& baseline_ckpt) {
  const auto clmex_model = load_model(clmex_ckpt);
  const auto baseline_model = load_model(baseline_ckpt);
  const auto split = split_data(cfg);
  const auto rows = view_drop_study(clmex_model, baseline_model, split.test);
  write_view_drop_csv(out / "view_drop.csv", rows);
  const auto [c, b] = extreme_angle_drop(rows);
  write_json(out / "view_drop_summary.json", {{"clmex_extreme_drop", c}, {"baseline_extreme_drop", b}});
  log("extreme-angle drop: clmex " + std::to_string(c) + ", baseline " + std::to_string(b));
  return kOk;
}

int run_study_fractions(const RunConfig& cfg, const fs::path& out, const std::string& ckpt, bool use_cache) {
  const auto pre = load_model(ckpt);
  const auto split = split_data(cfg);
  FractionCache cache = use_cache ? FractionCache(out / "cache") : FractionCache();
  const auto rows = label_fraction_sweep(cfg, pre, split.train, split.test, cfg.eval.fractions, cache, cfg.run.jobs);
  write_fraction_csv(out / "fractions.csv", rows);
  for (const auto& r : rows) {
    log("fraction " + std::to_string(r.fraction) + ": clmex " + std::to_string(r.clmex_accuracy) + ", baseline " +
        std::to_string(r.baseline_accuracy) + (r.cache_hit ? " (cached)" : ""));
  }
  return kOk;
}

int run_verify(const fs::path& out) {
  fs::create_directories(out);
  std::ofstream(out / "VERSION") << kVersion << '\n';
  nlohmann::json summary = nlohmann::json::array();
  bool all = true;
  for (const auto& r : verify::run_all_suites()) {
    std::cout << (r.passed() ? "PASS " : "FAIL ") << r.name << ": " << r.cases - r.failures << '/' << r.cases
              << " cases, worst error " << r.worst_error << " (tolerance " << r.tolerance << ")\n";
    for (const auto& f : r.failed_cases) std::cout << "  failed: " << f << '\n';
    summary.push_back({{"suite", r.name},
                       {"cases", r.cases},
                       {"failures", r.failures},
                       {"worst_error", r.worst_error},
                       {"tolerance", r.tolerance}});
    all = all && r.passed();
  }
  write_json(out / "verify.json", summary);
  return all ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view contrastive pre-training for expression recognition"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  bool resume = false, vote = false, no_cache = false;
  std::string checkpoint, clmex_ckpt, baseline_ckpt;
  std::optional<double> label_fraction;
  std::vector<double> fractions;

  SynthConfig synth;
  std::string synth_out;
  auto* gen = app.add_subcommand("gen-synth", "Render a synthetic multi-view dataset to disk");
  gen->add_option("--subjects", synth.subjects, "Number of subjects")->check(CLI::PositiveNumber);
  gen->add_option("--sessions", synth.sessions, "Sessions per subject")->check(CLI::PositiveNumber);
  gen->add_option("--expressions", synth.expressions, "Expression classes")->check(CLI::PositiveNumber);
  gen->add_option("--views", synth.views, "Comma-separated yaw angles in degrees")->delimiter(',');
  gen->add_option("--size", synth.image_size, "Image side in pixels");
  gen->add_option("--seed", synth.seed, "Generator seed");
  gen->add_option("--degradation", synth.view_degradation, "Strength of the rendered head turn in [0, 1]");
  gen->add_option("-o,--out", synth_out, "Output directory");

  auto* pre = app.add_subcommand("pretrain", "Contrastive pre-training on the training subjects");
  add_common(*pre, common);
  pre->add_flag("--resume", resume, "Continue from <out>/pretrain_last.ckpt when present");

  auto* down = app.add_subcommand("downstream", "Linear probe then fine-tuning from a pre-trained checkpoint");
  add_common(*down, common);
  down->add_option("--checkpoint", checkpoint, "Pre-trained checkpoint")->required();
  down->add_option("--label-fraction", label_fraction, "Share of training labels to use")->check(CLI::Range(0.0, 1.0));
  down->add_flag("--resume", resume, "Continue from <out>/downstream_last.ckpt when present");

  auto* base = app.add_subcommand("baseline", "Supervised training from random initialisation");
  add_common(*base, common);
  base->add_option("--label-fraction", label_fraction, "Share of training labels to use")->check(CLI::Range(0.0, 1.0));
  base->add_flag("--resume", resume, "Continue from <out>/baseline_last.ckpt when present");

  auto* eval = app.add_subcommand("evaluate", "Single-view accuracy of a classifier checkpoint on the test subjects");
  add_common(*eval, common);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint with a classifier head")->required();
  eval->add_flag("--vote", vote, "Majority vote over the views of each capture instead of single views");

  auto* views = app.add_subcommand("study-views", "Accuracy drop per viewing angle, CL-MEx against the baseline");
  add_common(*views, common);
  views->add_option("--clmex", clmex_ckpt, "Fine-tuned CL-MEx checkpoint")->required();
  views->add_option("--baseline", baseline_ckpt, "Supervised baseline checkpoint")->required();

  auto* fracs = app.add_subcommand("study-fractions", "Accuracy against the share of labels used");
  add_common(*fracs, common);
  fracs->add_option("--checkpoint", checkpoint, "Pre-trained checkpoint")->required();
  fracs->add_option("--fractions", fractions, "Comma-separated fractions, overrides eval.fractions")->delimiter(',');
  fracs->add_flag("--no-cache", no_cache, "Recompute every cell");

  std::string verify_out;
  auto* ver = app.add_subcommand("verify", "Gradient, loss-oracle and closed-form property suites");
  ver->add_option("-o,--out", verify_out, "Output directory for verify.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const auto sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (sub == gen) {
      return run_gen_synth(synth, synth_out.empty() ? resolve_out({}, name) : fs::path(synth_out));
    }
    if (sub == ver) {
      return run_verify(verify_out.empty() ? resolve_out({}, name) : fs::path(verify_out));
    }

    RunConfig cfg = resolve_config(common);
    if (label_fraction) cfg.downstream.label_fraction = *label_fraction;
    if (!fractions.empty()) cfg.eval.fractions = fractions;
    validate(cfg);
    const auto out = resolve_out(common, name);
    prepare_out(out, cfg, name);

    if (sub == pre) return run_pretrain(cfg, out, resume);
    if (sub == down) return run_downstream(cfg, out, checkpoint, resume);
    if (sub == base) return run_baseline(cfg, out, resume);
    if (sub == eval) return run_evaluate(cfg, out, checkpoint, vote);
    if (sub == views) return run_study_views(cfg, out, clmex_ckpt, baseline_ckpt);
    if (sub == fracs) return run_study_fractions(cfg, out, checkpoint, !no_cache);
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const SynthConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const MissingInput& e) {
    std::cerr << "missing input: " << e.what() << '\n';
    return kMissingInput;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}
