#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clmex/checkpoint.hpp"
#include "clmex/config.hpp"
#include "clmex/losses.hpp"
#include "clmex/models.hpp"
#include "clmex/optim.hpp"
#include "clmex/sampler.hpp"

namespace clmex {

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, contiguous across the phases of one report
  std::string stage;      // pretrain | probe | finetune | baseline
  double loss = 0.0;      // mean training loss over the epoch's steps
  double lr = 0.0;        // lr used for the epoch's last step
  double wall_time = 0.0;
  std::size_t steps = 0;  // cumulative optimizer steps at the end of the epoch
  std::optional<double> validation_loss;
  std::optional<double> view_invariance;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainReport {
  std::string stage;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  nlohmann::json final_metrics = nlohmann::json::object();
  std::string checkpoint_path;
  nlohmann::json config_echo = nlohmann::json::object();
  std::size_t total_steps = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch}, {"stage", r.stage},         {"loss", r.loss},
                      {"lr", r.lr},       {"wall_time", r.wall_time}, {"steps", r.steps}};
  if (r.validation_loss) j["validation_loss"] = *r.validation_loss;
  if (r.view_invariance) j["view_invariance"] = *r.view_invariance;
  return j;
}

inline EpochRecord epoch_record_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.stage = j.at("stage").get<std::string>();
  r.loss = j.at("loss").get<double>();
  r.lr = j.at("lr").get<double>();
  r.wall_time = j.at("wall_time").get<double>();
  r.steps = j.at("steps").get<std::size_t>();
  if (j.contains("validation_loss")) r.validation_loss = j["validation_loss"].get<double>();
  if (j.contains("view_invariance")) r.view_invariance = j["view_invariance"].get<double>();
  return r;
}

inline nlohmann::json summary_json(const TrainReport& r) {
  return {{"stage", r.stage},
          {"seed", r.seed},
          {"epochs", r.epochs.size()},
          {"total_steps", r.total_steps},
          {"final_metrics", r.final_metrics},
          {"checkpoint", r.checkpoint_path},
          {"config", r.config_echo},
          {"version", kVersion}};
}

/// Writes `<prefix>.jsonl` (one record per epoch) and `<prefix>_summary.json`.
inline void write_report(const std::filesystem::path& dir, const std::string& prefix, const TrainReport& r) {
  std::filesystem::create_directories(dir);
  std::ofstream lines(dir / (prefix + ".jsonl"));
  for (const auto& e : r.epochs) lines << to_json(e).dump() << '\n';
  std::ofstream(dir / (prefix + "_summary.json")) << summary_json(r).dump(2) << '\n';
}

/// Where and how a training run persists itself.
struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no checkpoints are written
  bool resume = false;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// The model config with the input geometry taken from the data.
inline ModelConfig model_config_for(const RunConfig& cfg, const Dataset& d) {
  ModelConfig m = cfg.model;
  if (d.size() == 0) throw DatasetError("empty dataset");
  const auto& img = d.samples.front().image;
  if (img.height != img.width) throw DatasetError("images must be square");
  m.encoder.image_size = img.height;
  m.encoder.input_channels = img.channels;
  m.num_classes = 0;
  return m;
}

/// Encoder embeddings R of every sample, no augmentation, in dataset order.
inline Tensor embed(const Model& model, const Dataset& d, std::size_t batch = 64) {
  NoGradGuard no_grad;
  const std::size_t dim = model.config.encoder.embedding_dim;
  std::vector<double> out;
  out.reserve(d.size() * dim);
  for (std::size_t start = 0; start < d.size(); start += batch) {
    std::vector<const Image*> ptrs;
    for (std::size_t i = start; i < std::min(d.size(), start + batch); ++i) ptrs.push_back(&d.samples[i].image);
    const auto r = model.encode(images_to_tensor(ptrs));
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  return Tensor::from({d.size(), dim}, std::move(out));
}

/// Mean cosine similarity over same-group pairs minus the mean over
/// different-group pairs. Rows with zero norm count as orthogonal to all.
inline double view_invariance_from_embeddings(const Tensor& r, std::span<const int> group_ids) {
  const std::size_t n = r.dim(0), dim = r.dim(1);
  if (group_ids.size() != n) throw ShapeError("view_invariance", r.shape(), Shape{group_ids.size()});
  std::vector<double> unit(r.values().begin(), r.values().end());
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t k = 0; k < dim; ++k) norm += unit[i * dim + k] * unit[i * dim + k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < dim; ++k) unit[i * dim + k] = norm > 0.0 ? unit[i * dim + k] / norm : 0.0;
  }
  double same = 0.0, diff = 0.0;
  std::size_t n_same = 0, n_diff = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double c = 0.0;
      for (std::size_t k = 0; k < dim; ++k) c += unit[i * dim + k] * unit[j * dim + k];
      if (group_ids[i] == group_ids[j]) {
        same += c;
        ++n_same;
      } else {
        diff += c;
        ++n_diff;
      }
    }
  return (n_same ? same / static_cast<double>(n_same) : 0.0) - (n_diff ? diff / static_cast<double>(n_diff) : 0.0);
}

inline double view_invariance_diagnostic(const Model& model, const Dataset& d) {
  std::vector<int> ids;
  for (const auto& s : d.samples) ids.push_back(s.view_invariant_id);
  return view_invariance_from_embeddings(embed(model, d), ids);
}

namespace detail {

inline std::vector<std::string> names_of(const std::vector<NamedTensor>& params) {
  std::vector<std::string> out;
  for (const auto& p : params) out.push_back(p.name);
  return out;
}

inline std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

inline nlohmann::json records_json(const std::vector<EpochRecord>& records) {
  auto j = nlohmann::json::array();
  for (const auto& r : records) j.push_back(to_json(r));
  return j;
}

inline std::vector<EpochRecord> records_from_json(const nlohmann::json& j) {
  std::vector<EpochRecord> out;
  for (const auto& r : j) out.push_back(epoch_record_from_json(r));
  return out;
}

class Stopwatch {
 public:
  explicit Stopwatch(bool zeroed) : zeroed_(zeroed), start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    if (zeroed_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool zeroed_;
  std::chrono::steady_clock::time_point start_;
};

inline std::string describe_last_good(const std::optional<std::filesystem::path>& p) {
  return p ? p->string() : std::string("none (failure before the first checkpoint)");
}

}  // namespace detail

// Seed streams derived from run.seed.
inline constexpr std::uint64_t kStreamModelInit = 1, kStreamPretrainData = 2, kStreamValidationSplit = 3,
                               kStreamClassifierInit = 4, kStreamBaselineInit = 5, kStreamSupervisedData = 6;

struct TrainedModel {
  Model model;
  TrainReport report;
};

/// Self-supervised pre-training of encoder and projection head with the
/// configured contrastive loss. Expression labels are stripped before any
/// batch is built unless the loss is supcon, which needs them by definition.
inline TrainedModel pretrain(const RunConfig& cfg, const Dataset& data, const TrainOptions& opts = {}) {
  validate(cfg);
  const bool needs_labels = cfg.pretrain.loss == LossKind::supcon;
  if (needs_labels && !data.labeled()) throw DatasetError("supcon pre-training needs a labeled dataset");
  const Dataset d = needs_labels ? data : data.without_labels();
  check_sampler(d, cfg.pretrain.sampler);

  Rng init_rng(mix_seed(cfg.run.seed, kStreamModelInit));
  Rng rng(mix_seed(cfg.run.seed, kStreamPretrainData));
  Model model = make_model(model_config_for(cfg, d), init_rng);
  const auto params = [&] {
    auto p = model.encoder.parameters();
    for (auto& q : model.projection.parameters()) p.push_back(std::move(q));
    return p;
  }();
  AdamOptions adam = cfg.pretrain.adam;
  adam.weight_decay = cfg.pretrain.weight_decay;
  Adam opt(detail::tensors_of(params), adam);

  const std::size_t per_epoch = batches_per_epoch(d, cfg.pretrain.sampler);
  const std::size_t total = per_epoch * cfg.pretrain.epochs;
  const auto schedule = LrSchedule::cosine(cfg.pretrain.lr, total);

  TrainReport report;
  report.stage = "pretrain";
  report.seed = cfg.run.seed;
  report.config_echo = config_to_json(cfg);
  const auto ckpt_path = opts.out_dir.empty() ? std::filesystem::path{} : opts.out_dir / "pretrain_last.ckpt";
  std::optional<std::filesystem::path> last_good;
  std::size_t step = 0, start_epoch = 1;
  double view_init = 0.0;

  if (opts.resume && !ckpt_path.empty() && std::filesystem::exists(ckpt_path)) {
    const auto c = load_checkpoint(ckpt_path);
    if (c.architecture != model.config) throw CheckpointError("resume: architecture differs from the config");
    load_parameters(model, c);
    restore_optimizer(opt, detail::names_of(params), c);
    restore_rng_state(rng, c.rng_state);
    report.epochs = detail::records_from_json(c.meta.at("records"));
    step = c.meta.at("step").get<std::size_t>();
    start_epoch = c.meta.at("epoch").get<std::size_t>() + 1;
    view_init = c.meta.at("view_invariance_init").get<double>();
    last_good = ckpt_path;
  } else {
    view_init = view_invariance_diagnostic(model, d);
  }

  const detail::Stopwatch clock(cfg.run.deterministic);
  for (std::size_t epoch = start_epoch; epoch <= cfg.pretrain.epochs; ++epoch) {
    double loss_sum = 0.0, lr = 0.0;
    for (const auto& groups : epoch_group_batches(d, cfg.pretrain.sampler, rng)) {
      const auto batch = assemble_contrastive_batch(d, groups, cfg.pretrain.sampler.views_per_group, cfg.augment, rng);
      std::vector<int> ids;
      switch (cfg.pretrain.loss) {
        case LossKind::clmex:
          ids = batch.view_ids;
          break;
        case LossKind::simclr:
          for (std::size_t k = 0; k < batch.view_ids.size(); ++k) ids.push_back(static_cast<int>(k / 2));
          break;
        case LossKind::supcon:
          for (auto src : batch.source_indices) ids.push_back(d.samples[src].expression);
          break;
      }
      lr = schedule.lr_at(step);
      const auto z = model.project(model.encode(batch.images));
      const auto fail = [&](const std::string& what) {
        return NumericalError("pretrain: " + what + " at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step + 1) + "; last good checkpoint: " + detail::describe_last_good(last_good));
      };
      // A diverged encoder shows up as projections that no longer normalise.
      if (!std::ranges::all_of(z.values(), [](double v) { return std::isfinite(v); })) throw fail("non-finite projection");
      Tensor loss;
      try {
        loss = detail::grouped_contrastive("pretrain", z, ids, cfg.pretrain.contrastive);
      } catch (const ContrastiveInputError& e) {
        throw fail(std::string("degenerate projection (") + e.what() + ")");
      }
      if (!std::isfinite(loss.item())) throw fail("non-finite loss");
      opt.zero_grad();
      loss.backward();
      opt.step(lr);
      loss_sum += loss.item();
      ++step;
    }
    EpochRecord rec{epoch, "pretrain", loss_sum / static_cast<double>(per_epoch), lr, clock.seconds(), step, {},
                    view_invariance_diagnostic(model, d)};
    report.epochs.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (!ckpt_path.empty()) {
      auto c = snapshot(model);
      store_optimizer(c, detail::names_of(params), opt.state());
      c.rng_state = rng_state(rng);
      c.meta = {{"stage", "pretrain"},
                {"epoch", epoch},
                {"step", step},
                {"view_invariance_init", view_init},
                {"records", detail::records_json(report.epochs)}};
      save_checkpoint(ckpt_path, c);
      last_good = ckpt_path;
    }
  }
  report.total_steps = step;
  report.checkpoint_path = ckpt_path.string();
  report.final_metrics = {{"final_loss", report.epochs.back().loss},
                          {"view_invariance_init", view_init},
                          {"view_invariance_final", *report.epochs.back().view_invariance},
                          {"temperature", cfg.pretrain.contrastive.temperature},
                          {"batches_per_epoch", per_epoch}};
  return {std::move(model), std::move(report)};
}

/// Train/validation partition of a labeled set: a seeded shuffle puts
/// max(1, round(fraction * n)) samples in validation when n >= 2 and the
/// fraction is positive.
struct ValidationSplit {
  std::vector<std::size_t> train, validation;
};

inline ValidationSplit validation_split(const Dataset& d, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (fraction <= 0.0 || idx.size() < 2) return {idx, {}};
  Rng rng(mix_seed(seed, kStreamValidationSplit));
  shuffle(idx, rng);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size()))), 1, idx.size() - 1);
  ValidationSplit s;
  s.validation.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::ranges::sort(s.validation);
  std::ranges::sort(s.train);
  return s;
}

inline std::size_t supervised_steps_per_epoch(std::size_t n_train, std::size_t batch_size) {
  return (n_train + batch_size - 1) / batch_size;
}

namespace detail {

struct SupervisedPhase {
  std::string stage;
  std::size_t epochs;
  bool train_encoder;
};

inline double mean_cross_entropy(const Model& model, const Dataset& d, std::span<const std::size_t> idx) {
  NoGradGuard no_grad;
  double total = 0.0;
  const std::size_t chunk = 64;
  Rng unused(0);
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    const auto part = idx.subspan(start, std::min(chunk, idx.size() - start));
    const auto batch = make_labeled_batch(d, part, false, {}, unused);
    total += cross_entropy(model.classify(model.encode(batch.images)), batch.labels).item() *
             static_cast<double>(part.size());
  }
  return total / static_cast<double>(idx.size());
}

/// Cross-entropy training shared by the downstream and baseline stages. One
/// plateau schedule spans all phases and observes the validation loss (the
/// training loss when there is no validation split) after every epoch.
inline TrainReport run_supervised(Model& model, const RunConfig& cfg, const Dataset& d, std::string stage_name,
                                  std::vector<SupervisedPhase> phases, double base_lr, double weight_decay,
                                  const TrainOptions& opts) {
  const auto& ds = cfg.downstream;
  if (d.num_classes() == 0 || !d.labeled()) throw DatasetError(stage_name + ": needs a labeled dataset");
  model.require_classes(d.num_classes());
  const auto split = validation_split(d, ds.validation_fraction, cfg.run.seed);
  if (split.train.empty()) throw DatasetError(stage_name + ": no training samples");
  Rng rng(mix_seed(cfg.run.seed, kStreamSupervisedData));
  auto schedule = LrSchedule::plateau(base_lr, ds.plateau_factor, ds.plateau_patience);
  AdamOptions adam = cfg.pretrain.adam;
  adam.weight_decay = weight_decay;

  TrainReport report;
  report.stage = stage_name;
  report.seed = cfg.run.seed;
  report.config_echo = config_to_json(cfg);
  const auto last_path = opts.out_dir.empty() ? std::filesystem::path{} : opts.out_dir / (stage_name + "_last.ckpt");
  const auto best_path = opts.out_dir.empty() ? std::filesystem::path{} : opts.out_dir / (stage_name + "_best.ckpt");
  std::optional<std::filesystem::path> last_good;
  double best_metric = std::numeric_limits<double>::infinity();
  std::size_t step = 0, done_epochs = 0;

  std::optional<Checkpoint> resume_from;
  if (opts.resume && !last_path.empty() && std::filesystem::exists(last_path)) {
    resume_from = load_checkpoint(last_path);
    if (resume_from->architecture != model.config) throw CheckpointError("resume: architecture differs");
    load_parameters(model, *resume_from);
    restore_rng_state(rng, resume_from->rng_state);
    const auto& m = resume_from->meta;
    report.epochs = records_from_json(m.at("records"));
    step = m.at("step").get<std::size_t>();
    done_epochs = m.at("epoch").get<std::size_t>();
    best_metric = m.at("best_metric").get<double>();
    schedule.restore(m.at("lr").get<double>(), m.at("history").get<std::vector<double>>(),
                     m.at("bad_evaluations").get<int>());
    last_good = last_path;
  }

  const Stopwatch clock(cfg.run.deterministic);
  std::size_t epoch = 0;
  for (const auto& phase : phases) {
    if (epoch + phase.epochs <= done_epochs) {
      epoch += phase.epochs;
      continue;
    }
    model.set_encoder_trainable(phase.train_encoder);
    std::vector<NamedTensor> params = phase.train_encoder ? model.encoder.parameters() : std::vector<NamedTensor>{};
    for (auto& p : model.classifier.parameters()) params.push_back(std::move(p));
    Adam opt(tensors_of(params), adam);
    if (resume_from && epoch < done_epochs) restore_optimizer(opt, names_of(params), *resume_from);

    for (std::size_t e = 0; e < phase.epochs; ++e) {
      if (++epoch <= done_epochs) continue;
      auto order = split.train;
      shuffle(order, rng);
      double loss_sum = 0.0;
      std::size_t batches = 0;
      const double lr = schedule.current_lr();
      for (std::size_t start = 0; start < order.size(); start += ds.batch_size) {
        const std::span<const std::size_t> part(order.data() + start, std::min(ds.batch_size, order.size() - start));
        const auto batch = make_labeled_batch(d, part, ds.augment, cfg.augment, rng);
        const auto loss = cross_entropy(model.classify(model.encode(batch.images)), batch.labels);
        if (!std::isfinite(loss.item())) {
          throw NumericalError(stage_name + ": non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step + 1) + "; last good checkpoint: " + describe_last_good(last_good));
        }
        opt.zero_grad();
        loss.backward();
        opt.step(lr);
        loss_sum += loss.item();
        ++batches;
        ++step;
      }
      const double train_loss = loss_sum / static_cast<double>(batches);
      std::optional<double> val;
      if (!split.validation.empty()) val = mean_cross_entropy(model, d, split.validation);
      const double monitored = val.value_or(train_loss);
      schedule.observe(monitored);
      EpochRecord rec{epoch, phase.stage, train_loss, lr, clock.seconds(), step, val, {}};
      report.epochs.push_back(rec);
      if (opts.on_epoch) opts.on_epoch(rec);
      if (!last_path.empty()) {
        auto c = snapshot(model);
        store_optimizer(c, names_of(params), opt.state());
        c.rng_state = rng_state(rng);
        const bool improved = monitored < best_metric;
        best_metric = std::min(best_metric, monitored);
        c.meta = {{"stage", stage_name},
                  {"phase", phase.stage},
                  {"epoch", epoch},
                  {"step", step},
                  {"best_metric", best_metric},
                  {"lr", schedule.current_lr()},
                  {"history", schedule.history()},
                  {"bad_evaluations", schedule.bad_evaluations()},
                  {"records", records_json(report.epochs)}};
        save_checkpoint(last_path, c);
        if (improved) save_checkpoint(best_path, c);
        last_good = last_path;
      }
    }
  }
  model.set_encoder_trainable(true);
  report.total_steps = step;
  report.checkpoint_path = last_path.string();
  report.final_metrics = {{"final_loss", report.epochs.back().loss},
                          {"final_lr", schedule.current_lr()},
                          {"train_samples", split.train.size()},
                          {"validation_samples", split.validation.size()},
                          {"steps_per_epoch", supervised_steps_per_epoch(split.train.size(), ds.batch_size)}};
  if (report.epochs.back().validation_loss) {
    report.final_metrics["final_validation_loss"] = *report.epochs.back().validation_loss;
  }
  return report;
}

}  // namespace detail

/// Attaches a fresh linear head to the pre-trained encoder, trains it alone
/// with the encoder frozen, then fine-tunes encoder and head together. The
/// projection head is discarded.
inline TrainedModel downstream_train(const RunConfig& cfg, const Model& pretrained, const Dataset& labeled,
                                     const TrainOptions& opts = {}) {
  validate(cfg);
  Model model;
  {
    // Deep copy so the caller's model is untouched.
    model = restore_model(snapshot(pretrained));
  }
  if (model.config.encoder.image_size != labeled.samples.at(0).image.height) {
    throw ModelConfigError("checkpoint expects " + std::to_string(model.config.encoder.image_size) +
                           "px images, dataset has " + std::to_string(labeled.samples.at(0).image.height));
  }
  Rng head_rng(mix_seed(cfg.run.seed, kStreamClassifierInit));
  model.attach_classifier(labeled.num_classes(), head_rng);
  if (cfg.downstream.standardize_head_inputs) model.classifier.fit_input_statistics(embed(model, labeled));
  auto report = detail::run_supervised(
      model, cfg, labeled, "downstream",
      {{"probe", cfg.downstream.probe_epochs, false}, {"finetune", cfg.downstream.finetune_epochs, true}},
      cfg.downstream.lr, cfg.downstream.weight_decay, opts);
  report.final_metrics["label_fraction"] = cfg.downstream.label_fraction;
  return {std::move(model), std::move(report)};
}

/// The same architecture trained from random initialisation with labels only,
/// for baseline_epochs() epochs over the same split, batch size and schedule
/// as the downstream stage.
inline TrainedModel supervised_baseline(const RunConfig& cfg, const Dataset& labeled, const TrainOptions& opts = {}) {
  validate(cfg);
  Rng init_rng(mix_seed(cfg.run.seed, kStreamBaselineInit));
  auto mc = model_config_for(cfg, labeled);
  mc.num_classes = labeled.num_classes();
  Model model = make_model(mc, init_rng);
  if (cfg.downstream.standardize_head_inputs) model.classifier.fit_input_statistics(embed(model, labeled));
  auto report = detail::run_supervised(model, cfg, labeled, "baseline", {{"baseline", cfg.baseline_epochs(), true}},
                                       cfg.baseline.lr, cfg.baseline.weight_decay, opts);
  report.final_metrics["label_fraction"] = cfg.downstream.label_fraction;
  return {std::move(model), std::move(report)};
}

}  // namespace clmex
