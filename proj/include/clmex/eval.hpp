#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "clmex/training.hpp"

namespace clmex {

inline constexpr std::uint64_t kStreamSubjectSplit = 7, kStreamLabelSubset = 8;

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Splits

struct SubjectSplit {
  Dataset train, test;
  std::vector<std::string> test_subjects;
};

/// Partitions by subject: ceil(test_fraction * S) subjects, clamped to
/// [1, S - 1], go to the test side. No subject appears on both sides.
inline SubjectSplit subject_split(const Dataset& d, double test_fraction, std::uint64_t seed) {
  auto subjects = d.subjects();
  if (subjects.size() < 2) throw EvalError("subject split needs at least two subjects");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw EvalError("test fraction must lie in (0, 1)");
  Rng rng(mix_seed(seed, kStreamSubjectSplit));
  shuffle(subjects, rng);
  const auto n_test = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(subjects.size()) - 1e-12)), 1,
      subjects.size() - 1);
  std::vector<std::string> test_ids(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::ranges::sort(test_ids);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < d.size(); ++i) {
    (std::ranges::binary_search(test_ids, d.samples[i].subject_id) ? test_idx : train_idx).push_back(i);
  }
  return {d.subset(train_idx), d.subset(test_idx), std::move(test_ids)};
}

/// k subject-disjoint folds; fold i holds out every k-th subject of a seeded
/// permutation starting at i.
inline std::vector<SubjectSplit> subject_folds(const Dataset& d, std::size_t k, std::uint64_t seed) {
  auto subjects = d.subjects();
  if (k < 2 || k > subjects.size()) throw EvalError("fold count must lie in [2, number of subjects]");
  Rng rng(mix_seed(seed, kStreamSubjectSplit));
  shuffle(subjects, rng);
  std::vector<SubjectSplit> folds;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::string> held;
    for (std::size_t s = f; s < subjects.size(); s += k) held.push_back(subjects[s]);
    std::ranges::sort(held);
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < d.size(); ++i) {
      (std::ranges::binary_search(held, d.samples[i].subject_id) ? test_idx : train_idx).push_back(i);
    }
    folds.push_back({d.subset(train_idx), d.subset(test_idx), std::move(held)});
  }
  return folds;
}

/// Stratified label subset: within each class a seeded permutation is fixed
/// once and the first round(fraction * n_c) members are kept, so a smaller
/// fraction always selects a subset of a larger one.
inline std::vector<std::size_t> label_subset_indices(const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw EvalError("label fraction must lie in (0, 1]");
  if (!d.labeled()) throw EvalError("label subset needs a labeled dataset");
  std::vector<std::vector<std::size_t>> by_class(d.num_classes());
  for (std::size_t i = 0; i < d.size(); ++i) by_class.at(static_cast<std::size_t>(d.samples[i].expression)).push_back(i);
  std::vector<std::size_t> out;
  std::vector<std::string> uncovered;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto members = by_class[c];
    Rng rng(mix_seed(mix_seed(seed, kStreamLabelSubset), c));
    shuffle(members, rng);
    const auto keep = std::min(members.size(), static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size()))));
    if (keep == 0) uncovered.push_back(d.expression_vocabulary[c]);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  if (!uncovered.empty()) {
    std::string list;
    for (const auto& u : uncovered) list += (list.empty() ? "" : ", ") + u;
    std::ostringstream frac;
    frac << fraction;
    throw EvalError("label fraction " + frac.str() + " leaves classes without samples: " + list);
  }
  std::ranges::sort(out);
  return out;
}

// ---------------------------------------------------------------------------
// Single-view evaluation

struct EvalResult {
  double overall_accuracy = 0.0;
  std::map<int, double> per_view_accuracy;
  std::map<int, std::size_t> per_view_count;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t n_samples = 0;
};

inline std::vector<int> predict(const Model& model, const Dataset& d, std::size_t batch = 64) {
  NoGradGuard no_grad;
  std::vector<int> out;
  out.reserve(d.size());
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng unused(0);
  for (std::size_t start = 0; start < d.size(); start += batch) {
    const std::span<const std::size_t> part(idx.data() + start, std::min(batch, d.size() - start));
    const auto b = make_labeled_batch(d, part, false, {}, unused);
    for (int p : argmax_rows(model.classify(model.encode(b.images)))) out.push_back(p);
  }
  return out;
}

inline EvalResult tabulate(const Dataset& test, std::span<const int> predictions) {
  const std::size_t classes = test.num_classes();
  EvalResult r;
  r.n_samples = test.size();
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::map<int, std::size_t> correct_by_view;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = test.samples[i];
    ++r.confusion.at(static_cast<std::size_t>(s.expression)).at(static_cast<std::size_t>(predictions[i]));
    const bool hit = predictions[i] == s.expression;
    correct += hit;
    correct_by_view[s.view_angle_deg] += hit;
    ++r.per_view_count[s.view_angle_deg];
  }
  r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  for (const auto& [angle, n] : r.per_view_count) {
    r.per_view_accuracy[angle] = static_cast<double>(correct_by_view[angle]) / static_cast<double>(n);
  }
  return r;
}

/// Accuracy of a classifier on single-view test images. Pure: the same model
/// and data always give the same result.
inline EvalResult evaluate(const Model& model, const Dataset& test) {
  if (test.size() == 0) throw EvalError("empty test set");
  if (!test.labeled()) throw EvalError("test set lacks labels");
  model.require_classes(test.num_classes());
  const auto predictions = predict(model, test);
  return tabulate(test, predictions);
}

/// Optional multi-view mode: every image of a view-invariant group receives
/// the group's majority prediction (ties to the lowest class). Not used by
/// the studies, which stay single-view.
inline EvalResult evaluate_multiview_vote(const Model& model, const Dataset& test) {
  if (test.size() == 0) throw EvalError("empty test set");
  model.require_classes(test.num_classes());
  auto predictions = predict(model, test);
  for (const auto& members : test.groups()) {
    std::vector<std::size_t> votes(test.num_classes(), 0);
    for (auto i : members) ++votes[static_cast<std::size_t>(predictions[i])];
    const int winner = static_cast<int>(std::ranges::max_element(votes) - votes.begin());
    for (auto i : members) predictions[i] = winner;
  }
  return tabulate(test, predictions);
}

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json per_view = nlohmann::json::object();
  for (const auto& [angle, acc] : r.per_view_accuracy) {
    per_view[std::to_string(angle)] = {{"accuracy", acc}, {"samples", r.per_view_count.at(angle)}};
  }
  return {{"overall_accuracy", r.overall_accuracy}, {"n_samples", r.n_samples}, {"per_view", per_view},
          {"confusion", r.confusion}};
}

// ---------------------------------------------------------------------------
// View-drop study

struct ViewDropRow {
  int angle = 0;
  double clmex_accuracy = 0.0, baseline_accuracy = 0.0;
  double clmex_drop = 0.0, baseline_drop = 0.0;  // accuracy(0) - accuracy(angle)
};

inline std::vector<ViewDropRow> view_drop_table(const EvalResult& clmex, const EvalResult& baseline,
                                                std::span<const int> views) {
  for (int v : views) {
    if (!clmex.per_view_accuracy.contains(v) || !baseline.per_view_accuracy.contains(v)) {
      throw EvalError("test set has no images at " + std::to_string(v) + " degrees");
    }
  }
  if (!clmex.per_view_accuracy.contains(0)) throw EvalError("test set has no frontal images");
  std::vector<ViewDropRow> rows;
  for (int v : views) {
    ViewDropRow row{v, clmex.per_view_accuracy.at(v), baseline.per_view_accuracy.at(v), 0.0, 0.0};
    row.clmex_drop = clmex.per_view_accuracy.at(0) - row.clmex_accuracy;
    row.baseline_drop = baseline.per_view_accuracy.at(0) - row.baseline_accuracy;
    rows.push_back(row);
  }
  return rows;
}

/// Evaluates both classifiers on the identical test set and tabulates the
/// per-angle drop relative to the frontal view.
inline std::vector<ViewDropRow> view_drop_study(const Model& clmex, const Model& baseline, const Dataset& test) {
  return view_drop_table(evaluate(clmex, test), evaluate(baseline, test), test.view_set);
}

/// Mean drop over the angles of largest magnitude, for each model.
inline std::pair<double, double> extreme_angle_drop(std::span<const ViewDropRow> rows) {
  int extreme = 0;
  for (const auto& r : rows) extreme = std::max(extreme, std::abs(r.angle));
  double c = 0.0, b = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (std::abs(r.angle) != extreme) continue;
    c += r.clmex_drop;
    b += r.baseline_drop;
    ++n;
  }
  return {c / static_cast<double>(n), b / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------
// Label-fraction study

struct FractionRow {
  double fraction = 1.0;
  std::size_t labeled_samples = 0;
  double clmex_accuracy = 0.0, baseline_accuracy = 0.0;
  std::size_t clmex_steps = 0, baseline_steps = 0;
  bool cache_hit = false;
};

inline nlohmann::json to_json(const FractionRow& r) {
  return {{"fraction", r.fraction},           {"labeled_samples", r.labeled_samples},
          {"clmex_accuracy", r.clmex_accuracy}, {"baseline_accuracy", r.baseline_accuracy},
          {"clmex_steps", r.clmex_steps},     {"baseline_steps", r.baseline_steps}};
}

inline FractionRow fraction_row_from_json(const nlohmann::json& j) {
  FractionRow r;
  j.at("fraction").get_to(r.fraction);
  j.at("labeled_samples").get_to(r.labeled_samples);
  j.at("clmex_accuracy").get_to(r.clmex_accuracy);
  j.at("baseline_accuracy").get_to(r.baseline_accuracy);
  j.at("clmex_steps").get_to(r.clmex_steps);
  j.at("baseline_steps").get_to(r.baseline_steps);
  return r;
}

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  Fnv1a& bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& text(std::string_view s) { return bytes(s.data(), s.size()); }
  template <typename T>
  Fnv1a& values(std::span<const T> v) {
    return bytes(v.data(), v.size_bytes());
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

/// Key of one (pre-trained weights, config, labeled subset, test set) cell.
inline std::uint64_t fraction_cache_key(const Model& pretrained, const RunConfig& cfg,
                                        std::span<const std::size_t> subset, const Dataset& test) {
  Fnv1a h;
  for (const auto& p : pretrained.parameters()) h.text(p.name).values(p.tensor.values());
  RunConfig c = cfg;
  // Settings that cannot change a cell's result are normalised away; the
  // subset itself is hashed below.
  c.downstream.label_fraction = 1.0;
  c.eval.fractions = {};
  c.run.jobs = 1;
  h.text(to_ini(c));
  h.values(subset);
  for (const auto& s : test.samples) {
    h.text(s.subject_id).text(s.session_id).bytes(&s.view_angle_deg, sizeof(int)).bytes(&s.expression, sizeof(int));
  }
  return h.value();
}

/// Results keyed by fraction_cache_key; optionally mirrored to a directory
/// of small JSON files so later runs can reuse them.
class FractionCache {
 public:
  explicit FractionCache(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}

  std::optional<FractionRow> find(std::uint64_t key) {
    std::lock_guard lock(mutex_);
    if (auto it = rows_.find(key); it != rows_.end()) return it->second;
    if (!dir_.empty()) {
      std::ifstream is(path(key));
      if (is) {
        auto row = fraction_row_from_json(nlohmann::json::parse(is));
        rows_[key] = row;
        return row;
      }
    }
    return std::nullopt;
  }

  void store(std::uint64_t key, const FractionRow& row) {
    std::lock_guard lock(mutex_);
    rows_[key] = row;
    if (!dir_.empty()) {
      std::filesystem::create_directories(dir_);
      std::ofstream(path(key)) << to_json(row).dump(2) << '\n';
    }
  }

 private:
  std::filesystem::path path(std::uint64_t key) const {
    std::ostringstream name;
    name << std::hex << key << ".json";
    return dir_ / name.str();
  }

  std::filesystem::path dir_;
  std::map<std::uint64_t, FractionRow> rows_;
  std::mutex mutex_;
};

/// For each fraction, fine-tunes the shared pre-trained model and trains the
/// supervised baseline on the same stratified subset, then evaluates both on
/// `test`. Up to `jobs` fractions run concurrently; each run owns its model.
inline std::vector<FractionRow> label_fraction_sweep(const RunConfig& cfg, const Model& pretrained,
                                                     const Dataset& train, const Dataset& test,
                                                     std::span<const double> fractions, FractionCache& cache,
                                                     std::size_t jobs = 1) {
  // Validate every subset up front so a bad fraction fails before any training.
  std::vector<std::vector<std::size_t>> subsets;
  for (double f : fractions) subsets.push_back(label_subset_indices(train, f, cfg.run.seed));

  const auto run_one = [&](std::size_t i) {
    RunConfig c = cfg;
    c.downstream.label_fraction = fractions[i];
    const auto key = fraction_cache_key(pretrained, c, subsets[i], test);
    if (auto hit = cache.find(key)) {
      hit->fraction = fractions[i];
      hit->cache_hit = true;
      return *hit;
    }
    const Dataset labeled = train.subset(subsets[i]);
    const auto tuned = downstream_train(c, pretrained, labeled);
    const auto base = supervised_baseline(c, labeled);
    FractionRow row{fractions[i],
                    labeled.size(),
                    evaluate(tuned.model, test).overall_accuracy,
                    evaluate(base.model, test).overall_accuracy,
                    tuned.report.total_steps,
                    base.report.total_steps,
                    false};
    cache.store(key, row);
    return row;
  };

  std::vector<FractionRow> rows(fractions.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < fractions.size(); ++i) rows[i] = run_one(i);
    return rows;
  }
  for (std::size_t start = 0; start < fractions.size(); start += jobs) {
    std::vector<std::future<FractionRow>> wave;
    for (std::size_t i = start; i < std::min(start + jobs, fractions.size()); ++i) {
      wave.push_back(std::async(std::launch::async, run_one, i));
    }
    for (std::size_t k = 0; k < wave.size(); ++k) rows[start + k] = wave[k].get();
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV output

inline void write_view_drop_csv(const std::filesystem::path& path, std::span<const ViewDropRow> rows) {
  std::ofstream os(path);
  if (!os) throw EvalError("cannot write " + path.string());
  os << "angle_deg,clmex_accuracy,baseline_accuracy,clmex_drop,baseline_drop\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.angle << ',' << r.clmex_accuracy << ',' << r.baseline_accuracy << ',' << r.clmex_drop << ','
       << r.baseline_drop << '\n';
  }
}

inline void write_fraction_csv(const std::filesystem::path& path, std::span<const FractionRow> rows) {
  std::ofstream os(path);
  if (!os) throw EvalError("cannot write " + path.string());
  os << "fraction,labeled_samples,clmex_accuracy,baseline_accuracy,clmex_steps,baseline_steps\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.fraction << ',' << r.labeled_samples << ',' << r.clmex_accuracy << ',' << r.baseline_accuracy << ','
       << r.clmex_steps << ',' << r.baseline_steps << '\n';
  }
}

inline void write_confusion_csv(const std::filesystem::path& path, const EvalResult& r,
                                std::span<const std::string> class_names) {
  std::ofstream os(path);
  if (!os) throw EvalError("cannot write " + path.string());
  os << "true\\predicted";
  for (const auto& n : class_names) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    os << class_names[i];
    for (auto c : r.confusion[i]) os << ',' << c;
    os << '\n';
  }
}

}  // namespace clmex
