#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clmex/augment.hpp"
#include "clmex/dataset.hpp"
#include "clmex/rng.hpp"
#include "clmex/tensor.hpp"

namespace clmex {

struct SamplerConfig {
  std::size_t groups_per_batch = 8;  // G
  std::size_t views_per_group = 5;   // K
};

/// 2N augmented images; rows 2k and 2k+1 are two augmentations of original k.
struct AugmentedBatch {
  Tensor images;  // [2N, C, H, W]
  std::vector<int> view_ids;
  std::vector<int> labels;  // empty for self-supervised batches
  std::vector<std::size_t> source_indices;
};

/// Single-augmentation batch for the supervised stages.
struct LabeledBatch {
  Tensor images;  // [B, C, H, W]
  std::vector<int> labels;
};

class SamplerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Copies HWC images into one [B, C, H, W] tensor.
inline Tensor images_to_tensor(std::span<const Image* const> images) {
  if (images.empty()) throw SamplerError("empty image batch");
  const std::size_t h = images[0]->height, w = images[0]->width, c = images[0]->channels;
  std::vector<double> data(images.size() * c * h * w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.height != h || img.width != w || img.channels != c) throw SamplerError("images differ in size");
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) data[((n * c + ch) * h + y) * w + x] = img.at(y, x, ch);
  }
  return Tensor::from({images.size(), c, h, w}, std::move(data));
}

/// Groups with at least `min_views` members.
inline std::vector<std::vector<std::size_t>> eligible_groups(const Dataset& d, std::size_t min_views) {
  std::vector<std::vector<std::size_t>> out;
  for (auto& g : d.groups())
    if (g.size() >= min_views) out.push_back(std::move(g));
  return out;
}

inline void check_sampler(const Dataset& d, const SamplerConfig& cfg) {
  if (cfg.groups_per_batch == 0 || cfg.views_per_group == 0) {
    throw SamplerError("sampler needs at least one group per batch and one view per group");
  }
  const auto ok = eligible_groups(d, cfg.views_per_group).size();
  if (ok < cfg.groups_per_batch) {
    throw SamplerError("sampler needs " + std::to_string(cfg.groups_per_batch) + " groups with >= " +
                       std::to_string(cfg.views_per_group) + " views, dataset has " + std::to_string(ok) +
                       " (short by " + std::to_string(cfg.groups_per_batch - ok) + ")");
  }
}

/// Draws K distinct views from each listed group and augments each twice.
/// Each original gets its own rng stream seeded from `rng`.
inline AugmentedBatch assemble_contrastive_batch(const Dataset& d,
                                                 std::span<const std::vector<std::size_t>> groups,
                                                 std::size_t views_per_group, const AugmentConfig& aug, Rng& rng) {
  AugmentedBatch batch;
  std::vector<Image> augmented;
  for (const auto& members : groups) {
    if (members.size() < views_per_group) throw SamplerError("group smaller than views_per_group");
    auto chosen = members;
    shuffle(chosen, rng);
    chosen.resize(views_per_group);
    for (auto idx : chosen) {
      Rng item(rng());
      const Sample& s = d.samples[idx];
      for (int copy = 0; copy < 2; ++copy) {
        augmented.push_back(augment(s.image, aug, item));
        batch.view_ids.push_back(s.view_invariant_id);
        batch.source_indices.push_back(idx);
      }
    }
  }
  std::vector<const Image*> ptrs;
  for (const auto& img : augmented) ptrs.push_back(&img);
  batch.images = images_to_tensor(ptrs);
  return batch;
}

/// G distinct view-invariant groups drawn uniformly, K distinct views each.
inline AugmentedBatch sample_batch(const Dataset& d, const SamplerConfig& cfg, const AugmentConfig& aug, Rng& rng) {
  check_sampler(d, cfg);
  auto groups = eligible_groups(d, cfg.views_per_group);
  shuffle(groups, rng);
  groups.resize(cfg.groups_per_batch);
  return assemble_contrastive_batch(d, groups, cfg.views_per_group, aug, rng);
}

/// One epoch of group assignments: every eligible group appears at most once;
/// the trailing partial batch is dropped.
inline std::vector<std::vector<std::vector<std::size_t>>> epoch_group_batches(const Dataset& d,
                                                                               const SamplerConfig& cfg, Rng& rng) {
  check_sampler(d, cfg);
  auto groups = eligible_groups(d, cfg.views_per_group);
  shuffle(groups, rng);
  std::vector<std::vector<std::vector<std::size_t>>> out;
  for (std::size_t start = 0; start + cfg.groups_per_batch <= groups.size(); start += cfg.groups_per_batch) {
    out.emplace_back(groups.begin() + static_cast<std::ptrdiff_t>(start),
                     groups.begin() + static_cast<std::ptrdiff_t>(start + cfg.groups_per_batch));
  }
  return out;
}

inline std::size_t batches_per_epoch(const Dataset& d, const SamplerConfig& cfg) {
  return eligible_groups(d, cfg.views_per_group).size() / cfg.groups_per_batch;
}

/// Supervised batch over explicit sample indices; augmentation optional.
inline LabeledBatch make_labeled_batch(const Dataset& d, std::span<const std::size_t> indices, bool with_augment,
                                       const AugmentConfig& aug, Rng& rng) {
  LabeledBatch batch;
  std::vector<Image> images;
  images.reserve(indices.size());
  for (auto idx : indices) {
    const Sample& s = d.samples.at(idx);
    if (s.expression == kNoLabel) throw SamplerError("sample " + std::to_string(idx) + " has no label");
    if (with_augment) {
      Rng item(rng());
      images.push_back(augment(s.image, aug, item));
    } else {
      images.push_back(s.image);
    }
    batch.labels.push_back(s.expression);
  }
  std::vector<const Image*> ptrs;
  for (const auto& img : images) ptrs.push_back(&img);
  batch.images = images_to_tensor(ptrs);
  return batch;
}

}  // namespace clmex
