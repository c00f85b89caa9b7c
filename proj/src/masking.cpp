#include "xma/masking.hpp"

#include <algorithm>
#include <numeric>

namespace xma {

Index keep_count(Index length, double ratio) {
  if (length <= 0) throw ValueError("keep_count: token count must be positive");
  if (ratio < 0.0 || ratio >= 1.0)
    throw ValueError(cat("keep_count: masking ratio ", ratio, " outside [0,1)"));
  return static_cast<Index>(std::floor(static_cast<double>(length) * (1.0 - ratio)));
}

namespace {

// Partial Fisher-Yates: the first `take` entries are a uniform sample
// without replacement.
IndexList sample_prefix(Index length, Index take, Rng& rng) {
  IndexList pool(static_cast<size_t>(length));
  std::iota(pool.begin(), pool.end(), Index(0));
  for (Index i = 0; i < take; ++i) {
    const Index j = i + static_cast<Index>(rng.below(static_cast<uint64_t>(length - i)));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(take));
  return pool;
}

}  // namespace

IndexList sample_mask(Index length, double ratio, Rng& rng) {
  const Index keep = keep_count(length, ratio);
  if (keep < 1)
    throw ValueError(cat("sample_mask: ratio ", ratio, " keeps zero of ", length, " tokens"));
  IndexList kept = sample_prefix(length, keep, rng);
  std::sort(kept.begin(), kept.end());
  return kept;
}

MaskSet sample_multi_masks(Index length, const MaskSpec& spec, const Rng& rng) {
  if (spec.num_masks < 1) throw ValueError("sample_multi_masks: need at least one mask");
  const Index keep = keep_count(length, spec.ratio);
  if (keep < 1)
    throw ValueError(cat("sample_multi_masks: ratio ", spec.ratio, " keeps zero of ", length, " tokens"));

  MaskSet set;
  set.reserve(static_cast<size_t>(spec.num_masks));
  if (spec.mode == MaskMode::kIndependent) {
    for (int k = 0; k < spec.num_masks; ++k) {
      Rng sub = rng.derive(static_cast<uint64_t>(k));
      set.push_back(sample_mask(length, spec.ratio, sub));
    }
  } else {
    if (static_cast<Index>(spec.num_masks) * keep > length)
      throw ValueError(cat("sample_multi_masks: partition mode needs ", spec.num_masks, "*",
                           keep, " <= ", length, " tokens"));
    Rng sub = rng.derive(0);
    IndexList perm = sample_prefix(length, length, sub);
    for (int k = 0; k < spec.num_masks; ++k) {
      IndexList kept(perm.begin() + static_cast<long>(k) * keep,
                     perm.begin() + static_cast<long>(k + 1) * keep);
      std::sort(kept.begin(), kept.end());
      set.push_back(std::move(kept));
    }
  }
  return set;
}

}  // namespace xma
