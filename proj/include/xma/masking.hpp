#pragma once

#include "xma/ops.hpp"
#include "xma/rng.hpp"

#include <vector>

namespace xma {

enum class MaskMode { kIndependent, kPartition };

struct MaskSpec {
  double ratio = 0.8;
  int num_masks = 1;
  MaskMode mode = MaskMode::kIndependent;
};

// K kept-index lists for one image, each sorted ascending.
using MaskSet = std::vector<IndexList>;

// floor(L * (1 - ratio)); the advertised ratio is a lower bound on masking.
Index keep_count(Index length, double ratio);

// Uniform sample of keep_count distinct indices from [0, length), sorted
// ascending to preserve spatial order.
IndexList sample_mask(Index length, double ratio, Rng& rng);

// K masks drawn from disjoint substreams rng.derive(k). Independent mode
// lets masks overlap; partition mode splits one random permutation into K
// disjoint chunks (requires K * keep_count <= length).
MaskSet sample_multi_masks(Index length, const MaskSpec& spec, const Rng& rng);

// Row selection of pre-encoded tokens; gradient w.r.t. dropped rows is zero.
template <typename S>
Tensor<S> apply_mask(const Tensor<S>& tokens, const IndexList& kept) {
  return gather_rows(tokens, kept);
}

}  // namespace xma
