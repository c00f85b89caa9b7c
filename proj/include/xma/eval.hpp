#pragma once

#include "xma/heads.hpp"
#include "xma/netpbm.hpp"
#include "xma/optim.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace xma {

enum class FeatureSource { kInstance, kAvgTokens };

inline FeatureSource parse_feature_source(const std::string& name) {
  if (name == "instance") return FeatureSource::kInstance;
  if (name == "avg-tokens") return FeatureSource::kAvgTokens;
  throw ValueError(cat("unknown feature source: ", name));
}

// Full-view (unmasked) features through the given weights; probes call this
// with the teacher. Images are center-cropped/resized to the model side.
template <typename S>
Mat<S> extract_features(const std::vector<ImageRecord>& images, Index begin, Index count,
                        const ParamStore<S>& w, const ViTConfig& cfg,
                        FeatureSource source = FeatureSource::kInstance, Index chunk = 64) {
  if (begin < 0 || count < 0 || begin + count > static_cast<Index>(images.size()))
    throw ValueError(cat("extract_features: range [", begin, ",", begin + count,
                         ") outside dataset of ", images.size()));
  const Mat<S> pe = sinusoidal_posenc<S>(cfg.tokens(), cfg.dim);
  Mat<S> features(count, cfg.dim);
  std::vector<Mat<S>> tokens;
  for (Index at = 0; at < count; at += chunk) {
    const Index n = std::min(chunk, count - at);
    tokens.assign(static_cast<size_t>(n), Mat<S>());
    std::vector<EncodeInput<S>> inputs(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
      ImageRecord view = center_crop_resize(images[static_cast<size_t>(begin + at + i)], cfg.input_side);
      tokens[static_cast<size_t>(i)] = patchify<S>(view, cfg.patch);
      inputs[static_cast<size_t>(i)].tokens = &tokens[static_cast<size_t>(i)];
    }
    EncodeResult<S> enc = encode_batch(inputs, w, cfg, pe);
    if (source == FeatureSource::kAvgTokens)
      features.middleRows(at, n) = mean_rows_segments(enc.distributed, cfg.tokens()).value();
    else
      features.middleRows(at, n) = enc.instance.value();
  }
  return features;
}

namespace detail {

template <typename S>
Mat<S> l2_normalize_rows(const Mat<S>& x) {
  Mat<S> out = x;
  for (Index r = 0; r < out.rows(); ++r) {
    const S n = out.row(r).norm();
    out.row(r) /= (n + kNormEps<S>);
  }
  return out;
}

}  // namespace detail

// Cosine-similarity kNN with unweighted majority vote. Similarity ties order
// by gallery index; vote ties go to the lowest class id, so the result is
// invariant to gallery permutation.
template <typename S>
double knn_probe(const Mat<S>& gallery, const std::vector<int>& gallery_labels,
                 const Mat<S>& queries, const std::vector<int>& query_labels, int k,
                 std::vector<int>* predictions = nullptr) {
  const Index g = gallery.rows();
  if (g == 0) throw ValueError("knn_probe: empty gallery");
  if (k < 1 || k > g) throw ValueError(cat("knn_probe: k=", k, " with gallery of ", g));
  if (static_cast<Index>(gallery_labels.size()) != g ||
      static_cast<Index>(query_labels.size()) != queries.rows())
    throw ShapeError("knn_probe: label count mismatch");

  const Mat<S> gn = detail::l2_normalize_rows(gallery);
  const Mat<S> qn = detail::l2_normalize_rows(queries);
  Mat<S> sims(queries.rows(), g);
  sims.noalias() = qn * gn.transpose();

  int num_classes = 0;
  for (int l : gallery_labels) num_classes = std::max(num_classes, l + 1);

  long correct = 0;
  std::vector<Index> order(static_cast<size_t>(g));
  std::vector<long> votes;
  if (predictions != nullptr) predictions->assign(static_cast<size_t>(queries.rows()), -1);
  for (Index r = 0; r < queries.rows(); ++r) {
    std::iota(order.begin(), order.end(), Index(0));
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
      if (sims(r, a) != sims(r, b)) return sims(r, a) > sims(r, b);
      return a < b;
    });
    votes.assign(static_cast<size_t>(num_classes), 0);
    for (int i = 0; i < k; ++i) votes[static_cast<size_t>(gallery_labels[static_cast<size_t>(order[static_cast<size_t>(i)])])]++;
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (votes[static_cast<size_t>(c)] > votes[static_cast<size_t>(best)]) best = c;
    if (predictions != nullptr) (*predictions)[static_cast<size_t>(r)] = best;
    if (best == query_labels[static_cast<size_t>(r)]) ++correct;
  }
  return queries.rows() > 0 ? static_cast<double>(correct) / static_cast<double>(queries.rows()) : 0.0;
}

struct LinearProbeConfig {
  int epochs = 30;
  double lr = 0.01;
  int batch = 256;
  double weight_decay = 0.0;
  uint64_t seed = 1;
};

// Single linear classifier on frozen features: zero init, AdamW on softmax
// cross entropy. Returns validation accuracy (argmax ties pick the lowest
// class, so an untrained classifier predicts class 0 everywhere).
template <typename S>
double linear_probe(const Mat<S>& train_features, const std::vector<int>& train_labels,
                    const Mat<S>& val_features, const std::vector<int>& val_labels,
                    int num_classes, const LinearProbeConfig& cfg) {
  const Index d = train_features.cols();
  const Index n = train_features.rows();
  ParamStore<S> params;
  params.add("w", Mat<S>::Zero(d, num_classes), 2, true);
  params.add("b", Mat<S>::Zero(1, num_classes), 1, true);
  AdamState<S> opt;
  Rng rng = Rng(cfg.seed).derive(streams::kProbe);

  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  for (int e = 0; e < cfg.epochs; ++e) {
    Rng shuffle = rng.derive(static_cast<uint64_t>(e));
    for (Index i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle.below(static_cast<uint64_t>(i + 1)))]);
    for (Index at = 0; at < n; at += cfg.batch) {
      const Index b = std::min<Index>(cfg.batch, n - at);
      Mat<S> xb(b, d);
      std::vector<int> yb(static_cast<size_t>(b));
      for (Index i = 0; i < b; ++i) {
        xb.row(i) = train_features.row(order[static_cast<size_t>(at + i)]);
        yb[static_cast<size_t>(i)] = train_labels[static_cast<size_t>(order[static_cast<size_t>(at + i)])];
      }
      Tape<S> tape;
      {
        typename Tape<S>::Scope scope(tape);
        Tensor<S> logits = linear(Tensor<S>::from_matrix(std::move(xb)), params.at("w"), params.at("b"));
        tape.backward(cross_entropy_rows(logits, yb));
      }
      adamw_step(params, opt, static_cast<S>(cfg.lr), static_cast<S>(cfg.weight_decay), false);
      params.clear_grads();
    }
  }

  Mat<S> logits = val_features * params.at("w").value();
  logits.rowwise() += RowVec<S>(params.at("b").value().row(0));
  long correct = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    if (best == val_labels[static_cast<size_t>(r)]) ++correct;
  }
  return logits.rows() > 0 ? static_cast<double>(correct) / static_cast<double>(logits.rows()) : 0.0;
}

// Head-averaged attention row of one query token, embedded on the patch grid
// (masked positions zero). maps = one layer's per-head weights for a single
// segment; for cross-attention rows the leading class-token column is
// dropped before gridding.
template <typename S>
Mat<float> attention_map_grid(const std::vector<Mat<S>>& head_maps, Index query,
                              const IndexList* kept, Index grid, bool drop_first_col = false) {
  if (head_maps.empty()) throw ValueError("attention_map_grid: no heads");
  if (query < 0 || query >= head_maps[0].rows())
    throw ValueError(cat("attention_map_grid: query ", query, " outside ", head_maps[0].rows(), " rows"));
  RowVec<S> avg = RowVec<S>::Zero(head_maps[0].cols());
  for (const auto& h : head_maps) avg += h.row(query);
  avg /= static_cast<S>(head_maps.size());
  if (drop_first_col) avg = avg.tail(avg.size() - 1).eval();

  Mat<float> out = Mat<float>::Zero(grid, grid);
  const Index n = avg.size();
  if (kept != nullptr && static_cast<Index>(kept->size()) != n)
    throw ShapeError("attention_map_grid: kept list does not match map width");
  for (Index i = 0; i < n; ++i) {
    const Index pos = kept != nullptr ? (*kept)[static_cast<size_t>(i)] : i;
    out(pos / grid, pos % grid) = static_cast<float>(avg(i));
  }
  return out;
}

struct ScoredBox {
  int x = 0, y = 0, side = 0;
  double similarity = 0.0;
};

// Fig.-3-style locality probe: candidate boxes at n_scales sizes and n_locs
// uniformly random positions each are encoded and ranked by cosine
// similarity to the query crop's instance feature.
template <typename S>
std::vector<ScoredBox> locality_retrieval(const ParamStore<S>& w, const ViTConfig& cfg,
                                          const ImageRecord& query_crop,
                                          const ImageRecord& test_image, int n_scales,
                                          int n_locs, Rng rng) {
  auto instance_of = [&](const ImageRecord& img) {
    ImageRecord view = bilinear_resize(img, cfg.input_side, cfg.input_side);
    Mat<S> tokens = patchify<S>(view, cfg.patch);
    EncodeResult<S> enc = encode_instance(tokens, nullptr, w, cfg);
    RowVec<S> f = enc.instance.value().row(0);
    return RowVec<S>(f / (f.norm() + kNormEps<S>));
  };
  const RowVec<S> query_feat = instance_of(query_crop);

  const int base = std::min(test_image.height, test_image.width);
  std::vector<ScoredBox> boxes;
  for (int si = 0; si < n_scales; ++si) {
    const double frac = n_scales == 1 ? 0.6 : 0.3 + 0.6 * static_cast<double>(si) / (n_scales - 1);
    int side = std::max(cfg.patch, static_cast<int>(std::lround(frac * base)));
    side = std::min(side, base);
    for (int li = 0; li < n_locs; ++li) {
      ScoredBox box;
      box.side = side;
      box.x = static_cast<int>(rng.below(static_cast<uint64_t>(test_image.width - side + 1)));
      box.y = static_cast<int>(rng.below(static_cast<uint64_t>(test_image.height - side + 1)));
      ImageRecord patch = crop(test_image, ViewGeometry{box.x, box.y, side, side, false});
      box.similarity = static_cast<double>(query_feat.dot(instance_of(patch)));
      boxes.push_back(box);
    }
  }
  std::sort(boxes.begin(), boxes.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    if (a.side != b.side) return a.side < b.side;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  return boxes;
}

}  // namespace xma
