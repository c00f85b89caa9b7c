#pragma once

#include "xma/augment.hpp"
#include "xma/masking.hpp"
#include "xma/ops.hpp"
#include "xma/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace xma {

constexpr double kLayerNormEps = 1e-6;

enum class Aggregation { kCaitCls, kVitCls, kAvgPool };

inline Aggregation parse_aggregation(const std::string& name) {
  if (name == "cait-cls") return Aggregation::kCaitCls;
  if (name == "vit-cls") return Aggregation::kVitCls;
  if (name == "avg-pool") return Aggregation::kAvgPool;
  throw ValueError(cat("unknown aggregation mode: ", name));
}

inline std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::kCaitCls: return "cait-cls";
    case Aggregation::kVitCls: return "vit-cls";
    default: return "avg-pool";
  }
}

struct ViTConfig {
  int patch = 4;
  int input_side = 32;
  int dim = 96;
  int heads = 4;
  int depth = 6;
  int cross_depth = 2;   // class-attention blocks
  double layer_scale = 0.1;  // init value, cross blocks only
  int mlp_ratio = 4;
  Aggregation aggregation = Aggregation::kCaitCls;

  Index grid() const { return input_side / patch; }
  Index tokens() const { return grid() * grid(); }
  Index patch_dim() const { return 3 * patch * patch; }
  Index mlp_hidden() const { return static_cast<Index>(dim) * mlp_ratio; }

  void check() const {
    if (dim % heads != 0) throw ValueError(cat("dim ", dim, " not divisible by heads ", heads));
    if (input_side % patch != 0)
      throw ValueError(cat("input side ", input_side, " not divisible by patch ", patch));
    if (aggregation == Aggregation::kCaitCls && cross_depth < 1)
      throw ValueError("cait-cls aggregation needs cross_depth >= 1");
  }
};

struct HeadConfig {
  int hidden = 512;
  int out = 64;
  int proj_layers = 3;
  int pred_layers = 2;
};

// Named parameter set with deterministic (lexicographic) iteration order.
template <typename S>
class ParamStore {
 public:
  Tensor<S>& add(const std::string& name, Mat<S> value, int rank, bool requires_grad) {
    auto [it, fresh] = map_.emplace(name, Tensor<S>::from_matrix(std::move(value), requires_grad, rank));
    if (!fresh) throw ValueError(cat("duplicate parameter name: ", name));
    return it->second;
  }

  const Tensor<S>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ValueError(cat("missing parameter: ", name));
    return it->second;
  }

  Tensor<S>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ValueError(cat("missing parameter: ", name));
    return it->second;
  }

  // Insert-or-replace the handle itself (shared storage, not a copy); used
  // to build stores over existing leaves, e.g. for gradient checking.
  void put(const std::string& name, const Tensor<S>& t) { map_[name] = t; }

  bool contains(const std::string& name) const { return map_.count(name) != 0; }
  size_t size() const { return map_.size(); }

  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }
  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }

  void clear_grads() {
    for (auto& [name, t] : map_) t.clear_grad();
  }

  Index total_elements() const {
    Index n = 0;
    for (const auto& [name, t] : map_) n += t.size();
    return n;
  }

 private:
  std::map<std::string, Tensor<S>> map_;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------
// Weight matrices: truncated normal (sigma 0.02, +-2 sigma). Biases and
// LayerNorm beta: zero. LayerNorm gamma: one. Layer scale: the configured
// init. Class token: plain normal, sigma 0.02. Every parameter draws from a
// stream derived from its own name, so init is order-independent.

namespace detail {

template <typename S>
Mat<S> trunc_normal_mat(Index r, Index c, double sigma, Rng rng) {
  Mat<S> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.trunc_normal(sigma));
  return m;
}

template <typename S>
void add_weight(ParamStore<S>& w, const Rng& root, const std::string& name, Index r, Index c) {
  w.add(name, trunc_normal_mat<S>(r, c, 0.02, root.derive(hash_name(name))), 2, true);
}

template <typename S>
void add_vector(ParamStore<S>& w, const std::string& name, Index d, S fill) {
  w.add(name, Mat<S>::Constant(1, d, fill), 1, true);
}

template <typename S>
void add_layer_norm(ParamStore<S>& w, const std::string& prefix, Index d) {
  add_vector(w, prefix + ".g", d, S(1));
  add_vector(w, prefix + ".b", d, S(0));
}

template <typename S>
void add_mlp_head_params(ParamStore<S>& w, const Rng& root, const std::string& prefix,
                         Index in, Index hidden, Index out, int layers) {
  Index cur = in;
  for (int i = 0; i < layers; ++i) {
    const std::string base = cat(prefix, ".", i);
    add_weight(w, root, base + ".w", cur, hidden);
    add_vector(w, base + ".b", hidden, S(0));
    add_layer_norm(w, base + ".ln", hidden);
    cur = hidden;
  }
  add_weight(w, root, prefix + ".out.w", cur, out);
  add_vector(w, prefix + ".out.b", out, S(0));
}

}  // namespace detail

template <typename S>
void init_encoder_params(ParamStore<S>& w, const ViTConfig& cfg, const Rng& root) {
  cfg.check();
  const Index d = cfg.dim;
  const Index hd = cfg.mlp_hidden();
  detail::add_weight(w, root, "embed.w", cfg.patch_dim(), d);
  detail::add_vector(w, "embed.b", d, S(0));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string base = cat("blocks.", i);
    detail::add_layer_norm(w, base + ".ln1", d);
    // No key bias anywhere: a constant shift of the keys adds a per-row
    // constant to the attention scores, which the softmax cancels, so the
    // parameter would be a frozen zero-gradient dead weight.
    detail::add_weight(w, root, base + ".attn.wqkv", d, 3 * d);
    detail::add_vector(w, base + ".attn.bq", d, S(0));
    detail::add_vector(w, base + ".attn.bv", d, S(0));
    detail::add_weight(w, root, base + ".attn.wo", d, d);
    detail::add_vector(w, base + ".attn.bo", d, S(0));
    detail::add_layer_norm(w, base + ".ln2", d);
    detail::add_weight(w, root, base + ".mlp.w1", d, hd);
    detail::add_vector(w, base + ".mlp.b1", hd, S(0));
    detail::add_weight(w, root, base + ".mlp.w2", hd, d);
    detail::add_vector(w, base + ".mlp.b2", d, S(0));
  }
  detail::add_layer_norm(w, "norm", d);

  {
    Rng r = root.derive(hash_name("cls"));
    Mat<S> cls(1, d);
    for (Index i = 0; i < d; ++i) cls(0, i) = static_cast<S>(0.02 * r.normal());
    w.add("cls", std::move(cls), 1, true);
  }

  for (int i = 0; i < cfg.cross_depth; ++i) {
    const std::string base = cat("cross.", i);
    detail::add_layer_norm(w, base + ".ln1", d);
    for (const char* p : {"q", "k", "v", "o"}) {
      detail::add_weight(w, root, cat(base, ".w", p), d, d);
      if (p[0] != 'k') detail::add_vector(w, cat(base, ".b", p), d, S(0));
    }
    detail::add_vector(w, base + ".ls1", d, static_cast<S>(cfg.layer_scale));
    detail::add_layer_norm(w, base + ".ln2", d);
    detail::add_weight(w, root, base + ".mlp.w1", d, hd);
    detail::add_vector(w, base + ".mlp.b1", hd, S(0));
    detail::add_weight(w, root, base + ".mlp.w2", hd, d);
    detail::add_vector(w, base + ".mlp.b2", d, S(0));
    detail::add_vector(w, base + ".ls2", d, static_cast<S>(cfg.layer_scale));
  }
}

template <typename S>
void init_head_params(ParamStore<S>& w, const ViTConfig& vit, const HeadConfig& head, const Rng& root) {
  detail::add_mlp_head_params(w, root, "proj", vit.dim, head.hidden, head.out, head.proj_layers);
  detail::add_mlp_head_params(w, root, "pred", head.out, head.hidden, head.out, head.pred_layers);
}

// Teacher = encoder + projector (no predictor), gradients disabled.
template <typename S>
ParamStore<S> make_teacher_copy(const ParamStore<S>& student) {
  ParamStore<S> teacher;
  for (const auto& [name, t] : student) {
    if (name.rfind("pred.", 0) == 0) continue;
    teacher.add(name, Mat<S>(t.value()), t.rank(), false);
  }
  return teacher;
}

// ---------------------------------------------------------------------------
// Forward passes (segment-batched: several equal-length token sequences
// stacked row-wise; a single image is the one-segment case)
// ---------------------------------------------------------------------------

template <typename S>
struct AttnMaps {
  // [layer][segment*heads + head], rows sum to 1
  std::vector<std::vector<Mat<S>>> self_attn;
  std::vector<std::vector<Mat<S>>> cross_attn;
};

template <typename S>
Tensor<S> patch_embed(const Tensor<S>& patches, const Tensor<S>& w, const Tensor<S>& b) {
  return linear(patches, w, b);
}

template <typename S>
Tensor<S> vit_forward(Tensor<S> x, const ParamStore<S>& w, const ViTConfig& cfg,
                      Index seg_len, AttnMaps<S>* maps = nullptr) {
  const Index d = cfg.dim;
  const S eps = static_cast<S>(kLayerNormEps);
  const S att_scale = S(1) / std::sqrt(static_cast<S>(d / cfg.heads));
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string base = cat("blocks.", i);
    Tensor<S> h = layer_norm(x, w.at(base + ".ln1.g"), w.at(base + ".ln1.b"), eps);
    Tensor<S> qkv = matmul(h, w.at(base + ".attn.wqkv"));
    Tensor<S> q = add_rowvec(slice_cols(qkv, 0, d), w.at(base + ".attn.bq"));
    Tensor<S> k = slice_cols(qkv, d, d);
    Tensor<S> v = add_rowvec(slice_cols(qkv, 2 * d, d), w.at(base + ".attn.bv"));
    std::vector<Mat<S>>* sink = nullptr;
    if (maps != nullptr) {
      maps->self_attn.emplace_back();
      sink = &maps->self_attn.back();
    }
    Tensor<S> a = attention(q, k, v, cfg.heads, seg_len, seg_len, att_scale, sink);
    x = add(x, linear(a, w.at(base + ".attn.wo"), w.at(base + ".attn.bo")));
    Tensor<S> h2 = layer_norm(x, w.at(base + ".ln2.g"), w.at(base + ".ln2.b"), eps);
    Tensor<S> m = linear(gelu(linear(h2, w.at(base + ".mlp.w1"), w.at(base + ".mlp.b1"))),
                         w.at(base + ".mlp.w2"), w.at(base + ".mlp.b2"));
    x = add(x, m);
  }
  return layer_norm(x, w.at("norm.g"), w.at("norm.b"), eps);
}

// CaiT-style aggregation: the class token is the only query; patch tokens are
// read (keys/values) but never written. cls_rows carries one class-token row
// per segment.
template <typename S>
Tensor<S> class_attention_forward(const Tensor<S>& patch_tokens, Tensor<S> cls_rows,
                                  const ParamStore<S>& w, const ViTConfig& cfg,
                                  Index seg_len, AttnMaps<S>* maps = nullptr) {
  const Index d = cfg.dim;
  const Index n_seg = cls_rows.rows();
  if (patch_tokens.rows() != n_seg * seg_len)
    throw ShapeError("class_attention_forward: patch rows do not match segments");
  const S eps = static_cast<S>(kLayerNormEps);
  const S att_scale = S(1) / std::sqrt(static_cast<S>(d / cfg.heads));

  IndexList cls_positions(static_cast<size_t>(n_seg));
  for (Index s = 0; s < n_seg; ++s) cls_positions[static_cast<size_t>(s)] = s * (seg_len + 1);

  for (int i = 0; i < cfg.cross_depth; ++i) {
    const std::string base = cat("cross.", i);
    Tensor<S> cat_tokens = concat_segments(cls_rows, patch_tokens, 1, seg_len);
    Tensor<S> ncat = layer_norm(cat_tokens, w.at(base + ".ln1.g"), w.at(base + ".ln1.b"), eps);
    Tensor<S> q_rows = gather_rows(ncat, cls_positions);
    Tensor<S> q = linear(q_rows, w.at(base + ".wq"), w.at(base + ".bq"));
    Tensor<S> k = matmul(ncat, w.at(base + ".wk"));
    Tensor<S> v = linear(ncat, w.at(base + ".wv"), w.at(base + ".bv"));
    std::vector<Mat<S>>* sink = nullptr;
    if (maps != nullptr) {
      maps->cross_attn.emplace_back();
      sink = &maps->cross_attn.back();
    }
    Tensor<S> a = attention(q, k, v, cfg.heads, Index(1), seg_len + 1, att_scale, sink);
    Tensor<S> o = linear(a, w.at(base + ".wo"), w.at(base + ".bo"));
    cls_rows = add(cls_rows, mul_rowvec(o, w.at(base + ".ls1")));
    Tensor<S> h = layer_norm(cls_rows, w.at(base + ".ln2.g"), w.at(base + ".ln2.b"), eps);
    Tensor<S> m = linear(gelu(linear(h, w.at(base + ".mlp.w1"), w.at(base + ".mlp.b1"))),
                         w.at(base + ".mlp.w2"), w.at(base + ".mlp.b2"));
    cls_rows = add(cls_rows, mul_rowvec(m, w.at(base + ".ls2")));
  }
  return cls_rows;
}

template <typename S>
struct EncodeInput {
  const Mat<S>* tokens = nullptr;   // L x patch_dim raw patch features
  const IndexList* kept = nullptr;  // null = full view
};

template <typename S>
struct EncodeResult {
  Tensor<S> instance;     // n_seg x dim
  Tensor<S> distributed;  // (n_seg * n) x dim, post final LayerNorm
  AttnMaps<S> maps;
};

// Embeds, adds the (precomputed, full-grid) positional table, applies masks,
// runs the backbone and the configured aggregation. Gathering kept rows
// before the per-token embed is algebraically identical to masking after it
// and skips the dropped rows' work.
template <typename S>
EncodeResult<S> encode_batch(const std::vector<EncodeInput<S>>& inputs, const ParamStore<S>& w,
                             const ViTConfig& cfg, const Mat<S>& posenc_table,
                             bool want_maps = false) {
  if (inputs.empty()) throw ValueError("encode_batch: no inputs");
  const Index full = cfg.tokens();
  const Index pd = cfg.patch_dim();
  if (posenc_table.rows() != full || posenc_table.cols() != cfg.dim)
    throw ShapeError("encode_batch: positional table has wrong shape");

  const Index n = inputs[0].kept != nullptr ? static_cast<Index>(inputs[0].kept->size()) : full;
  const Index n_seg = static_cast<Index>(inputs.size());
  Mat<S> raw(n_seg * n, pd);
  Mat<S> pos(n_seg * n, cfg.dim);
  for (Index s = 0; s < n_seg; ++s) {
    const EncodeInput<S>& in = inputs[static_cast<size_t>(s)];
    if (in.tokens == nullptr || in.tokens->rows() != full || in.tokens->cols() != pd)
      throw ShapeError(cat("encode_batch: input ", s, " is not ", full, "x", pd));
    const Index len = in.kept != nullptr ? static_cast<Index>(in.kept->size()) : full;
    if (len != n) throw ShapeError("encode_batch: mixed kept-token counts in one batch");
    if (in.kept != nullptr) {
      for (Index r = 0; r < n; ++r) {
        const Index src = (*in.kept)[static_cast<size_t>(r)];
        if (src < 0 || src >= full) throw ValueError("encode_batch: kept index out of range");
        raw.row(s * n + r) = in.tokens->row(src);
        pos.row(s * n + r) = posenc_table.row(src);
      }
    } else {
      raw.middleRows(s * n, n) = *in.tokens;
      pos.middleRows(s * n, n) = posenc_table;
    }
  }

  Tensor<S> x = add(patch_embed(Tensor<S>::from_matrix(std::move(raw)), w.at("embed.w"), w.at("embed.b")),
                    Tensor<S>::from_matrix(std::move(pos)));

  EncodeResult<S> result;
  AttnMaps<S>* maps = want_maps ? &result.maps : nullptr;

  switch (cfg.aggregation) {
    case Aggregation::kVitCls: {
      // Appendix-style comparison mode: learned class token prepended to the
      // ViT input (no positional encoding; it has no grid position).
      Tensor<S> cls_rows = repeat_rows(w.at("cls"), n_seg);
      Tensor<S> seq = concat_segments(cls_rows, x, 1, n);
      Tensor<S> out = vit_forward(seq, w, cfg, n + 1, maps);
      IndexList cls_pos(static_cast<size_t>(n_seg));
      IndexList patch_pos;
      patch_pos.reserve(static_cast<size_t>(n_seg * n));
      for (Index s = 0; s < n_seg; ++s) {
        cls_pos[static_cast<size_t>(s)] = s * (n + 1);
        for (Index r = 0; r < n; ++r) patch_pos.push_back(s * (n + 1) + 1 + r);
      }
      result.instance = gather_rows(out, cls_pos);
      result.distributed = gather_rows(out, patch_pos);
      break;
    }
    case Aggregation::kAvgPool: {
      Tensor<S> out = vit_forward(x, w, cfg, n, maps);
      result.distributed = out;
      result.instance = mean_rows_segments(out, n);
      break;
    }
    case Aggregation::kCaitCls: {
      Tensor<S> out = vit_forward(x, w, cfg, n, maps);
      result.distributed = out;
      Tensor<S> cls_rows = repeat_rows(w.at("cls"), n_seg);
      result.instance = class_attention_forward(out, cls_rows, w, cfg, n, maps);
      break;
    }
  }
  return result;
}

// Single-view convenience: full view when kept == nullptr.
template <typename S>
EncodeResult<S> encode_instance(const Mat<S>& tokens, const IndexList* kept,
                                const ParamStore<S>& w, const ViTConfig& cfg,
                                bool want_maps = false) {
  Mat<S> pe = sinusoidal_posenc<S>(cfg.tokens(), cfg.dim);
  std::vector<EncodeInput<S>> inputs(1);
  inputs[0].tokens = &tokens;
  inputs[0].kept = kept;
  return encode_batch(inputs, w, cfg, pe, want_maps);
}

}  // namespace xma
