#pragma once

#include "xma/encoder.hpp"
#include "xma/losses.hpp"

namespace xma {

// BYOL-style MLP head: [Linear -> LayerNorm -> GeLU] x layers, then a final
// Linear. No BatchNorm anywhere. Rows are independent samples.
template <typename S>
Tensor<S> mlp_head_forward(Tensor<S> x, const ParamStore<S>& w, const std::string& prefix,
                           int layers) {
  const S eps = static_cast<S>(kLayerNormEps);
  for (int i = 0; i < layers; ++i) {
    const std::string base = cat(prefix, ".", i);
    x = linear(x, w.at(base + ".w"), w.at(base + ".b"));
    x = layer_norm(x, w.at(base + ".ln.g"), w.at(base + ".ln.b"), eps);
    x = gelu(x);
  }
  return linear(x, w.at(prefix + ".out.w"), w.at(prefix + ".out.b"));
}

template <typename S>
Tensor<S> projector_forward(const Tensor<S>& instance, const ParamStore<S>& w,
                            const HeadConfig& cfg) {
  return mlp_head_forward(instance, w, "proj", cfg.proj_layers);
}

// Student branch only.
template <typename S>
Tensor<S> predictor_forward(const Tensor<S>& z, const ParamStore<S>& w, const HeadConfig& cfg) {
  return mlp_head_forward(z, w, "pred", cfg.pred_layers);
}

}  // namespace xma
