#pragma once

// Single-matrix convenience forms of the transformer block computations.
// Thin wrappers over the tape builders; tests and the bindings use these,
// the model uses the builders directly.

#include "muxvit/model.hpp"

namespace muxvit {

template <class T>
struct MsaWeights {
  Tensor<T> wqkv, bqkv, wproj, bproj;
};

template <class T>
struct MlpWeights {
  Tensor<T> w1, b1, w2, b2;
};

template <class T>
struct MsaTransform {
  Tensor<T> f1, f2;  // [M x M] each
};

template <class T>
struct MsaForwardOut {
  Tensor<T> out;            // [N x d]
  Tensor<T> q, k, v;        // [N x d]
  Tensor<T> logits, attn;   // [1, M, N, N]
};

template <class T>
MsaForwardOut<T> msa_forward_impl(const Tensor<T>& z, const MsaWeights<T>& w, int heads,
                                  const MsaTransform<T>* tf) {
  require(z.shape.rank == 2, "msa input must be [N x d]");
  const int N = z.shape[0], d = z.shape[1];
  if (d % heads != 0)
    throw ShapeError("embed dim " + std::to_string(d) + " not divisible by heads " +
                     std::to_string(heads));
  Tape<T> t;
  t.recording = false;
  MsaWeightVars<T> wv{t.constant(w.wqkv), t.constant(w.bqkv), t.constant(w.wproj),
                      t.constant(w.bproj)};
  std::optional<Var> f1, f2;
  if (tf) {
    f1 = t.constant(tf->f1);
    f2 = t.constant(tf->f2);
  }
  AttnDims dims{1, N, heads, d / heads};
  MsaOut<T> o = msa_block(t, t.constant(z), wv, dims, f1, f2);
  MsaForwardOut<T> r;
  r.out = t.val(o.out);
  const Tensor<T>& qkv = t.val(o.qkv);
  r.q = col_slice(qkv, 0, d);
  r.k = col_slice(qkv, d, 2 * d);
  r.v = col_slice(qkv, 2 * d, 3 * d);
  r.logits = t.val(o.logits);
  r.attn = t.val(o.attn);
  return r;
}

template <class T>
MsaForwardOut<T> msa_forward(const Tensor<T>& z, const MsaWeights<T>& w, int heads) {
  return msa_forward_impl(z, w, heads, static_cast<const MsaTransform<T>*>(nullptr));
}

template <class T>
MsaForwardOut<T> msa_transformed_forward(const Tensor<T>& z, const MsaWeights<T>& w,
                                         const MsaTransform<T>& tf, int heads) {
  const int M = heads;
  require(tf.f1.shape == Shape({M, M}) && tf.f2.shape == Shape({M, M}),
          "transform kernels must be heads x heads");
  return msa_forward_impl(z, w, heads, &tf);
}

template <class T>
Tensor<T> mlp_forward(const Tensor<T>& y, const MlpWeights<T>& w) {
  Tape<T> t;
  t.recording = false;
  MlpWeightVars<T> wv{t.constant(w.w1), t.constant(w.b1), t.constant(w.w2), t.constant(w.b2)};
  Var out = mlp_block(t, t.constant(y), wv, std::nullopt, 1, y.shape[0], 1);
  return t.val(out);
}

// Tokens reshaped row-major onto an h x w grid for the depth-wise transform.
template <class T>
Tensor<T> mlp_transformed_forward(const Tensor<T>& y, const MlpWeights<T>& w,
                                  const Tensor<T>& kernels, int grid_h, int grid_w) {
  if (y.shape[0] != grid_h * grid_w)
    throw ConfigError("token count " + std::to_string(y.shape[0]) + " does not fill a " +
                      std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  Tape<T> t;
  t.recording = false;
  MlpWeightVars<T> wv{t.constant(w.w1), t.constant(w.b1), t.constant(w.w2), t.constant(w.b2)};
  Var out = mlp_block(t, t.constant(y), wv, std::make_optional(t.constant(kernels)), 1, grid_h,
                      grid_w);
  return t.val(out);
}

// Linear patch projection plus learned positional embedding, one image.
template <class T>
Tensor<T> patch_embed(const Tensor<T>& image, const ModelConfig& cfg, const Tensor<T>& proj_w,
                      const Tensor<T>& proj_b, const Tensor<T>& pos) {
  cfg.validate();
  Tape<T> t;
  t.recording = false;
  Tensor<T> patches = patchify(cfg, image, 1);
  Var z = op::linear(t, t.constant(std::move(patches)), t.constant(proj_w), t.constant(proj_b));
  z = op::add_pos(t, z, t.constant(pos), 1);
  return t.val(z);
}

}  // namespace muxvit
