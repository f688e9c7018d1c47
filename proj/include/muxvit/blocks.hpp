#pragma once

// Transformer block pieces, built on the tape. The multiplexed variants add
// head mixing around the attention softmax and a depth-wise convolution on
// the MLP input; with identity mixes and delta kernels they follow the
// same arithmetic path as the vanilla blocks.

#include <cmath>
#include <optional>

#include "muxvit/ops.hpp"

namespace muxvit {

template <class T>
struct MsaWeightVars {
  Var wqkv, bqkv, wproj, bproj;  // wqkv: [d x 3d], proj: [d x d]
};

template <class T>
struct MlpWeightVars {
  Var w1, b1, w2, b2;  // [d x d'], [d'], [d' x d], [d]
};

struct AttnDims {
  int batch = 1;
  int tokens = 0;   // N
  int heads = 1;    // M
  int head_dim = 0; // d_h = d / M
  int dim() const { return heads * head_dim; }
};

template <class T>
struct MsaOut {
  Var out;     // [B*N x d]
  Var qkv;     // [B*N x 3d]: Q | K | V, heads concatenated within each block
  Var logits;  // [B,M,N,N] softmax input (post-mix when transformed)
  Var attn;    // [B,M,N,N] row-stochastic
};

// Attention with optional pre/post-softmax head mixing (f2 before, f1 after).
template <class T>
MsaOut<T> msa_block(Tape<T>& t, Var x, const MsaWeightVars<T>& w, const AttnDims& dims,
                    std::optional<Var> f1 = std::nullopt, std::optional<Var> f2 = std::nullopt) {
  const int d = dims.dim();
  require(t.val(x).shape == Shape({dims.batch * dims.tokens, d}), "msa input shape");
  MsaOut<T> r;
  r.qkv = op::linear(t, x, w.wqkv, w.bqkv);
  const T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dims.head_dim)));
  Var logits = op::pair_logits(t, r.qkv, dims.batch, dims.tokens, dims.heads, dims.head_dim,
                               /*q_off=*/0, /*k_off=*/d, scl);
  if (f2) logits = op::mix_heads(t, *f2, logits);
  r.logits = logits;
  r.attn = op::softmax_rows(t, logits);
  Var applied = r.attn;
  if (f1) applied = op::mix_heads(t, *f1, r.attn);
  Var heads_out = op::attn_apply(t, applied, r.qkv, /*v_off=*/2 * d, dims.head_dim);
  r.out = op::linear(t, heads_out, w.wproj, w.bproj);
  return r;
}

// Two-layer MLP with GELU; optional depth-wise convolution on the input
// (tokens viewed as a grid_h x grid_w grid).
template <class T>
Var mlp_block(Tape<T>& t, Var y, const MlpWeightVars<T>& w, std::optional<Var> conv_kernels,
              int batch, int grid_h, int grid_w) {
  Var in = y;
  if (conv_kernels) in = op::depthwise_conv2d(t, y, *conv_kernels, batch, grid_h, grid_w);
  Var mid = op::linear(t, in, w.w1, w.b1);
  Var act = op::gelu(t, mid);
  return op::linear(t, act, w.w2, w.b2);
}

}  // namespace muxvit
