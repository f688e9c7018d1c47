#pragma once

// The vision transformer itself: parameter construction (vanilla or
// weight-shared with per-layer transformations), batched forward on the
// tape, activation capture, and parameter accounting.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "muxvit/blocks.hpp"
#include "muxvit/model_config.hpp"
#include "muxvit/param_store.hpp"
#include "muxvit/rng.hpp"
#include "muxvit/sharing.hpp"

namespace muxvit {

template <class T>
struct Model {
  ModelConfig cfg;
  SharingPlan plan;
  TransformConfig transforms;
  ParamStore<T> params;

  struct LayerBinding {
    int ln1_g = -1, ln1_b = -1, ln2_g = -1, ln2_b = -1;            // per-layer
    int wqkv = -1, bqkv = -1, wproj = -1, bproj = -1;              // group-owned
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;                        // group-owned
    int f1 = -1, f2 = -1, conv = -1;                               // per-layer transforms
  };
  std::vector<std::vector<LayerBinding>> layers;  // [stage][layer]
  struct MergeBinding {
    int w = -1, b = -1;
  };
  std::vector<MergeBinding> merges;  // indexed by stage; stage 0 unused
  int patch_w = -1, patch_b = -1, pos_embed = -1;
  int final_g = -1, final_b = -1, head_w = -1, head_b = -1;

  int total_layers() const { return cfg.total_layers(); }
};

namespace detail {

inline std::string group_tag(int stage, int first_layer) {
  return "s" + std::to_string(stage) + ".g" + std::to_string(first_layer);
}
inline std::string layer_tag(int stage, int layer) {
  return "s" + std::to_string(stage) + ".l" + std::to_string(layer);
}

template <class T>
Tensor<T> normal_init(Rng& rng, Shape shape, double std_dev) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(rng.next_normal() * std_dev);
  return t;
}

template <class T>
Tensor<T> identity_matrix(int n) {
  Tensor<T> t({n, n});
  for (int i = 0; i < n; ++i) t(i, i) = T(1);
  return t;
}

template <class T>
Tensor<T> delta_kernel(int k, int d) {
  Tensor<T> t({k, k, d});
  const int c = k / 2;
  for (int j = 0; j < d; ++j) t(c, c, j) = T(1);
  return t;
}

}  // namespace detail

// Builds a model with the given sharing plan and transformations. Shared
// block tensors are created once per group; LayerNorms and transformation
// parameters are per-layer. F1/F2 start at identity and depth-wise kernels
// at delta, so a freshly built compact model computes the plain shared
// forward.
template <class T>
Model<T> build_model(const ModelConfig& cfg, const SharingPlan& plan, const TransformConfig& tf,
                     std::uint64_t seed) {
  cfg.validate();
  tf.validate();
  Model<T> m;
  m.cfg = cfg;
  m.plan = plan;
  m.transforms = tf;
  Rng rng(seed);

  const int d0 = cfg.stages[0].embed_dim;
  m.patch_w = m.params.add("patch_embed.w",
                           detail::normal_init<T>(rng, {cfg.patch_pixels(), d0}, 0.02));
  m.patch_b = m.params.add("patch_embed.b", Tensor<T>({d0}));
  m.pos_embed = m.params.add("pos_embed", detail::normal_init<T>(rng, {cfg.num_patches(), d0}, 0.02));

  m.layers.resize(cfg.stages.size());
  m.merges.resize(cfg.stages.size());
  for (int s = 0; s < static_cast<int>(cfg.stages.size()); ++s) {
    const StageConfig& st = cfg.stages[static_cast<std::size_t>(s)];
    const int d = st.embed_dim, dp = st.mlp_dim, M = st.num_heads;
    if (s > 0 && st.merge_tokens) {
      const int d_prev = cfg.stages[static_cast<std::size_t>(s - 1)].embed_dim;
      m.merges[static_cast<std::size_t>(s)].w = m.params.add(
          "s" + std::to_string(s) + ".merge.w", detail::normal_init<T>(rng, {4 * d_prev, d}, 0.02));
      m.merges[static_cast<std::size_t>(s)].b =
          m.params.add("s" + std::to_string(s) + ".merge.b", Tensor<T>({d}));
    }

    struct GroupIdx {
      int wqkv, bqkv, wproj, bproj, w1, b1, w2, b2;
    };
    std::vector<GroupIdx> group_idx;
    std::vector<int> group_of_layer(static_cast<std::size_t>(st.num_layers), -1);
    for (const auto& g : plan.groups) {
      if (g.stage != s) continue;
      const std::string tag = detail::group_tag(s, g.first_layer);
      GroupIdx gi;
      gi.wqkv = m.params.add(tag + ".msa.wqkv", detail::normal_init<T>(rng, {d, 3 * d}, 0.02));
      gi.bqkv = m.params.add(tag + ".msa.bqkv", Tensor<T>({3 * d}));
      gi.wproj = m.params.add(tag + ".msa.wproj", detail::normal_init<T>(rng, {d, d}, 0.02));
      gi.bproj = m.params.add(tag + ".msa.bproj", Tensor<T>({d}));
      gi.w1 = m.params.add(tag + ".mlp.w1", detail::normal_init<T>(rng, {d, dp}, 0.02));
      gi.b1 = m.params.add(tag + ".mlp.b1", Tensor<T>({dp}));
      gi.w2 = m.params.add(tag + ".mlp.w2", detail::normal_init<T>(rng, {dp, d}, 0.02));
      gi.b2 = m.params.add(tag + ".mlp.b2", Tensor<T>({d}));
      group_idx.push_back(gi);
      for (int l = g.first_layer; l < g.first_layer + g.count; ++l) {
        if (l >= st.num_layers)
          throw ConfigError("sharing plan exceeds stage " + std::to_string(s) + " depth");
        group_of_layer[static_cast<std::size_t>(l)] = static_cast<int>(group_idx.size()) - 1;
      }
    }

    auto& stage_layers = m.layers[static_cast<std::size_t>(s)];
    stage_layers.resize(static_cast<std::size_t>(st.num_layers));
    for (int l = 0; l < st.num_layers; ++l) {
      if (group_of_layer[static_cast<std::size_t>(l)] < 0)
        throw ConfigError("sharing plan does not cover layer " + std::to_string(l) + " of stage " +
                          std::to_string(s));
      const GroupIdx& gi = group_idx[static_cast<std::size_t>(group_of_layer[static_cast<std::size_t>(l)])];
      const std::string tag = detail::layer_tag(s, l);
      typename Model<T>::LayerBinding lb;
      lb.wqkv = gi.wqkv;
      lb.bqkv = gi.bqkv;
      lb.wproj = gi.wproj;
      lb.bproj = gi.bproj;
      lb.w1 = gi.w1;
      lb.b1 = gi.b1;
      lb.w2 = gi.w2;
      lb.b2 = gi.b2;
      lb.ln1_g = m.params.add(tag + ".ln1.g", Tensor<T>({d}, std::vector<T>(d, T(1))));
      lb.ln1_b = m.params.add(tag + ".ln1.b", Tensor<T>({d}));
      lb.ln2_g = m.params.add(tag + ".ln2.g", Tensor<T>({d}, std::vector<T>(d, T(1))));
      lb.ln2_b = m.params.add(tag + ".ln2.b", Tensor<T>({d}));
      if (tf.msa) {
        lb.f1 = m.params.add(tag + ".t.f1", detail::identity_matrix<T>(M));
        lb.f2 = m.params.add(tag + ".t.f2", detail::identity_matrix<T>(M));
      }
      if (tf.mlp) lb.conv = m.params.add(tag + ".t.conv", detail::delta_kernel<T>(tf.kernel, d));
      stage_layers[static_cast<std::size_t>(l)] = lb;
    }
  }

  const int d_last = cfg.stages.back().embed_dim;
  m.final_g = m.params.add("final_norm.g", Tensor<T>({d_last}, std::vector<T>(d_last, T(1))));
  m.final_b = m.params.add("final_norm.b", Tensor<T>({d_last}));
  m.head_w = m.params.add("head.w", detail::normal_init<T>(rng, {d_last, cfg.num_classes}, 0.02));
  m.head_b = m.params.add("head.b", Tensor<T>({cfg.num_classes}));
  return m;
}

template <class T>
Model<T> build_vanilla_model(const ModelConfig& cfg, std::uint64_t seed) {
  return build_model<T>(cfg, make_sharing_plan(cfg, ShareMode::none), TransformConfig{}, seed);
}

// Phase 1: compact model seeded from a teacher. Shared tensors copy the
// first layer of each group; per-layer LayerNorms copy their own teacher
// layer; transformations start at identity/delta.
template <class T>
Model<T> build_compact_model(const Model<T>& teacher, const SharingPlan& plan,
                             const TransformConfig& tf) {
  if (!teacher.plan.is_identity())
    throw ConfigError("compact model must be seeded from an unshared teacher");
  Model<T> m = build_model<T>(teacher.cfg, plan, tf, /*seed=*/0);
  // A student group tagged g<first_layer> matches the teacher's singleton
  // group of that layer, so a plain name lookup realizes first-layer
  // seeding. Transform parameters have no teacher counterpart and keep
  // their identity/delta initialization.
  for (std::size_t i = 0; i < m.params.count(); ++i) {
    const std::string& name = m.params.names[i];
    if (teacher.params.has(name)) m.params.tensors[i] = teacher.params.at(name);
  }
  return m;
}

// ------------------------------------------------------------------ forward

template <class T>
struct LayerRefs {
  Var qkv;        // [B*N x 3d]
  Var logits;     // [B,M,N,N]
  Var attn;       // [B,M,N,N]
  Var hidden;     // MLP output, pre-residual
  Var block_out;  // z after the full layer
  AttnDims dims;
  int stage = 0, layer = 0;
  int grid_h = 0, grid_w = 0;
};

template <class T>
struct ForwardRefs {
  std::vector<LayerRefs<T>> layers;
  Var logits;  // [B x num_classes]
};

template <class T>
struct ForwardOpts {
  bool training = false;
  Rng* drop_rng = nullptr;  // consulted only when drop_path_rate > 0
};

// Row-major gather of image patches: token (py,px), columns (dy,dx,c).
template <class T>
Tensor<T> patchify(const ModelConfig& cfg, const Tensor<T>& images, int batch) {
  const int s = cfg.image_size, P = cfg.patch_size, C = cfg.in_channels;
  require(static_cast<int>(images.numel()) == batch * s * s * C,
          "image tensor does not match config");
  const int g = s / P, N = g * g, px = cfg.patch_pixels();
  Tensor<T> out({batch * N, px});
  for (int b = 0; b < batch; ++b) {
    const T* ib = images.ptr() + static_cast<std::size_t>(b) * s * s * C;
    for (int py = 0; py < g; ++py)
      for (int pxi = 0; pxi < g; ++pxi) {
        T* row = out.ptr() + (static_cast<std::size_t>(b) * N + py * g + pxi) * px;
        for (int dy = 0; dy < P; ++dy)
          for (int dx = 0; dx < P; ++dx) {
            const T* src = ib + ((static_cast<std::size_t>(py * P + dy)) * s + (pxi * P + dx)) * C;
            for (int c = 0; c < C; ++c) row[(dy * P + dx) * C + c] = src[c];
          }
      }
  }
  return out;
}

template <class T>
std::vector<Var> register_params(Tape<T>& t, const Model<T>& m) {
  std::vector<Var> vars;
  vars.reserve(m.params.count());
  for (std::size_t i = 0; i < m.params.count(); ++i)
    vars.push_back(t.param(m.params.names[i], m.params.tensors[i]));
  return vars;
}

template <class T>
ForwardRefs<T> forward_model(Tape<T>& t, const Model<T>& m, const std::vector<Var>& pv,
                             const Tensor<T>& images, int batch, const ForwardOpts<T>& opts = {}) {
  ForwardRefs<T> refs;
  const ModelConfig& cfg = m.cfg;
  Var z;
  {
    Tensor<T> patches = patchify(cfg, images, batch);
    Var pat = t.constant(std::move(patches));
    z = op::linear(t, pat, pv[m.patch_w], pv[m.patch_b]);
    z = op::add_pos(t, z, pv[m.pos_embed], batch);
  }

  int grid = cfg.image_size / cfg.patch_size;
  const bool drop = opts.training && cfg.drop_path_rate > 0 && opts.drop_rng != nullptr;
  for (int s = 0; s < static_cast<int>(cfg.stages.size()); ++s) {
    const StageConfig& st = cfg.stages[static_cast<std::size_t>(s)];
    if (s > 0 && st.merge_tokens) {
      Var merged = op::merge_tokens(t, z, batch, grid, grid);
      grid /= 2;
      z = op::linear(t, merged, pv[m.merges[static_cast<std::size_t>(s)].w],
                     pv[m.merges[static_cast<std::size_t>(s)].b]);
    }
    const int N = grid * grid;
    AttnDims dims{batch, N, st.num_heads, st.embed_dim / st.num_heads};
    for (int l = 0; l < st.num_layers; ++l) {
      const auto& lb = m.layers[static_cast<std::size_t>(s)][static_cast<std::size_t>(l)];
      LayerRefs<T> lr;
      lr.dims = dims;
      lr.stage = s;
      lr.layer = l;
      lr.grid_h = lr.grid_w = grid;

      Var h1 = op::layer_norm(t, z, pv[lb.ln1_g], pv[lb.ln1_b]);
      MsaWeightVars<T> mw{pv[lb.wqkv], pv[lb.bqkv], pv[lb.wproj], pv[lb.bproj]};
      std::optional<Var> f1, f2;
      if (lb.f1 >= 0) {
        f1 = pv[lb.f1];
        f2 = pv[lb.f2];
      }
      MsaOut<T> msa = msa_block(t, h1, mw, dims, f1, f2);
      Var branch1 = msa.out;
      if (drop) {
        auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch));
        const T keep = static_cast<T>(1.0 - cfg.drop_path_rate);
        for (auto& v : *mask)
          v = opts.drop_rng->next_unit() < cfg.drop_path_rate ? T(0) : T(1) / keep;
        branch1 = op::row_scale(t, branch1, std::shared_ptr<const std::vector<T>>(mask), N);
      }
      z = op::add(t, z, branch1);

      Var h2 = op::layer_norm(t, z, pv[lb.ln2_g], pv[lb.ln2_b]);
      MlpWeightVars<T> ow{pv[lb.w1], pv[lb.b1], pv[lb.w2], pv[lb.b2]};
      std::optional<Var> conv;
      if (lb.conv >= 0) conv = pv[lb.conv];
      Var hidden = mlp_block(t, h2, ow, conv, batch, grid, grid);
      Var branch2 = hidden;
      if (drop) {
        auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch));
        const T keep = static_cast<T>(1.0 - cfg.drop_path_rate);
        for (auto& v : *mask)
          v = opts.drop_rng->next_unit() < cfg.drop_path_rate ? T(0) : T(1) / keep;
        branch2 = op::row_scale(t, branch2, std::shared_ptr<const std::vector<T>>(mask), N);
      }
      z = op::add(t, z, branch2);

      lr.qkv = msa.qkv;
      lr.logits = msa.logits;
      lr.attn = msa.attn;
      lr.hidden = hidden;
      lr.block_out = z;
      refs.layers.push_back(lr);
    }
  }

  Var zn = op::layer_norm(t, z, pv[m.final_g], pv[m.final_b]);
  Var pooled = op::global_avg_pool(t, zn, batch, grid * grid);
  refs.logits = op::linear(t, pooled, pv[m.head_w], pv[m.head_b]);
  return refs;
}

// ------------------------------------------------------------------ capture

enum class CaptureLevel { none, distill, full };

template <class T>
struct LayerCapture {
  Tensor<T> q, k, v;       // [B*N x d] each, heads concatenated
  Tensor<T> logits, attn;  // [B,M,N,N] (full capture only)
  Tensor<T> hidden;        // MLP output [B*N x d]
  Tensor<T> block_out;     // post-residual z (full capture only)
  AttnDims dims;
  int grid_h = 0, grid_w = 0;
};

template <class T>
struct CaptureSet {
  std::vector<LayerCapture<T>> layers;
  Tensor<T> logits;  // [B x num_classes]
};

template <class T>
Tensor<T> col_slice(const Tensor<T>& x, int c0, int c1) {
  const int R = x.shape[0], W = x.shape[1], w = c1 - c0;
  Tensor<T> out({R, w});
  for (int r = 0; r < R; ++r)
    std::memcpy(out.ptr() + static_cast<std::size_t>(r) * w,
                x.ptr() + static_cast<std::size_t>(r) * W + c0, sizeof(T) * w);
  return out;
}

template <class T>
CaptureSet<T> extract_capture(const Tape<T>& t, const ForwardRefs<T>& refs, CaptureLevel level) {
  CaptureSet<T> cap;
  cap.logits = t.val(refs.logits);
  if (level == CaptureLevel::none) return cap;
  for (const auto& lr : refs.layers) {
    LayerCapture<T> lc;
    lc.dims = lr.dims;
    lc.grid_h = lr.grid_h;
    lc.grid_w = lr.grid_w;
    const Tensor<T>& qkv = t.val(lr.qkv);
    const int d = lr.dims.dim();
    lc.q = col_slice(qkv, 0, d);
    lc.k = col_slice(qkv, d, 2 * d);
    lc.v = col_slice(qkv, 2 * d, 3 * d);
    lc.hidden = t.val(lr.hidden);
    if (level == CaptureLevel::full) {
      lc.logits = t.val(lr.logits);
      lc.attn = t.val(lr.attn);
      lc.block_out = t.val(lr.block_out);
    }
    cap.layers.push_back(std::move(lc));
  }
  return cap;
}

// Inference logits; no gradients recorded.
template <class T>
Tensor<T> forward_logits(const Model<T>& m, const Tensor<T>& images, int batch) {
  Tape<T> t;
  t.recording = false;
  auto pv = register_params(t, m);
  auto refs = forward_model(t, m, pv, images, batch);
  return t.val(refs.logits);
}

template <class T>
std::pair<Tensor<T>, CaptureSet<T>> forward_with_capture(const Model<T>& m, const Tensor<T>& images,
                                                         int batch,
                                                         CaptureLevel level = CaptureLevel::full) {
  Tape<T> t;
  t.recording = false;
  auto pv = register_params(t, m);
  auto refs = forward_model(t, m, pv, images, batch);
  CaptureSet<T> cap = extract_capture(t, refs, level);
  return {t.val(refs.logits), std::move(cap)};
}

// --------------------------------------------------------------- accounting

struct ParamCounts {
  std::map<std::string, std::size_t> groups;
  std::size_t total = 0;
};

// Pure arithmetic; never materializes tensors, so it stays cheap for
// arbitrarily large configurations.
inline ParamCounts count_params(const ModelConfig& cfg, const SharingPlan& plan,
                                const TransformConfig& tf) {
  cfg.validate();
  tf.validate();
  ParamCounts pc;
  auto& g = pc.groups;
  const int d0 = cfg.stages[0].embed_dim;
  g["embed.patch"] = static_cast<std::size_t>(cfg.patch_pixels()) * d0 + d0;
  g["embed.pos"] = static_cast<std::size_t>(cfg.num_patches()) * d0;
  g["embed.merge"] = 0;
  g["blocks.core"] = 0;
  g["blocks.norm"] = 0;
  g["blocks.transform"] = 0;
  for (int s = 0; s < static_cast<int>(cfg.stages.size()); ++s) {
    const StageConfig& st = cfg.stages[static_cast<std::size_t>(s)];
    const std::size_t d = static_cast<std::size_t>(st.embed_dim);
    const std::size_t dp = static_cast<std::size_t>(st.mlp_dim);
    const std::size_t M = static_cast<std::size_t>(st.num_heads);
    if (s > 0 && st.merge_tokens) {
      const std::size_t d_prev =
          static_cast<std::size_t>(cfg.stages[static_cast<std::size_t>(s - 1)].embed_dim);
      g["embed.merge"] += 4 * d_prev * d + d;
    }
    std::size_t groups_in_stage = 0;
    for (const auto& gr : plan.groups)
      if (gr.stage == s) ++groups_in_stage;
    const std::size_t core_per_group = d * 3 * d + 3 * d + d * d + d + d * dp + dp + dp * d + d;
    g["blocks.core"] += groups_in_stage * core_per_group;
    const std::size_t L = static_cast<std::size_t>(st.num_layers);
    g["blocks.norm"] += L * 4 * d;
    if (tf.msa) g["blocks.transform"] += L * 2 * M * M;
    if (tf.mlp)
      g["blocks.transform"] += L * static_cast<std::size_t>(tf.kernel) * tf.kernel * d;
  }
  const std::size_t d_last = static_cast<std::size_t>(cfg.stages.back().embed_dim);
  g["head"] = 2 * d_last + d_last * cfg.num_classes + cfg.num_classes;
  g["blocks"] = g["blocks.core"] + g["blocks.norm"] + g["blocks.transform"];
  pc.total = g["embed.patch"] + g["embed.pos"] + g["embed.merge"] + g["blocks"] + g["head"];
  g["total"] = pc.total;
  return pc;
}

template <class T>
ParamCounts count_params(const Model<T>& m) {
  ParamCounts pc = count_params(m.cfg, m.plan, m.transforms);
  if (pc.total != m.params.total_params())
    throw UsageError("parameter accounting disagrees with the store: " + std::to_string(pc.total) +
                     " vs " + std::to_string(m.params.total_params()));
  return pc;
}

struct ParamReport {
  std::size_t shared_core = 0;       // block tensors stored once per group
  std::size_t per_layer_norm = 0;    // unshared LayerNorms
  std::size_t transforms = 0;        // unshared F1/F2 and depth-wise kernels
  std::size_t blocks = 0;
  std::size_t embed_head = 0;        // embeddings, merges, final norm, classifier
  std::size_t total = 0;
  std::size_t baseline_blocks = 0;   // unshared, transforms off
  std::size_t baseline_total = 0;
  double ratio_blocks = 1;
  double ratio_total = 1;
};

inline ParamReport param_report(const ModelConfig& cfg, const SharingPlan& plan,
                                const TransformConfig& tf) {
  ParamCounts pc = count_params(cfg, plan, tf);
  ParamCounts base = count_params(cfg, make_sharing_plan(cfg, ShareMode::none), TransformConfig{});
  ParamReport r;
  r.shared_core = pc.groups.at("blocks.core");
  r.per_layer_norm = pc.groups.at("blocks.norm");
  r.transforms = pc.groups.at("blocks.transform");
  r.blocks = pc.groups.at("blocks");
  r.embed_head = pc.total - r.blocks;
  r.total = pc.total;
  r.baseline_blocks = base.groups.at("blocks");
  r.baseline_total = base.total;
  r.ratio_blocks = static_cast<double>(r.baseline_blocks) / static_cast<double>(r.blocks);
  r.ratio_total = static_cast<double>(r.baseline_total) / static_cast<double>(r.total);
  return r;
}

template <class T>
ParamReport param_report(const Model<T>& m) {
  return param_report(m.cfg, m.plan, m.transforms);
}

}  // namespace muxvit
