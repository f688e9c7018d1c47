#pragma once

// Relation matrices and the three-part distillation objective:
// prediction-logit, self-attention relation, and hidden-state relation
// losses, combined as pred + beta*attn + gamma*hddn (with an optional
// ground-truth term).

#include <array>
#include <cmath>
#include <vector>

#include "muxvit/model.hpp"

namespace muxvit {

struct DistillConfig {
  double temperature = 1.0;
  double beta = 1.0;
  double gamma = 0.1;
  double gt_weight = 0.0;      // > 0 adds a label CE term; pred weight becomes 1 - gt_weight
  bool hetero_teacher = false; // only the prediction term survives

  void validate() const {
    if (temperature <= 0) throw ConfigError("temperature must be positive");
    if (beta < 0 || gamma < 0 || gt_weight < 0 || gt_weight > 1)
      throw ConfigError("loss weights must be in range (beta, gamma >= 0; gt_weight in [0,1])");
  }
  double pred_weight() const { return gt_weight > 0 ? 1.0 - gt_weight : 1.0; }
  bool relations_enabled() const { return !hetero_teacher; }
};

// ------------------------------------------------------------- relations

// softmax(A B^T * scale) per image; a, b: [B*N x width] column blocks.
template <class T>
Tensor<T> relation_rows(const T* a, const T* b, int B, int N, int width, int stride, T scl) {
  Tensor<T> out({B * N, N});
  for (int bi = 0; bi < B; ++bi) {
    const T* ai = a + static_cast<std::size_t>(bi) * N * stride;
    const T* bj = b + static_cast<std::size_t>(bi) * N * stride;
    T* o = out.ptr() + static_cast<std::size_t>(bi) * N * N;
    kern::gemm_nt<T>(N, N, width, ai, stride, bj, stride, o, N);
  }
  for (auto& v : out.data) v *= scl;
  kern::softmax_rows_buf(out.ptr(), out.ptr(), static_cast<std::int64_t>(B) * N, N);
  return out;
}

// Nine Q/K/V relation matrices plus the hidden-state relation, batched as
// [B*N x N] row blocks. Index r[i][j] pairs S_i with S_j, S in {Q, K, V}.
template <class T>
struct RelationSet {
  std::array<std::array<Tensor<T>, 3>, 3> r;
  Tensor<T> r_h;
};

template <class T>
RelationSet<T> relation_matrices(const LayerCapture<T>& cap) {
  const int B = cap.dims.batch, N = cap.dims.tokens, d = cap.dims.dim();
  require(cap.q.shape == Shape({B * N, d}), "capture Q shape mismatch");
  require(cap.hidden.shape == Shape({B * N, d}), "capture hidden shape mismatch");
  const T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  const std::array<const Tensor<T>*, 3> s = {&cap.q, &cap.k, &cap.v};
  RelationSet<T> rs;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      rs.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          relation_rows(s[static_cast<std::size_t>(i)]->ptr(), s[static_cast<std::size_t>(j)]->ptr(),
                        B, N, d, d, scl);
  rs.r_h = relation_rows(cap.hidden.ptr(), cap.hidden.ptr(), B, N, d, d, scl);
  return rs;
}

// --------------------------------------------------------------- plain losses

template <class T>
T loss_pred(const Tensor<T>& z_s, const Tensor<T>& z_t, double temperature) {
  require(z_s.shape == z_t.shape, "logit shapes differ");
  Tensor<T> s = z_s, t = z_t;
  const T inv = static_cast<T>(1.0 / temperature);
  for (auto& v : s.data) v *= inv;
  for (auto& v : t.data) v *= inv;
  return cross_entropy_rows(softmax_rows(s), softmax_rows(t));
}

// (1/9) sum_ij CE over rows, averaged over layers.
template <class T>
T loss_attn(const CaptureSet<T>& student, const CaptureSet<T>& teacher) {
  if (student.layers.size() != teacher.layers.size())
    throw UsageError("student/teacher depths differ: " + std::to_string(student.layers.size()) +
                     " vs " + std::to_string(teacher.layers.size()));
  double total = 0;
  for (std::size_t l = 0; l < student.layers.size(); ++l) {
    RelationSet<T> rs = relation_matrices(student.layers[l]);
    RelationSet<T> rt = relation_matrices(teacher.layers[l]);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        total += static_cast<double>(cross_entropy_rows(
            rs.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)],
            rt.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
  }
  return static_cast<T>(total / (9.0 * static_cast<double>(student.layers.size())));
}

template <class T>
T loss_hddn(const CaptureSet<T>& student, const CaptureSet<T>& teacher) {
  if (student.layers.size() != teacher.layers.size())
    throw UsageError("student/teacher depths differ: " + std::to_string(student.layers.size()) +
                     " vs " + std::to_string(teacher.layers.size()));
  double total = 0;
  for (std::size_t l = 0; l < student.layers.size(); ++l) {
    RelationSet<T> rs = relation_matrices(student.layers[l]);
    RelationSet<T> rt = relation_matrices(teacher.layers[l]);
    total += static_cast<double>(cross_entropy_rows(rs.r_h, rt.r_h));
  }
  return static_cast<T>(total / static_cast<double>(student.layers.size()));
}

template <class T>
Tensor<T> one_hot_rows(const std::vector<int>& labels, int classes) {
  Tensor<T> t({static_cast<int>(labels.size()), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw UsageError("label " + std::to_string(labels[i]) + " out of range");
    t(static_cast<int>(i), labels[i]) = T(1);
  }
  return t;
}

struct DistillComponents {
  double total = 0, pred = 0, attn = 0, hddn = 0, gt = 0;
};

// Loss values from captures (no gradients); the training graph below must
// produce the same numbers.
template <class T>
DistillComponents distill_components(const CaptureSet<T>& student, const CaptureSet<T>& teacher,
                                     const std::vector<int>& labels, const DistillConfig& dc) {
  dc.validate();
  DistillComponents c;
  c.pred = loss_pred(student.logits, teacher.logits, dc.temperature);
  if (dc.relations_enabled()) {
    if (dc.beta > 0) c.attn = loss_attn(student, teacher);
    if (dc.gamma > 0) c.hddn = loss_hddn(student, teacher);
  }
  if (dc.gt_weight > 0)
    c.gt = cross_entropy_rows(softmax_rows(student.logits),
                              one_hot_rows<T>(labels, student.logits.shape[1]));
  c.total = dc.pred_weight() * c.pred + dc.beta * c.attn + dc.gamma * c.hddn + dc.gt_weight * c.gt;
  return c;
}

// ------------------------------------------------------------ training graph

template <class T>
struct DistillLossVars {
  Var total, pred, attn, hddn, gt;  // invalid when the term is disabled
};

// Builds Eq-style training loss on the student tape against a frozen
// teacher capture. Teacher tensors enter as constants, so no gradient can
// reach them.
template <class T>
DistillLossVars<T> build_distill_loss(Tape<T>& t, const ForwardRefs<T>& srefs,
                                      const CaptureSet<T>& tcap, const std::vector<int>& labels,
                                      const DistillConfig& dc) {
  dc.validate();
  const bool relations = dc.relations_enabled() && (dc.beta > 0 || dc.gamma > 0);
  if (relations && srefs.layers.size() != tcap.layers.size())
    throw UsageError("student/teacher depths differ: " + std::to_string(srefs.layers.size()) +
                     " vs " + std::to_string(tcap.layers.size()));
  DistillLossVars<T> out;
  std::vector<std::pair<Var, T>> total_terms;

  if (dc.pred_weight() > 0) {
    const T invT = static_cast<T>(1.0 / dc.temperature);
    Var ps = op::softmax_rows(t, op::scale(t, srefs.logits, invT));
    Tensor<T> zt = tcap.logits;
    for (auto& v : zt.data) v *= invT;
    Var pt = t.constant(softmax_rows(zt));
    out.pred = op::cross_entropy_rows(t, ps, pt);
    total_terms.push_back({out.pred, static_cast<T>(dc.pred_weight())});
  }

  const std::size_t L = srefs.layers.size();
  if (dc.relations_enabled() && dc.beta > 0) {
    std::vector<std::pair<Var, T>> terms;
    const T w = static_cast<T>(1.0 / (9.0 * static_cast<double>(L)));
    for (std::size_t l = 0; l < L; ++l) {
      const LayerRefs<T>& lr = srefs.layers[l];
      const int B = lr.dims.batch, N = lr.dims.tokens, d = lr.dims.dim();
      const T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
      RelationSet<T> rt = relation_matrices(tcap.layers[l]);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          Var logits = op::pair_logits(t, lr.qkv, B, N, 1, d, i * d, j * d, scl);
          Var rows = op::reshape(t, op::softmax_rows(t, logits), Shape({B * N, N}));
          Var ce = op::cross_entropy_rows(
              t, rows,
              t.constant(rt.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
          terms.push_back({ce, T(1)});
        }
    }
    std::vector<std::pair<Var, T>> weighted;
    for (auto& [v, unused] : terms) weighted.push_back({v, w});
    out.attn = op::wsum(t, weighted);
    total_terms.push_back({out.attn, static_cast<T>(dc.beta)});
  }

  if (dc.relations_enabled() && dc.gamma > 0) {
    std::vector<std::pair<Var, T>> terms;
    const T w = static_cast<T>(1.0 / static_cast<double>(L));
    for (std::size_t l = 0; l < L; ++l) {
      const LayerRefs<T>& lr = srefs.layers[l];
      const int B = lr.dims.batch, N = lr.dims.tokens, d = lr.dims.dim();
      const T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
      Tensor<T> rth = relation_rows(tcap.layers[l].hidden.ptr(), tcap.layers[l].hidden.ptr(), B, N,
                                    d, d, scl);
      Var logits = op::pair_logits(t, lr.hidden, B, N, 1, d, 0, 0, scl);
      Var rows = op::reshape(t, op::softmax_rows(t, logits), Shape({B * N, N}));
      terms.push_back({op::cross_entropy_rows(t, rows, t.constant(std::move(rth))), w});
    }
    out.hddn = op::wsum(t, terms);
    total_terms.push_back({out.hddn, static_cast<T>(dc.gamma)});
  }

  if (dc.gt_weight > 0) {
    const int classes = t.val(srefs.logits).shape[1];
    Var pgt = op::softmax_rows(t, srefs.logits);
    out.gt = op::cross_entropy_rows(t, pgt, t.constant(one_hot_rows<T>(labels, classes)));
    total_terms.push_back({out.gt, static_cast<T>(dc.gt_weight)});
  }

  out.total = op::wsum(t, total_terms);
  return out;
}

// Plain end-to-end distillation loss between two models on one batch.
template <class T>
DistillComponents loss_total(const Model<T>& student, const Model<T>& teacher,
                             const Tensor<T>& images, const std::vector<int>& labels, int batch,
                             const DistillConfig& dc) {
  auto [sl, scap] = forward_with_capture(student, images, batch, CaptureLevel::distill);
  auto [tl, tcap] = forward_with_capture(teacher, images, batch, CaptureLevel::distill);
  (void)sl;
  (void)tl;
  return distill_components(scap, tcap, labels, dc);
}

}  // namespace muxvit
