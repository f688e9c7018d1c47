#pragma once

// Analysis instruments: linear CKA feature similarity between models and
// per-layer-group gradient l2-norms.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "muxvit/model.hpp"

namespace muxvit {

// Linear CKA with column centering, accumulated in double:
//   ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F).
// Invariant to isotropic scaling and orthogonal right-transformations.
template <class T>
double cka_linear(const Tensor<T>& x, const Tensor<T>& y) {
  require(x.shape.rank == 2 && y.shape.rank == 2, "cka expects feature matrices");
  const int n = x.shape[0], p = x.shape[1], q = y.shape[1];
  if (n != y.shape[0])
    throw ShapeError("cka sample counts differ: " + x.shape.str() + " vs " + y.shape.str());
  if (n < 2) throw UsageError("cka needs at least 2 samples");

  auto centered = [n](const Tensor<T>& t, int cols) {
    std::vector<double> c(static_cast<std::size_t>(n) * cols);
    for (int j = 0; j < cols; ++j) {
      double mu = 0;
      for (int i = 0; i < n; ++i) mu += static_cast<double>(t(i, j));
      mu /= n;
      for (int i = 0; i < n; ++i)
        c[static_cast<std::size_t>(i) * cols + j] = static_cast<double>(t(i, j)) - mu;
    }
    return c;
  };
  const std::vector<double> xc = centered(x, p), yc = centered(y, q);

  auto gram_fro2 = [n](const std::vector<double>& a, int pa, const std::vector<double>& b, int pb) {
    // ||A^T B||_F^2 without materializing more than one row of A^T B
    double fro = 0;
    std::vector<double> row(static_cast<std::size_t>(pb));
    for (int i = 0; i < pa; ++i) {
      std::fill(row.begin(), row.end(), 0.0);
      for (int k = 0; k < n; ++k) {
        const double aki = a[static_cast<std::size_t>(k) * pa + i];
        const double* bk = b.data() + static_cast<std::size_t>(k) * pb;
        for (int j = 0; j < pb; ++j) row[static_cast<std::size_t>(j)] += aki * bk[j];
      }
      for (int j = 0; j < pb; ++j) fro += row[static_cast<std::size_t>(j)] * row[static_cast<std::size_t>(j)];
    }
    return fro;
  };

  const double xx = gram_fro2(xc, p, xc, p);
  const double yy = gram_fro2(yc, q, yc, q);
  if (xx <= 0 || yy <= 0)
    throw NumericError("cka undefined for zero-variance (all-constant) features");
  const double xy = gram_fro2(yc, q, xc, p);
  return xy / (std::sqrt(xx) * std::sqrt(yy));
}

struct SimilarityCurve {
  std::vector<double> cka;  // one entry per compared layer
  std::string activation = "post-block hidden state";
};

// Per-layer CKA between two equal-depth models on a shared probe batch.
// Post-block hidden states are the compared activations; tokens x features
// flatten across the probe batch as samples.
template <class T>
SimilarityCurve layer_similarity(const Model<T>& a, const Model<T>& b, const Tensor<T>& probe,
                                 int batch) {
  if (a.total_layers() != b.total_layers())
    throw UsageError("models differ in depth: " + std::to_string(a.total_layers()) + " vs " +
                     std::to_string(b.total_layers()));
  auto [la, ca] = forward_with_capture(a, probe, batch, CaptureLevel::full);
  auto [lb, cb] = forward_with_capture(b, probe, batch, CaptureLevel::full);
  (void)la;
  (void)lb;
  SimilarityCurve curve;
  for (std::size_t l = 0; l < ca.layers.size(); ++l)
    curve.cka.push_back(cka_linear(ca.layers[l].block_out, cb.layers[l].block_out));
  return curve;
}

// ------------------------------------------------------------- grad norms

struct GradGroup {
  std::string label;
  std::vector<std::string> params;
};

// Reporting groups for per-layer gradient norms: one entry per layer for
// parameters owned by that layer alone (LayerNorms, transformations, and
// the block tensors when its share group is a singleton), plus one entry
// per multi-layer share group for the shared tensors.
template <class T>
std::vector<GradGroup> grad_norm_groups(const Model<T>& m) {
  std::vector<GradGroup> groups;
  for (int s = 0; s < static_cast<int>(m.cfg.stages.size()); ++s) {
    const int L = m.cfg.stages[static_cast<std::size_t>(s)].num_layers;
    for (int l = 0; l < L; ++l) {
      GradGroup g;
      g.label = detail::layer_tag(s, l);
      const std::string tag = g.label + ".";
      for (const std::string& name : m.params.names)
        if (name.rfind(tag, 0) == 0) g.params.push_back(name);
      const int gi = m.plan.group_of(s, l);
      const auto& gr = m.plan.groups[static_cast<std::size_t>(gi)];
      if (gr.count == 1) {
        const std::string gtag = detail::group_tag(s, gr.first_layer) + ".";
        for (const std::string& name : m.params.names)
          if (name.rfind(gtag, 0) == 0) g.params.push_back(name);
      }
      groups.push_back(std::move(g));
    }
  }
  for (const auto& gr : m.plan.groups) {
    if (gr.count == 1) continue;
    GradGroup g;
    g.label = detail::group_tag(gr.stage, gr.first_layer);
    const std::string gtag = g.label + ".";
    for (const std::string& name : m.params.names)
      if (name.rfind(gtag, 0) == 0) g.params.push_back(name);
    groups.push_back(std::move(g));
  }
  return groups;
}

// l2 norm of the concatenated gradients of each group.
template <class T>
std::vector<double> grad_norms_by_group(const std::map<std::string, Tensor<T>>& grads,
                                        const std::vector<GradGroup>& groups) {
  std::vector<double> norms;
  norms.reserve(groups.size());
  for (const auto& g : groups) {
    double sq = 0;
    for (const std::string& name : g.params) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      for (const T& v : it->second.data) sq += static_cast<double>(v) * static_cast<double>(v);
    }
    norms.push_back(std::sqrt(sq));
  }
  return norms;
}

struct GradNormTrace {
  std::vector<std::string> labels;
  struct Row {
    int step;
    std::vector<double> norms;
  };
  std::vector<Row> rows;
};

}  // namespace muxvit
