#pragma once

// Optimizer and the two training loops (supervised teacher training and
// distillation). Fully deterministic for a fixed seed: shuffling, batch
// assembly and updates all derive from the config seed.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "muxvit/dataset.hpp"
#include "muxvit/diagnostics.hpp"
#include "muxvit/distill.hpp"
#include "muxvit/model.hpp"

namespace muxvit {

struct OptimConfig {
  double lr = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int epochs = 10;
  int batch = 64;
  std::string schedule = "cosine";  // cosine | constant
  std::uint64_t seed = 0;

  void validate() const {
    if (lr < 0 || lr_min < 0 || weight_decay < 0) throw ConfigError("negative optimizer values");
    if (epochs < 0 || batch <= 0) throw ConfigError("epochs must be >= 0 and batch positive");
    if (schedule != "cosine" && schedule != "constant")
      throw ConfigError("unknown schedule '" + schedule + "'");
  }
};

inline double schedule_lr(const OptimConfig& oc, int step, int total_steps) {
  if (oc.schedule == "constant" || total_steps <= 1) return oc.lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return oc.lr_min + 0.5 * (oc.lr - oc.lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Adam with decoupled weight decay. Decay applies to matrices only; gains,
// biases, and the identity-anchored transformation parameters (head mixes,
// depth-wise kernels) are exempt.
template <class T>
class AdamW {
 public:
  explicit AdamW(const ParamStore<T>& params, const OptimConfig& oc) : oc_(oc) {
    m_.reserve(params.count());
    v_.reserve(params.count());
    for (const auto& t : params.tensors) {
      m_.emplace_back(t.shape);
      v_.emplace_back(t.shape);
    }
  }

  void step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(oc_.beta1, t_);
    const double bc2 = 1.0 - std::pow(oc_.beta2, t_);
    for (std::size_t i = 0; i < params.count(); ++i) {
      Tensor<T>& p = params.tensors[i];
      const Tensor<T>& g = grads.at(params.names[i]);
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      const bool transform_param = params.names[i].find(".t.") != std::string::npos;
      const bool decay = p.shape.rank >= 2 && oc_.weight_decay > 0 && !transform_param;
      const T b1 = static_cast<T>(oc_.beta1), b2 = static_cast<T>(oc_.beta2);
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const T gj = g.data[j];
        m.data[j] = b1 * m.data[j] + (T(1) - b1) * gj;
        v.data[j] = b2 * v.data[j] + (T(1) - b2) * gj * gj;
        const double mh = static_cast<double>(m.data[j]) / bc1;
        const double vh = static_cast<double>(v.data[j]) / bc2;
        double upd = mh / (std::sqrt(vh) + oc_.eps);
        if (decay) upd += oc_.weight_decay * static_cast<double>(p.data[j]);
        p.data[j] = static_cast<T>(static_cast<double>(p.data[j]) - lr * upd);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  OptimConfig oc_;
  std::vector<Tensor<T>> m_, v_;
  int t_ = 0;
};

// ------------------------------------------------------------------ metrics

struct MetricsRow {
  int step = 0;
  int epoch = 0;
  double loss_total = 0, loss_pred = 0, loss_attn = 0, loss_hddn = 0;
  double lr = 0;
  double test_acc = -1;  // < 0 means not evaluated at this step
  std::vector<double> grad_norms;
};

struct MetricsLog {
  std::vector<std::string> grad_labels;
  std::vector<MetricsRow> rows;
};

template <class T>
std::pair<Tensor<T>, std::vector<int>> gather_batch(const DatasetCache& data,
                                                    const std::vector<int>& order, int begin,
                                                    int count) {
  const int px = data.image_size * data.image_size * data.channels;
  Tensor<T> images({count, data.image_size, data.image_size, data.channels});
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int idx = order[static_cast<std::size_t>(begin + i)];
    const float* src = data.images.data() + static_cast<std::size_t>(idx) * px;
    T* dst = images.ptr() + static_cast<std::size_t>(i) * px;
    for (int j = 0; j < px; ++j) dst[j] = static_cast<T>(src[j]);
    labels[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(idx)];
  }
  return {std::move(images), std::move(labels)};
}

template <class T>
double evaluate_accuracy(const Model<T>& m, const DatasetCache& data, int batch = 64) {
  int correct = 0;
  std::vector<int> order(static_cast<std::size_t>(data.n));
  for (int i = 0; i < data.n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int begin = 0; begin < data.n; begin += batch) {
    const int count = std::min(batch, data.n - begin);
    auto [images, labels] = gather_batch<T>(data, order, begin, count);
    Tensor<T> logits = forward_logits(m, images, count);
    const int C = logits.shape[1];
    for (int i = 0; i < count; ++i) {
      int best = 0;
      for (int c = 1; c < C; ++c)
        if (logits(i, c) > logits(i, best)) best = c;
      if (best == labels[static_cast<std::size_t>(i)]) ++correct;
    }
  }
  return data.n ? static_cast<double>(correct) / data.n : 0.0;
}

// ------------------------------------------------------------- train loops

enum class TrainMode { supervised, distill };

// Shared minibatch loop. In supervised mode the loss is plain label CE and
// the teacher is ignored; in distill mode the teacher runs frozen alongside
// the student. Per-step metrics include component losses and per-group
// gradient norms; test accuracy is evaluated at each epoch end.
template <class T>
MetricsLog train_loop(Model<T>& model, const Model<T>* teacher, TrainMode mode,
                      const DatasetCache& train, const DatasetCache* test, const OptimConfig& oc,
                      const DistillConfig& dc) {
  oc.validate();
  if (mode == TrainMode::distill) {
    dc.validate();
    if (!teacher) throw UsageError("distillation needs a teacher model");
  }
  if (train.n < oc.batch) throw ConfigError("dataset smaller than one batch");

  MetricsLog log;
  const auto groups = grad_norm_groups(model);
  for (const auto& g : groups) log.grad_labels.push_back(g.label);

  AdamW<T> opt(model.params, oc);
  const int steps_per_epoch = train.n / oc.batch;
  const int total_steps = oc.epochs * steps_per_epoch;

  // Skip teacher work entirely for terms with zero weight.
  const bool need_teacher =
      mode == TrainMode::distill && (dc.pred_weight() > 0 || (dc.relations_enabled() && (dc.beta > 0 || dc.gamma > 0)));
  const CaptureLevel teacher_level =
      (dc.relations_enabled() && (dc.beta > 0 || dc.gamma > 0)) ? CaptureLevel::distill
                                                                : CaptureLevel::none;

  int step = 0;
  for (int epoch = 0; epoch < oc.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(train.n));
    for (int i = 0; i < train.n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng(oc.seed, static_cast<std::uint64_t>(epoch) + 1);
    shuffle_rng.shuffle(order.begin(), order.end());
    Rng drop_rng(oc.seed ^ 0x5DEECE66DULL, static_cast<std::uint64_t>(epoch) + 1);

    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      auto [images, labels] = gather_batch<T>(train, order, s * oc.batch, oc.batch);
      const double lr = schedule_lr(oc, step, total_steps);

      MetricsRow row;
      row.step = step;
      row.epoch = epoch;
      row.lr = lr;

      Tape<T> tape;
      auto pv = register_params(tape, model);
      ForwardOpts<T> fo;
      fo.training = true;
      fo.drop_rng = &drop_rng;
      auto refs = forward_model(tape, model, pv, images, oc.batch, fo);

      Var loss;
      if (mode == TrainMode::supervised) {
        Var probs = op::softmax_rows(tape, refs.logits);
        loss = op::cross_entropy_rows(
            tape, probs, tape.constant(one_hot_rows<T>(labels, model.cfg.num_classes)));
        row.loss_total = row.loss_pred = static_cast<double>(tape.val(loss).data[0]);
      } else {
        CaptureSet<T> tcap;
        if (need_teacher)
          tcap = forward_with_capture(*teacher, images, oc.batch, teacher_level).second;
        DistillLossVars<T> lv = build_distill_loss(tape, refs, tcap, labels, dc);
        loss = lv.total;
        row.loss_total = static_cast<double>(tape.val(lv.total).data[0]);
        row.loss_pred = lv.pred.valid() ? static_cast<double>(tape.val(lv.pred).data[0]) : 0;
        row.loss_attn = lv.attn.valid() ? static_cast<double>(tape.val(lv.attn).data[0]) : 0;
        row.loss_hddn = lv.hddn.valid() ? static_cast<double>(tape.val(lv.hddn).data[0]) : 0;
      }

      if (!std::isfinite(row.loss_total))
        throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));

      auto grads = tape.backward(loss, /*release=*/true);
      row.grad_norms = grad_norms_by_group(grads, groups);
      opt.step(model.params, grads, lr);

      if (test && s == steps_per_epoch - 1) row.test_acc = evaluate_accuracy(model, *test);
      log.rows.push_back(std::move(row));
    }
  }
  return log;
}

template <class T>
MetricsLog train_supervised(Model<T>& model, const DatasetCache& train, const DatasetCache* test,
                            const OptimConfig& oc) {
  return train_loop(model, static_cast<const Model<T>*>(nullptr), TrainMode::supervised, train,
                    test, oc, DistillConfig{});
}

template <class T>
MetricsLog train_distill(Model<T>& student, const Model<T>& teacher, const DatasetCache& train,
                         const DatasetCache* test, const OptimConfig& oc, const DistillConfig& dc) {
  return train_loop(student, &teacher, TrainMode::distill, train, test, oc, dc);
}

}  // namespace muxvit
