#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "muxvit/errors.hpp"
#include "muxvit/tensor.hpp"

namespace muxvit {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops append nodes whose closures accumulate into parent
// gradient buffers; replaying the node list backward from a scalar loss
// yields one gradient per marked parameter. Single-owner: a tape must not
// be shared across threads while recording.
template <class T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    std::string param_name;                      // set for marked parameters
    std::function<void(Tape&, int)> backward;    // (tape, own id)
  };

  bool recording = true;   // false: values only, no backward closures
  bool check_finite = false;  // NaN/Inf detection mode

  Var constant(Tensor<T> v) { return push(std::move(v), false, {}, {}); }

  Var param(const std::string& name, Tensor<T> v) {
    if (name.empty()) throw UsageError("parameter needs a name");
    return push(std::move(v), recording, name, {});
  }

  Var op(Tensor<T> value, std::initializer_list<Var> parents,
         std::function<void(Tape&, int)> backward) {
    bool req = false;
    if (recording)
      for (Var p : parents) req = req || node(p).requires_grad;
    return push(std::move(value), req, {}, req ? std::move(backward) : std::function<void(Tape&, int)>{});
  }

  Var op_dyn(Tensor<T> value, const std::vector<Var>& parents,
             std::function<void(Tape&, int)> backward) {
    bool req = false;
    if (recording)
      for (Var p : parents) req = req || node(p).requires_grad;
    return push(std::move(value), req, {}, req ? std::move(backward) : std::function<void(Tape&, int)>{});
  }

  const Tensor<T>& val(Var v) const { return node(v).value; }
  Tensor<T>& val_mut(Var v) { return node(v).value; }
  bool needs_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, allocated to zeros on first touch.
  Tensor<T>& grad(int id) {
    Tensor<T>& g = grads_[static_cast<std::size_t>(id)];
    if (g.numel() == 0) g = Tensor<T>(nodes_[static_cast<std::size_t>(id)].value.shape);
    return g;
  }
  Tensor<T>& grad(Var v) { return grad(v.id); }
  bool grad_present(int id) const { return grads_[static_cast<std::size_t>(id)].numel() != 0; }

  // Gradient of a scalar loss w.r.t. every marked parameter. Unused
  // parameters get exact zeros. `release` frees intermediate values and
  // gradients as soon as they are consumed (training mode).
  std::map<std::string, Tensor<T>> backward(Var loss, bool release = false) {
    if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size()))
      throw UsageError("loss is not a node on this tape");
    if (!recording) throw UsageError("tape was not recording");
    const Node& ln = node(loss);
    if (ln.value.numel() != 1) throw UsageError("loss must be scalar, got " + ln.value.shape.str());
    if (check_finite) ln.value.check_finite("loss");

    grads_.assign(nodes_.size(), Tensor<T>{});
    grad(loss.id).data[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || !grad_present(i)) continue;
      if (n.backward) n.backward(*this, i);
      if (release) {
        if (n.param_name.empty()) grads_[static_cast<std::size_t>(i)] = Tensor<T>{};
        if (i != loss.id) n.value = Tensor<T>{};
      }
    }

    std::map<std::string, Tensor<T>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.param_name.empty()) continue;
      Tensor<T>& g = grads_[i];
      if (g.numel() == 0) g = Tensor<T>(n.value.shape);  // untouched by loss: exact zeros
      if (check_finite) g.check_finite(("grad of " + n.param_name).c_str());
      out.emplace(n.param_name, std::move(g));
    }
    grads_.clear();
    return out;
  }

 private:
  Var push(Tensor<T> v, bool req, std::string name, std::function<void(Tape&, int)> bw) {
    if (check_finite) v.check_finite("tape value");
    Node n;
    n.value = std::move(v);
    n.requires_grad = req;
    n.param_name = std::move(name);
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw UsageError("invalid tape var");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  Node& node(Var v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw UsageError("invalid tape var");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

}  // namespace muxvit
