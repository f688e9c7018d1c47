#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "muxvit/errors.hpp"
#include "muxvit/tensor.hpp"

namespace muxvit {

// Named parameter tensors in a stable insertion order. Sharing is expressed
// by several layers binding to the same index, so a tensor is stored (and
// counted, saved, updated) exactly once.
template <class T>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;
  std::unordered_map<std::string, int> index;

  int add(const std::string& name, Tensor<T> t) {
    if (index.count(name)) throw UsageError("duplicate parameter name " + name);
    names.push_back(name);
    tensors.push_back(std::move(t));
    index[name] = static_cast<int>(tensors.size()) - 1;
    return index[name];
  }

  int find(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw UsageError("unknown parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return index.count(name) != 0; }

  Tensor<T>& at(int i) { return tensors[static_cast<std::size_t>(i)]; }
  const Tensor<T>& at(int i) const { return tensors[static_cast<std::size_t>(i)]; }
  Tensor<T>& at(const std::string& name) { return tensors[static_cast<std::size_t>(find(name))]; }
  const Tensor<T>& at(const std::string& name) const {
    return tensors[static_cast<std::size_t>(find(name))];
  }

  std::size_t count() const { return tensors.size(); }
  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }
};

}  // namespace muxvit
