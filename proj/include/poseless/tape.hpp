// Copyright 2026 The Poseless Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <functional>
#include <unordered_map>

#include "poseless/tensor.hpp"

namespace poseless::ad {

enum class Mode { Recording, NoGrad };

class Tape;
struct ParamStore;

// One executed op. `pull` routes this node's cotangent into its inputs'
// cotangent buffers; leaves have no pull and optionally bind a parameter slot.
struct Node {
  Shape shape;
  std::vector<real> grad;
  std::function<void(Tape&, int self)> pull;
  int param_slot = -1;
};

// Reverse-mode tape. One tape per training stage; backward traverses nodes in
// exact reverse execution order and marks the tape consumed.
class Tape {
 public:
  explicit Tape(Mode m = Mode::Recording) : mode_(m) {}

  Mode mode() const { return mode_; }
  bool recording() const { return mode_ == Mode::Recording; }
  std::size_t size() const { return nodes_.size(); }

  int emplace(Shape shape, std::function<void(Tape&, int)> pull, int param_slot = -1) {
    nodes_.push_back(Node{std::move(shape), {}, std::move(pull), param_slot});
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor leaf(Tensor value, int param_slot = -1) {
    if (!recording()) return value;
    value.node = emplace(value.shape, nullptr, param_slot);
    return value;
  }

  std::vector<real>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(numel(n.shape)), real(0));
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  // dL/dy := cotangent, then reverse traversal. Parameter-bound leaves
  // accumulate into `params` (order-independent sums).
  void backward_with_cotangent(const Tensor& y, const Tensor& cotangent, ParamStore& params);

  void backward(const Tensor& loss, ParamStore& params) {
    require(loss.size() == 1, Err::NonScalarLoss, "backward() needs a scalar loss");
    Tensor one = Tensor::full({1}, 1);
    backward_with_cotangent(loss, one, params);
  }

 private:
  Mode mode_;
  std::vector<Node> nodes_;
  bool consumed_ = false;

  void run_backward(ParamStore& params);
};

// Named trainable parameters with gradient and Adam-moment slots. Values are
// shared storage, so every tape leaf created from a slot aliases one buffer.
struct ParamStore {
  struct Entry {
    std::string name;
    Shape shape;
    std::shared_ptr<Storage> value;
    std::vector<real> grad;
    std::vector<real> m, v;  // Adam moments
  };

  std::vector<Entry> entries;
  std::unordered_map<std::string, int> by_name;

  int add(const std::string& name, const Tensor& init) {
    require(by_name.find(name) == by_name.end(), Err::InvalidArgument,
            "duplicate parameter name " + name);
    Entry e;
    e.name = name;
    e.shape = init.shape;
    e.value = init.store;
    e.grad.assign(static_cast<std::size_t>(init.size()), real(0));
    entries.push_back(std::move(e));
    by_name[name] = static_cast<int>(entries.size()) - 1;
    return static_cast<int>(entries.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = by_name.find(name);
    require(it != by_name.end(), Err::InvalidArgument, "unknown parameter " + name);
    return it->second;
  }

  Entry& operator[](int id) { return entries[static_cast<std::size_t>(id)]; }
  const Entry& operator[](int id) const { return entries[static_cast<std::size_t>(id)]; }

  // Constant view of a parameter's current value.
  Tensor value(int id) const {
    Tensor t;
    t.shape = entries[static_cast<std::size_t>(id)].shape;
    t.store = entries[static_cast<std::size_t>(id)].value;
    return t;
  }

  // Tape leaf sharing the parameter's storage (constant under NoGrad).
  Tensor use(Tape& tape, int id) { return tape.leaf(value(id), id); }

  void zero_grad() {
    for (auto& e : entries) std::fill(e.grad.begin(), e.grad.end(), real(0));
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.grad.size();
    return n;
  }
};

inline void Tape::run_backward(ParamStore& params) {
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) continue;
    if (n.pull) n.pull(*this, id);
  }
  for (auto& n : nodes_) {
    if (n.param_slot >= 0 && !n.grad.empty()) {
      auto& g = params[n.param_slot].grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  }
  consumed_ = true;
}

inline void Tape::backward_with_cotangent(const Tensor& y, const Tensor& cotangent,
                                          ParamStore& params) {
  require(recording(), Err::InvalidArgument, "backward on a NoGrad tape");
  require(!consumed_, Err::EmptyTape, "tape already consumed by a previous backward");
  require(!nodes_.empty(), Err::EmptyTape, "backward on an empty tape");
  require_same_shape(y, cotangent, "backward cotangent");
  if (y.node < 0) {
    consumed_ = true;  // constant output: gradients are identically zero
    return;
  }
  auto& g = grad(y.node);
  const real* c = cotangent.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += c[i];
  run_backward(params);
}

// Value copy cut loose from the tape.
inline Tensor detach(const Tensor& t) {
  Tensor r;
  r.shape = t.shape;
  r.store = t.store;
  r.node = -1;
  return r;
}

}  // namespace poseless::ad
