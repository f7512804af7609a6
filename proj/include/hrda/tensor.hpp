// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hrda/common.hpp"

namespace hrda {

// Shared handle over a dense row-major buffer. Values are written once by the
// op that creates the tensor; afterwards only grad accumulates (optimizer and
// EMA updates are the deliberate exceptions, they mutate leaf parameters
// outside any recorded graph).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<Impl>();
    t.d_->shape = shape;
    t.d_->n = count(shape);
    t.d_->v.assign(static_cast<std::size_t>(t.d_->n), 0.0);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(const std::vector<int>& shape, real value) {
    Tensor t = zeros(shape);
    for (auto& x : t.d_->v) x = value;
    return t;
  }

  static Tensor from_data(const std::vector<int>& shape, std::vector<real> values,
                          bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<Impl>();
    t.d_->shape = shape;
    t.d_->n = count(shape);
    check(static_cast<long long>(values.size()) == t.d_->n,
          "Tensor::from_data: value count does not match shape");
    t.d_->v = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(real v) { return from_data({1}, {v}); }

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<int>& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape.at(static_cast<std::size_t>(i)); }
  long long size() const { return d_->n; }

  real* data() { return d_->v.data(); }
  const real* data() const { return d_->v.data(); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  // lazily allocated, zero-initialized
  real* grad() {
    if (d_->g.empty()) d_->g.assign(d_->v.size(), 0.0);
    return d_->g.data();
  }
  bool has_grad() const { return !d_->g.empty(); }
  void zero_grad() {
    for (auto& x : d_->g) x = 0.0;
  }

  real value() const {
    check(d_ && d_->n == 1, "Tensor::value: tensor is not scalar");
    return d_->v[0];
  }

  real at(std::initializer_list<int> idx) const { return d_->v[offset(idx)]; }
  real& at(std::initializer_list<int> idx) { return d_->v[offset(idx)]; }

  Tensor detached_copy() const {
    Tensor t;
    t.d_ = std::make_shared<Impl>();
    t.d_->shape = d_->shape;
    t.d_->n = d_->n;
    t.d_->v = d_->v;
    return t;
  }

  bool same_shape(const Tensor& o) const { return d_->shape == o.d_->shape; }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<real> v;
    std::vector<real> g;
    long long n = 0;
    bool requires_grad = false;
  };

  std::size_t offset(std::initializer_list<int> idx) const {
    check(static_cast<int>(idx.size()) == rank(), "Tensor::at: index rank mismatch");
    long long off = 0;
    int i = 0;
    for (int v : idx) {
      check(v >= 0 && v < d_->shape[static_cast<std::size_t>(i)], "Tensor::at: index out of range");
      off = off * d_->shape[static_cast<std::size_t>(i)] + v;
      ++i;
    }
    return static_cast<std::size_t>(off);
  }

  static long long count(const std::vector<int>& shape) {
    check(!shape.empty(), "Tensor: empty shape");
    long long n = 1;
    for (int d : shape) {
      check(d > 0, "Tensor: dimensions must be positive");
      n *= d;
    }
    return n;
  }

  std::shared_ptr<Impl> d_;
};

// Tape of backward closures in execution order. backward() seeds d(loss)/d(loss)=1
// and replays the tape in reverse; closures accumulate into .grad() via +=.
class Graph {
 public:
  void record(std::function<void()> back) { tape_.push_back(std::move(back)); }

  std::size_t size() const { return tape_.size(); }

  void backward(Tensor loss) {
    check(loss.defined() && loss.size() == 1, "Graph::backward: loss must be scalar");
    check(loss.requires_grad(), "Graph::backward: loss does not require grad");
    loss.grad()[0] = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> tape_;
};

inline bool tracked(const Graph* g, std::initializer_list<const Tensor*> ins) {
  if (g == nullptr) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

inline std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (int i = 0; i < t.rank(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.dim(i));
  }
  return s + "]";
}

}  // namespace hrda
