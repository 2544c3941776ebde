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

#include <algorithm>
#include <memory>
#include <numeric>
#include <sstream>

#include "poseless/common.hpp"

namespace poseless::ad {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense value buffer; registers its footprint with the live-byte counter so
// deferred back-propagation can assert its activation bound.
class Storage {
 public:
  explicit Storage(std::int64_t n) : v_(static_cast<std::size_t>(n)) {
    mem::on_alloc(bytes());
  }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;
  ~Storage() { mem::on_free(bytes()); }

  real* data() { return v_.data(); }
  const real* data() const { return v_.data(); }
  std::size_t size() const { return v_.size(); }
  std::size_t bytes() const { return v_.size() * sizeof(real); }

 private:
  std::vector<real> v_;
};

// Value handle. `node` indexes the recording tape when the value is tracked
// for differentiation; -1 marks a constant.
struct Tensor {
  Shape shape;
  std::shared_ptr<Storage> store;
  int node = -1;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), store(std::make_shared<Storage>(numel(shape))) {}

  std::int64_t size() const { return store ? static_cast<std::int64_t>(store->size()) : 0; }
  bool defined() const { return static_cast<bool>(store); }
  real* data() { return store->data(); }
  const real* data() const { return store->data(); }
  real scalar() const {
    require(size() == 1, Err::NonScalarLoss, "expected a scalar tensor, got " + shape_str(shape));
    return data()[0];
  }

  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  static Tensor zeros(Shape s) {
    Tensor t(std::move(s));
    std::fill(t.data(), t.data() + t.size(), real(0));
    return t;
  }
  static Tensor full(Shape s, real v) {
    Tensor t(std::move(s));
    std::fill(t.data(), t.data() + t.size(), v);
    return t;
  }
  static Tensor from(Shape s, std::vector<real> vals) {
    Tensor t(std::move(s));
    require(static_cast<std::int64_t>(vals.size()) == t.size(), Err::ShapeMismatch,
            "from(): value count does not match shape");
    std::copy(vals.begin(), vals.end(), t.data());
    return t;
  }
  static Tensor uniform(Shape s, Rng& rng, real lo = -1, real hi = 1) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<real> d(lo, hi);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = d(rng);
    return t;
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  require(same_shape(a, b), Err::ShapeMismatch,
          std::string(what) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

inline void check_finite(const Tensor& t, const char* what) {
  const real* p = t.data();
  for (std::int64_t i = 0, n = t.size(); i < n; ++i) {
    if (!std::isfinite(p[i]))
      fail(Err::NonFiniteValue, std::string(what) + " produced a non-finite value");
  }
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) return false;
  return std::equal(a.data(), a.data() + a.size(), b.data());
}

inline real max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  real m = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace poseless::ad
