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

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace poseless {

// Test builds run in f64; define POSELESS_F32 for the fast f32 configuration.
#ifdef POSELESS_F32
using real = float;
#else
using real = double;
#endif

using Rng = std::mt19937_64;

enum class Err {
  InvalidArgument,
  BehindCamera,
  NonPositiveDepth,
  ShapeMismatch,
  NonFiniteValue,
  EmptyTape,
  NonScalarLoss,
  BadResolution,
  NoValidPixels,
  NonFiniteUpdate,
  BadPatchGrid,
  TooFewViews,
  MissingIntrinsics,
  UnreadableImage,
  InsufficientViews,
  EmptyMask,
  PatchMismatch,
  ConfigError,
  IoError,
};

struct Error : std::runtime_error {
  Err code;
  Error(Err c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

[[noreturn]] inline void fail(Err c, const std::string& msg) { throw Error(c, msg); }

inline void require(bool ok, Err c, const std::string& msg) {
  if (!ok) fail(c, msg);
}

// Live/peak accounting of tensor storage, used by the deferred-backprop
// memory assertions. Counts bytes held by ad::Storage only.
namespace mem {

inline std::atomic<std::size_t>& live_bytes() {
  static std::atomic<std::size_t> v{0};
  return v;
}

inline std::atomic<std::size_t>& peak_bytes() {
  static std::atomic<std::size_t> v{0};
  return v;
}

inline void on_alloc(std::size_t n) {
  std::size_t now = live_bytes().fetch_add(n) + n;
  std::size_t prev = peak_bytes().load();
  while (prev < now && !peak_bytes().compare_exchange_weak(prev, now)) {
  }
}

inline void on_free(std::size_t n) { live_bytes().fetch_sub(n); }

inline void reset_peak() { peak_bytes().store(live_bytes().load()); }

}  // namespace mem

namespace threading {

inline int& pool_size() {
  static int n = 1;
  return n;
}

inline void set_threads(int n) { pool_size() = n < 1 ? 1 : n; }

}  // namespace threading

// Runs fn(begin, end) over [0, n) in contiguous chunks. Chunk boundaries are a
// pure function of (n, thread count), and callers only use this where chunks
// write disjoint outputs, so results do not depend on scheduling.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  int workers = threading::pool_size();
  if (workers <= 1 || n < 256) {
    fn(std::int64_t{0}, n);
    return;
  }
  if (workers > n) workers = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    std::int64_t b = w * chunk;
    std::int64_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& t : pool) t.join();
}

inline bool almost_equal(real a, real b, real tol) { return std::abs(a - b) <= tol; }

}  // namespace poseless
