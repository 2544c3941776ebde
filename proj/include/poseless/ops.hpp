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
//
// Primitive differentiable ops over dense channel-last tensors. Every op
// computes its forward value, rejects non-finite results, and (when the tape
// is recording and any input is tracked) records an analytic pull closure.

#pragma once

#include "poseless/tape.hpp"

namespace poseless::ad::ops {

inline bool tracked(const Tape& t, std::initializer_list<const Tensor*> xs) {
  if (!t.recording()) return false;
  for (const Tensor* x : xs)
    if (x->node >= 0) return true;
  return false;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

// b may be a trailing-shape broadcast of a (bias add); no other broadcasting.
inline Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  bool suffix = b.ndim() <= a.ndim() &&
      std::equal(b.shape.begin(), b.shape.end(), a.shape.end() - b.ndim());
  require(suffix, Err::ShapeMismatch,
          "add: " + shape_str(b.shape) + " is not a trailing shape of " + shape_str(a.shape));
  Tensor out(a.shape);
  const std::int64_t nb = b.size(), n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i % nb];
  check_finite(out, "add");
  if (tracked(t, {&a, &b})) {
    int an = a.node, bn = b.node;
    out.node = t.emplace(out.shape, [an, bn, nb, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      if (an >= 0) {
        auto& ga = tp.grad(an);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        auto& gb = tp.grad(bn);
        for (std::int64_t i = 0; i < n; ++i) gb[i % nb] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  check_finite(out, "sub");
  if (tracked(t, {&a, &b})) {
    int an = a.node, bn = b.node;
    std::int64_t n = a.size();
    out.node = t.emplace(out.shape, [an, bn, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      if (an >= 0) {
        auto& ga = tp.grad(an);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        auto& gb = tp.grad(bn);
        for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(out, "mul");
  if (tracked(t, {&a, &b})) {
    int an = a.node, bn = b.node;
    auto as = a.store, bs = b.store;
    std::int64_t n = a.size();
    out.node = t.emplace(out.shape, [an, bn, as, bs, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      if (an >= 0) {
        auto& ga = tp.grad(an);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bs->data()[i];
      }
      if (bn >= 0) {
        auto& gb = tp.grad(bn);
        for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * as->data()[i];
      }
    });
  }
  return out;
}

inline Tensor div(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
  check_finite(out, "div");
  if (tracked(t, {&a, &b})) {
    int an = a.node, bn = b.node;
    auto as = a.store, bs = b.store;
    std::int64_t n = a.size();
    out.node = t.emplace(out.shape, [an, bn, as, bs, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      if (an >= 0) {
        auto& ga = tp.grad(an);
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] / bs->data()[i];
      }
      if (bn >= 0) {
        auto& gb = tp.grad(bn);
        for (std::int64_t i = 0; i < n; ++i) {
          real bi = bs->data()[i];
          gb[i] -= g[i] * as->data()[i] / (bi * bi);
        }
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& t, const Tensor& a, real c) {
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
  check_finite(out, "scale");
  if (tracked(t, {&a})) {
    int an = a.node;
    std::int64_t n = a.size();
    out.node = t.emplace(out.shape, [an, c, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& ga = tp.grad(an);
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

inline Tensor add_const(Tape& t, const Tensor& a, real c) {
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + c;
  check_finite(out, "add_const");
  if (tracked(t, {&a})) {
    int an = a.node;
    std::int64_t n = a.size();
    out.node = t.emplace(out.shape, [an, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& ga = tp.grad(an);
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary(Tape& t, const Tensor& a, const char* name, Fwd f, Bwd dfdy) {
  Tensor out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out.data()[i] = f(a.data()[i]);
  check_finite(out, name);
  if (tracked(t, {&a})) {
    int an = a.node;
    auto as = a.store, os = out.store;
    std::int64_t n = a.size();
    out.node = t.emplace(out.shape, [an, as, os, n, dfdy](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& ga = tp.grad(an);
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * dfdy(as->data()[i], os->data()[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor exp(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, "exp", [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

inline Tensor relu(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, "relu", [](real x) { return x > 0 ? x : real(0); },
      [](real x, real) { return x > 0 ? real(1) : real(0); });
}

inline Tensor sigmoid(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, "sigmoid", [](real x) { return real(1) / (real(1) + std::exp(-x)); },
      [](real, real y) { return y * (real(1) - y); });
}

inline Tensor tanh(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, "tanh", [](real x) { return std::tanh(x); },
      [](real, real y) { return real(1) - y * y; });
}

inline Tensor abs(Tape& t, const Tensor& a) {
  return detail::unary(
      t, a, "abs", [](real x) { return std::abs(x); },
      [](real x, real) { return x > 0 ? real(1) : (x < 0 ? real(-1) : real(0)); });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), Err::ShapeMismatch,
          "matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      real av = pa[i * k + kk];
      const real* prow = pb + kk * n;
      real* orow = po + i * n;
      for (int j = 0; j < n; ++j) orow[j] += av * prow[j];
    }
  check_finite(out, "matmul");
  if (tracked(t, {&a, &b})) {
    int an = a.node, bn = b.node;
    auto as = a.store, bs = b.store;
    out.node = t.emplace(out.shape, [an, bn, as, bs, m, k, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      if (an >= 0) {
        auto& ga = tp.grad(an);  // dA = G * B^T
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            real acc = 0;
            const real* grow = g.data() + i * n;
            const real* brow = bs->data() + kk * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + kk] += acc;
          }
      }
      if (bn >= 0) {
        auto& gb = tp.grad(bn);  // dB = A^T * G
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            real av = as->data()[i * k + kk];
            const real* grow = g.data() + i * n;
            real* brow = gb.data() + kk * n;
            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

// C = A * B^T for row-major B of shape [n, k].
inline Tensor matmul_nt(Tape& t, const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1), Err::ShapeMismatch,
          "matmul_nt: " + shape_str(a.shape) + " x " + shape_str(b.shape) + "^T");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      real acc = 0;
      const real* arow = a.data() + i * k;
      const real* brow = b.data() + j * k;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      out.data()[i * n + j] = acc;
    }
  check_finite(out, "matmul_nt");
  if (tracked(t, {&a, &b})) {
    int an = a.node, bn = b.node;
    auto as = a.store, bs = b.store;
    out.node = t.emplace(out.shape, [an, bn, as, bs, m, k, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      if (an >= 0) {
        auto& ga = tp.grad(an);  // dA = G * B
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            real gv = g[i * n + j];
            const real* brow = bs->data() + j * k;
            real* arow = ga.data() + i * k;
            for (int kk = 0; kk < k; ++kk) arow[kk] += gv * brow[kk];
          }
      }
      if (bn >= 0) {
        auto& gb = tp.grad(bn);  // dB = G^T * A
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            real gv = g[i * n + j];
            const real* arow = as->data() + i * k;
            real* brow = gb.data() + j * k;
            for (int kk = 0; kk < k; ++kk) brow[kk] += gv * arow[kk];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution / spatial
// ---------------------------------------------------------------------------

// x: [H,W,Cin], w: [kh,kw,Cin,Cout], zero padding, output [H',W',Cout].
inline Tensor conv2d(Tape& t, const Tensor& x, const Tensor& w, int stride, int pad) {
  require(x.ndim() == 3 && w.ndim() == 4 && x.dim(2) == w.dim(2), Err::ShapeMismatch,
          "conv2d: " + shape_str(x.shape) + " with kernel " + shape_str(w.shape));
  require(stride == 1 || stride == 2, Err::InvalidArgument, "conv2d: stride must be 1 or 2");
  const int H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), Cout = w.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  require(Ho > 0 && Wo > 0, Err::ShapeMismatch, "conv2d: kernel larger than padded input");
  Tensor out = Tensor::zeros({Ho, Wo, Cout});
  const real* px = x.data();
  const real* pw = w.data();
  parallel_for(Ho, [&](std::int64_t y0, std::int64_t y1) {
    for (std::int64_t y = y0; y < y1; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        real* orow = out.data() + (y * Wo + xx) * Cout;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = static_cast<int>(y) * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = xx * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const real* xrow = px + (iy * W + ix) * Cin;
            const real* wbase = pw + ((ky * kw + kx) * Cin) * Cout;
            for (int ci = 0; ci < Cin; ++ci) {
              real xv = xrow[ci];
              const real* wrow = wbase + ci * Cout;
              for (int co = 0; co < Cout; ++co) orow[co] += xv * wrow[co];
            }
          }
        }
      }
  });
  check_finite(out, "conv2d");
  if (tracked(t, {&x, &w})) {
    int xn = x.node, wn = w.node;
    auto xs = x.store, ws = w.store;
    out.node = t.emplace(
        out.shape, [xn, wn, xs, ws, H, W, Cin, kh, kw, Cout, Ho, Wo, stride, pad](Tape& tp,
                                                                                  int self) {
          const auto& g = tp.grad(self);
          real* gx = nullptr;
          real* gw = nullptr;
          if (xn >= 0) gx = tp.grad(xn).data();
          if (wn >= 0) gw = tp.grad(wn).data();
          for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx) {
              const real* grow = g.data() + (y * Wo + xx) * Cout;
              for (int ky = 0; ky < kh; ++ky) {
                int iy = y * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ix = xx * stride - pad + kx;
                  if (ix < 0 || ix >= W) continue;
                  const std::int64_t xoff = (std::int64_t(iy) * W + ix) * Cin;
                  const std::int64_t woff = (std::int64_t(ky) * kw + kx) * Cin * Cout;
                  for (int ci = 0; ci < Cin; ++ci) {
                    const real* wrow = ws->data() + woff + ci * Cout;
                    real xv = xs->data()[xoff + ci];
                    real acc = 0;
                    for (int co = 0; co < Cout; ++co) {
                      acc += grow[co] * wrow[co];
                      if (gw) gw[woff + ci * Cout + co] += grow[co] * xv;
                    }
                    if (gx) gx[xoff + ci] += acc;
                  }
                }
              }
            }
        });
  }
  return out;
}

inline Tensor crop2d(Tape& t, const Tensor& x, int y0, int x0, int h, int w) {
  require(x.ndim() == 3, Err::ShapeMismatch, "crop2d expects [H,W,C]");
  const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  require(y0 >= 0 && x0 >= 0 && y0 + h <= H && x0 + w <= W && h > 0 && w > 0, Err::InvalidArgument,
          "crop2d window out of range");
  Tensor out({h, w, C});
  for (int y = 0; y < h; ++y)
    std::copy_n(x.data() + ((y0 + y) * W + x0) * C, std::size_t(w) * C, out.data() + y * w * C);
  if (tracked(t, {&x})) {
    int xn = x.node;
    out.node = t.emplace(out.shape, [xn, y0, x0, h, w, W, C](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(xn);
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          for (int c = 0; c < C; ++c)
            gx[((y0 + y) * W + x0 + xx) * C + c] += g[(y * w + xx) * C + c];
    });
  }
  return out;
}

// Inverse of splitting [H,W,C] into a row-major my-by-mx grid of patches.
inline Tensor assemble_grid(Tape& t, const std::vector<Tensor>& patches, int my, int mx) {
  require(static_cast<int>(patches.size()) == my * mx, Err::BadPatchGrid,
          "assemble_grid: patch count != my*mx");
  const int hp = patches[0].dim(0), wp = patches[0].dim(1), C = patches[0].dim(2);
  for (const auto& p : patches)
    require(p.dim(0) == hp && p.dim(1) == wp && p.dim(2) == C, Err::BadPatchGrid,
            "assemble_grid: ragged patches");
  const int H = my * hp, W = mx * wp;
  Tensor out({H, W, C});
  bool any = false;
  for (const auto& p : patches) any = any || p.node >= 0;
  for (int a = 0; a < my; ++a)
    for (int b = 0; b < mx; ++b) {
      const Tensor& p = patches[a * mx + b];
      for (int y = 0; y < hp; ++y)
        std::copy_n(p.data() + y * wp * C, std::size_t(wp) * C,
                    out.data() + ((a * hp + y) * W + b * wp) * C);
    }
  if (t.recording() && any) {
    std::vector<int> nodes(patches.size());
    for (std::size_t i = 0; i < patches.size(); ++i) nodes[i] = patches[i].node;
    out.node = t.emplace(out.shape, [nodes, my, mx, hp, wp, C, W](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      for (int a = 0; a < my; ++a)
        for (int b = 0; b < mx; ++b) {
          int pn = nodes[std::size_t(a) * mx + b];
          if (pn < 0) continue;
          auto& gp = tp.grad(pn);
          for (int y = 0; y < hp; ++y)
            for (int xx = 0; xx < wp; ++xx)
              for (int c = 0; c < C; ++c)
                gp[(y * wp + xx) * C + c] += g[((a * hp + y) * W + b * wp + xx) * C + c];
        }
    });
  }
  return out;
}

inline Tensor concat_lastdim(Tape& t, const Tensor& a, const Tensor& b) {
  require(a.ndim() == b.ndim(), Err::ShapeMismatch, "concat_lastdim rank mismatch");
  for (int i = 0; i + 1 < a.ndim(); ++i)
    require(a.dim(i) == b.dim(i), Err::ShapeMismatch, "concat_lastdim leading dims differ");
  const int ca = a.dim(a.ndim() - 1), cb = b.dim(b.ndim() - 1);
  Shape os = a.shape;
  os.back() = ca + cb;
  Tensor out(os);
  const std::int64_t rows = a.size() / ca;
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy_n(a.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(b.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  if (tracked(t, {&a, &b})) {
    int an = a.node, bn = b.node;
    out.node = t.emplace(out.shape, [an, bn, ca, cb, rows](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      if (an >= 0) {
        auto& ga = tp.grad(an);
        for (std::int64_t r = 0; r < rows; ++r)
          for (int c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
      }
      if (bn >= 0) {
        auto& gb = tp.grad(bn);
        for (std::int64_t r = 0; r < rows; ++r)
          for (int c = 0; c < cb; ++c) gb[r * cb + c] += g[r * (ca + cb) + ca + c];
      }
    });
  }
  return out;
}

inline Tensor slice_lastdim(Tape& t, const Tensor& x, int c0, int c1) {
  const int C = x.dim(x.ndim() - 1);
  require(0 <= c0 && c0 < c1 && c1 <= C, Err::InvalidArgument, "slice_lastdim range");
  Shape os = x.shape;
  os.back() = c1 - c0;
  Tensor out(os);
  const std::int64_t rows = x.size() / C;
  const int cw = c1 - c0;
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(x.data() + r * C + c0, cw, out.data() + r * cw);
  if (tracked(t, {&x})) {
    int xn = x.node;
    out.node = t.emplace(out.shape, [xn, c0, cw, C, rows](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(xn);
      for (std::int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < cw; ++c) gx[r * C + c0 + c] += g[r * cw + c];
    });
  }
  return out;
}

// Zero-copy view with a new shape.
inline Tensor reshape(Tape& t, const Tensor& x, Shape s) {
  require(numel(s) == x.size(), Err::ShapeMismatch,
          "reshape: " + shape_str(x.shape) + " -> " + shape_str(s));
  Tensor out;
  out.shape = std::move(s);
  out.store = x.store;
  if (tracked(t, {&x})) {
    int xn = x.node;
    std::int64_t n = x.size();
    out.node = t.emplace(out.shape, [xn, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(xn);
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

inline Tensor upsample2x(Tape& t, const Tensor& x) {
  require(x.ndim() == 3, Err::ShapeMismatch, "upsample2x expects [H,W,C]");
  const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  Tensor out({2 * H, 2 * W, C});
  for (int y = 0; y < 2 * H; ++y)
    for (int xx = 0; xx < 2 * W; ++xx)
      std::copy_n(x.data() + ((y / 2) * W + xx / 2) * C, C, out.data() + (y * 2 * W + xx) * C);
  if (tracked(t, {&x})) {
    int xn = x.node;
    out.node = t.emplace(out.shape, [xn, H, W, C](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(xn);
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx)
          for (int c = 0; c < C; ++c)
            gx[((y / 2) * W + xx / 2) * C + c] += g[(y * 2 * W + xx) * C + c];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / normalization
// ---------------------------------------------------------------------------

inline Tensor softmax_lastdim(Tape& t, const Tensor& x) {
  const int n = x.dim(x.ndim() - 1);
  const std::int64_t rows = x.size() / n;
  Tensor out(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const real* xr = x.data() + r * n;
    real* yr = out.data() + r * n;
    real mx = xr[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    real s = 0;
    for (int i = 0; i < n; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      s += yr[i];
    }
    for (int i = 0; i < n; ++i) yr[i] /= s;
  }
  check_finite(out, "softmax");
  if (tracked(t, {&x})) {
    int xn = x.node;
    auto os = out.store;
    out.node = t.emplace(out.shape, [xn, os, rows, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(xn);
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* y = os->data() + r * n;
        const real* gr = g.data() + r * n;
        real dot = 0;
        for (int i = 0; i < n; ++i) dot += gr[i] * y[i];
        for (int i = 0; i < n; ++i) gx[r * n + i] += y[i] * (gr[i] - dot);
      }
    });
  }
  return out;
}

inline Tensor reduce_sum_all(Tape& t, const Tensor& x) {
  Tensor out({1});
  real s = 0;
  for (std::int64_t i = 0; i < x.size(); ++i) s += x.data()[i];
  out.data()[0] = s;
  check_finite(out, "reduce_sum");
  if (tracked(t, {&x})) {
    int xn = x.node;
    std::int64_t n = x.size();
    out.node = t.emplace(out.shape, [xn, n](Tape& tp, int self) {
      real g = tp.grad(self)[0];
      auto& gx = tp.grad(xn);
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

inline Tensor reduce_mean_all(Tape& t, const Tensor& x) {
  return scale(t, reduce_sum_all(t, x), real(1) / real(x.size()));
}

// [..., n] -> [...]: sum over the last axis.
inline Tensor reduce_sum_lastdim(Tape& t, const Tensor& x) {
  require(x.ndim() >= 2, Err::ShapeMismatch, "reduce_sum_lastdim needs rank >= 2");
  const int n = x.dim(x.ndim() - 1);
  Shape os(x.shape.begin(), x.shape.end() - 1);
  Tensor out(os);
  const std::int64_t rows = out.size();
  for (std::int64_t r = 0; r < rows; ++r) {
    real s = 0;
    for (int i = 0; i < n; ++i) s += x.data()[r * n + i];
    out.data()[r] = s;
  }
  check_finite(out, "reduce_sum_lastdim");
  if (tracked(t, {&x})) {
    int xn = x.node;
    out.node = t.emplace(out.shape, [xn, rows, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(xn);
      for (std::int64_t r = 0; r < rows; ++r)
        for (int i = 0; i < n; ++i) gx[r * n + i] += g[r];
    });
  }
  return out;
}

// [n, c] -> [c]: mean over rows.
inline Tensor reduce_mean_rows(Tape& t, const Tensor& x) {
  require(x.ndim() == 2, Err::ShapeMismatch, "reduce_mean_rows expects [n,c]");
  const int n = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({c});
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < c; ++j) out.data()[j] += x.data()[r * c + j];
  for (int j = 0; j < c; ++j) out.data()[j] /= real(n);
  check_finite(out, "reduce_mean_rows");
  if (tracked(t, {&x})) {
    int xn = x.node;
    out.node = t.emplace(out.shape, [xn, n, c](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(xn);
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < c; ++j) gx[r * c + j] += g[j] / real(n);
    });
  }
  return out;
}

// y[r,:] = x[r,:] * s[r]
inline Tensor row_scale(Tape& t, const Tensor& x, const Tensor& s) {
  require(x.ndim() == 2 && s.ndim() == 1 && s.dim(0) == x.dim(0), Err::ShapeMismatch,
          "row_scale: " + shape_str(x.shape) + " with " + shape_str(s.shape));
  const int n = x.dim(0), c = x.dim(1);
  Tensor out(x.shape);
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < c; ++j) out.data()[r * c + j] = x.data()[r * c + j] * s.data()[r];
  check_finite(out, "row_scale");
  if (tracked(t, {&x, &s})) {
    int xn = x.node, sn = s.node;
    auto xs = x.store, ss = s.store;
    out.node = t.emplace(out.shape, [xn, sn, xs, ss, n, c](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      if (xn >= 0) {
        auto& gx = tp.grad(xn);
        for (int r = 0; r < n; ++r)
          for (int j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * ss->data()[r];
      }
      if (sn >= 0) {
        auto& gs = tp.grad(sn);
        for (int r = 0; r < n; ++r) {
          real acc = 0;
          for (int j = 0; j < c; ++j) acc += g[r * c + j] * xs->data()[r * c + j];
          gs[r] += acc;
        }
      }
    });
  }
  return out;
}

inline Tensor normalize_lastdim(Tape& t, const Tensor& x) {
  const int n = x.dim(x.ndim() - 1);
  const std::int64_t rows = x.size() / n;
  Tensor out(x.shape);
  std::vector<real> norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    real s = 0;
    for (int i = 0; i < n; ++i) s += x.data()[r * n + i] * x.data()[r * n + i];
    real rn = std::sqrt(std::max(s, real(1e-30)));
    norms[static_cast<std::size_t>(r)] = rn;
    for (int i = 0; i < n; ++i) out.data()[r * n + i] = x.data()[r * n + i] / rn;
  }
  check_finite(out, "normalize_lastdim");
  if (tracked(t, {&x})) {
    int xn = x.node;
    auto os = out.store;
    out.node = t.emplace(out.shape, [xn, os, norms, rows, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gx = tp.grad(xn);
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* y = os->data() + r * n;
        const real* gr = g.data() + r * n;
        real dot = 0;
        for (int i = 0; i < n; ++i) dot += gr[i] * y[i];
        real rn = norms[static_cast<std::size_t>(r)];
        for (int i = 0; i < n; ++i) gx[r * n + i] += (gr[i] - y[i] * dot) / rn;
      }
    });
  }
  return out;
}

inline Tensor layer_norm(Tape& t, const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int n = x.dim(x.ndim() - 1);
  require(gain.ndim() == 1 && gain.dim(0) == n && bias.ndim() == 1 && bias.dim(0) == n,
          Err::ShapeMismatch, "layer_norm gain/bias must be [C]");
  constexpr real eps = 1e-5;
  const std::int64_t rows = x.size() / n;
  Tensor out(x.shape);
  Tensor xhat(x.shape);
  std::vector<real> inv_sigma(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const real* xr = x.data() + r * n;
    real mu = 0;
    for (int i = 0; i < n; ++i) mu += xr[i];
    mu /= n;
    real var = 0;
    for (int i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= n;
    real is = real(1) / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(r)] = is;
    for (int i = 0; i < n; ++i) {
      xhat.data()[r * n + i] = (xr[i] - mu) * is;
      out.data()[r * n + i] = xhat.data()[r * n + i] * gain.data()[i] + bias.data()[i];
    }
  }
  check_finite(out, "layer_norm");
  if (tracked(t, {&x, &gain, &bias})) {
    int xn = x.node, gn = gain.node, bn = bias.node;
    auto hs = xhat.store, gs = gain.store;
    out.node = t.emplace(out.shape, [xn, gn, bn, hs, gs, inv_sigma, rows, n](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      for (std::int64_t r = 0; r < rows; ++r) {
        const real* h = hs->data() + r * n;
        const real* gr = g.data() + r * n;
        if (bn >= 0) {
          auto& gb = tp.grad(bn);
          for (int i = 0; i < n; ++i) gb[i] += gr[i];
        }
        if (gn >= 0) {
          auto& gg = tp.grad(gn);
          for (int i = 0; i < n; ++i) gg[i] += gr[i] * h[i];
        }
        if (xn >= 0) {
          auto& gx = tp.grad(xn);
          real m1 = 0, m2 = 0;
          for (int i = 0; i < n; ++i) {
            real dh = gr[i] * gs->data()[i];
            m1 += dh;
            m2 += dh * h[i];
          }
          m1 /= n;
          m2 /= n;
          real is = inv_sigma[static_cast<std::size_t>(r)];
          for (int i = 0; i < n; ++i) {
            real dh = gr[i] * gs->data()[i];
            gx[r * n + i] += is * (dh - m1 - h[i] * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention contractions
// ---------------------------------------------------------------------------

// l[p,s] = c * <q[p,:], k[p,s,:]>
inline Tensor attn_logits(Tape& t, const Tensor& q, const Tensor& k, real c) {
  require(q.ndim() == 2 && k.ndim() == 3 && q.dim(0) == k.dim(0) && q.dim(1) == k.dim(2),
          Err::ShapeMismatch, "attn_logits: q " + shape_str(q.shape) + " k " + shape_str(k.shape));
  const int P = q.dim(0), S = k.dim(1), C = q.dim(1);
  Tensor out({P, S});
  for (int p = 0; p < P; ++p)
    for (int s = 0; s < S; ++s) {
      real acc = 0;
      const real* qr = q.data() + p * C;
      const real* kr = k.data() + (p * S + s) * C;
      for (int i = 0; i < C; ++i) acc += qr[i] * kr[i];
      out.data()[p * S + s] = acc * c;
    }
  check_finite(out, "attn_logits");
  if (tracked(t, {&q, &k})) {
    int qn = q.node, kn = k.node;
    auto qs = q.store, ks = k.store;
    out.node = t.emplace(out.shape, [qn, kn, qs, ks, P, S, C, c](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      for (int p = 0; p < P; ++p)
        for (int s = 0; s < S; ++s) {
          real gv = g[p * S + s] * c;
          if (qn >= 0) {
            auto& gq = tp.grad(qn);
            const real* kr = ks->data() + (p * S + s) * C;
            for (int i = 0; i < C; ++i) gq[p * C + i] += gv * kr[i];
          }
          if (kn >= 0) {
            auto& gk = tp.grad(kn);
            const real* qr = qs->data() + p * C;
            for (int i = 0; i < C; ++i) gk[(p * S + s) * C + i] += gv * qr[i];
          }
        }
    });
  }
  return out;
}

// o[p,:] = sum_s w[p,s] * v[p,s,:]
inline Tensor attn_mix(Tape& t, const Tensor& w, const Tensor& v) {
  require(w.ndim() == 2 && v.ndim() == 3 && w.dim(0) == v.dim(0) && w.dim(1) == v.dim(1),
          Err::ShapeMismatch, "attn_mix: w " + shape_str(w.shape) + " v " + shape_str(v.shape));
  const int P = w.dim(0), S = w.dim(1), C = v.dim(2);
  Tensor out = Tensor::zeros({P, C});
  for (int p = 0; p < P; ++p)
    for (int s = 0; s < S; ++s) {
      real wv = w.data()[p * S + s];
      const real* vr = v.data() + (p * S + s) * C;
      real* orow = out.data() + p * C;
      for (int i = 0; i < C; ++i) orow[i] += wv * vr[i];
    }
  check_finite(out, "attn_mix");
  if (tracked(t, {&w, &v})) {
    int wn = w.node, vn = v.node;
    auto ws = w.store, vs = v.store;
    out.node = t.emplace(out.shape, [wn, vn, ws, vs, P, S, C](Tape& tp, int self) {
      const auto& g = tp.grad(self);
      for (int p = 0; p < P; ++p)
        for (int s = 0; s < S; ++s) {
          const real* gr = g.data() + p * C;
          if (wn >= 0) {
            auto& gw = tp.grad(wn);
            const real* vr = vs->data() + (p * S + s) * C;
            real acc = 0;
            for (int i = 0; i < C; ++i) acc += gr[i] * vr[i];
            gw[p * S + s] += acc;
          }
          if (vn >= 0) {
            auto& gv = tp.grad(vn);
            real wv = ws->data()[p * S + s];
            for (int i = 0; i < C; ++i) gv[(p * S + s) * C + i] += wv * gr[i];
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// recurrent cell
// ---------------------------------------------------------------------------

struct GruCellWeights {
  Tensor wxz, whz, bz;
  Tensor wxr, whr, br;
  Tensor wxc, whc, bc;
};

// Dense GRU cell over [n, in] inputs and [n, hid] state. Composite of
// primitives, so its backward is assembled from theirs.
inline Tensor gru_cell(Tape& t, const Tensor& x, const Tensor& h, const GruCellWeights& w) {
  Tensor z = sigmoid(t, add(t, add(t, matmul(t, x, w.wxz), matmul(t, h, w.whz)), w.bz));
  Tensor r = sigmoid(t, add(t, add(t, matmul(t, x, w.wxr), matmul(t, h, w.whr)), w.br));
  Tensor cand =
      tanh(t, add(t, add(t, matmul(t, x, w.wxc), matmul(t, mul(t, r, h), w.whc)), w.bc));
  // h' = h + z * (cand - h): convex blend of prior state and candidate.
  return add(t, h, mul(t, z, sub(t, cand, h)));
}

}  // namespace poseless::ad::ops
