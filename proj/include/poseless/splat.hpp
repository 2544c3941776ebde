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
// Differentiable forward splatting of 3D Gaussian sets: EWA projection,
// front-to-back alpha compositing, a tiled fast path, a naive oracle path,
// and the analytic backward used for deferred gradient injection.

#pragma once

#include <numeric>

#include "poseless/gaussians.hpp"
#include "poseless/ops.hpp"

namespace poseless::splat {

struct RenderOptions {
  int tile_size = 16;
  double near_plane = 0.01;
  // Tiled-path culling radius in standard deviations. exp(-7.5^2/2) < 1e-12,
  // so contributions dropped relative to the naive path stay below 1e-12.
  double cull_sigma = 7.5;
  double alpha_clamp = 0.9999;
  double stop_transmittance = 1e-15;
};

struct Window {
  int x0 = 0, y0 = 0, w = 0, h = 0;
};

inline Window full_window(const Camera& cam) { return Window{0, 0, cam.width, cam.height}; }

struct RenderOutput {
  ad::Tensor color;      // [h,w,3]
  ad::Tensor depth;      // [h,w] expected depth
  ad::Tensor alpha_acc;  // [h,w]
};

namespace detail {

struct Projected {
  bool valid = false;
  Vec3 p_cam = Vec3::Zero();
  Vec2 mean = Vec2::Zero();
  Mat2 inv = Mat2::Zero();
  double radius = 0;
  real alpha = 0, r = 0, g = 0, b = 0;
  // saved for the backward chain
  Mat23 J = Mat23::Zero();
  Mat3 M = Mat3::Zero();
  Mat3 Rq = Mat3::Identity();
  Mat2 Q = Mat2::Zero();
  Vec3 s = Vec3::Ones();
  Eigen::Vector4d qhat = Eigen::Vector4d::Zero();
  double qnorm = 1;
};

inline Projected project_gaussian(const GaussianArrays& g, int i, const Camera& cam,
                                  const SE3Pose& pose, const Mat3& r_cw,
                                  const RenderOptions& opt) {
  Projected p;
  Vec3 mu(g.mu[i * 3], g.mu[i * 3 + 1], g.mu[i * 3 + 2]);
  p.p_cam = pose.apply(mu);
  if (p.p_cam.z() <= opt.near_plane) return p;

  Eigen::Vector4d q(g.rot[i * 4], g.rot[i * 4 + 1], g.rot[i * 4 + 2], g.rot[i * 4 + 3]);
  p.qnorm = q.norm();
  if (p.qnorm < 1e-12) return p;
  p.qhat = q / p.qnorm;
  const double w = p.qhat[0], x = p.qhat[1], y = p.qhat[2], z = p.qhat[3];
  p.Rq << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);

  p.s = Vec3(g.scale[i * 3], g.scale[i * 3 + 1], g.scale[i * 3 + 2]);
  if (p.s.minCoeff() <= 0) return p;
  p.M = r_cw * p.Rq * p.s.asDiagonal();
  p.J = projection_jacobian(p.p_cam, cam);
  Mat23 A = p.J * p.M;
  Mat2 cov = A * A.transpose();
  double det = cov.determinant();
  if (!(det > 1e-250) || !std::isfinite(det)) return p;
  p.Q << cov(1, 1) / det, -cov(0, 1) / det, -cov(0, 1) / det, cov(0, 0) / det;
  p.inv = p.Q;
  double mid = 0.5 * (cov(0, 0) + cov(1, 1));
  double lmax = mid + std::sqrt(std::max(mid * mid - det, 0.0));
  p.radius = opt.cull_sigma * std::sqrt(lmax);
  p.mean = Vec2(cam.fx * p.p_cam.x() / p.p_cam.z() + cam.cx,
                cam.fy * p.p_cam.y() / p.p_cam.z() + cam.cy);
  p.alpha = g.alpha[i];
  p.r = g.color[i * 3];
  p.g = g.color[i * 3 + 1];
  p.b = g.color[i * 3 + 2];
  p.valid = true;
  return p;
}

struct Prepared {
  std::vector<Projected> proj;
  std::vector<int> order;  // valid gaussians, depth-sorted, ties by index
};

inline Prepared prepare(const GaussianArrays& g, const Camera& cam, const SE3Pose& pose,
                        const RenderOptions& opt) {
  Prepared out;
  out.proj.resize(static_cast<std::size_t>(g.count));
  Mat3 r_cw = pose.rotation();
  for (int i = 0; i < g.count; ++i)
    out.proj[std::size_t(i)] = project_gaussian(g, i, cam, pose, r_cw, opt);
  out.order.reserve(out.proj.size());
  for (int i = 0; i < g.count; ++i)
    if (out.proj[std::size_t(i)].valid) out.order.push_back(i);
  std::stable_sort(out.order.begin(), out.order.end(), [&](int a, int b) {
    return out.proj[std::size_t(a)].p_cam.z() < out.proj[std::size_t(b)].p_cam.z();
  });
  return out;
}

// Tile lists over the full-image tile grid, so a pixel's contributor list does
// not depend on the render window (window renders crop bitwise).
inline std::vector<std::vector<int>> bin_tiles(const Prepared& prep, const Camera& cam,
                                               const RenderOptions& opt, int& ntx, int& nty) {
  ntx = (cam.width + opt.tile_size - 1) / opt.tile_size;
  nty = (cam.height + opt.tile_size - 1) / opt.tile_size;
  std::vector<std::vector<int>> tiles(static_cast<std::size_t>(ntx * nty));
  for (int idx : prep.order) {
    const Projected& p = prep.proj[std::size_t(idx)];
    int tx0 = std::max(0, int(std::floor((p.mean.x() - p.radius) / opt.tile_size)));
    int tx1 = std::min(ntx - 1, int(std::floor((p.mean.x() + p.radius) / opt.tile_size)));
    int ty0 = std::max(0, int(std::floor((p.mean.y() - p.radius) / opt.tile_size)));
    int ty1 = std::min(nty - 1, int(std::floor((p.mean.y() + p.radius) / opt.tile_size)));
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx)
        tiles[std::size_t(ty * ntx + tx)].push_back(idx);
  }
  return tiles;
}

struct Contribution {
  int idx;
  real a;       // effective alpha after the kernel (and clamp)
  real gk;      // kernel value exp(-rho/2); 0 marks a clamped contribution
  real dx, dy;  // pixel offset from the projected mean
};

// Shared compositing walk. `culled` enables the tiled-path cutoffs; the naive
// oracle runs with culled=false and composites everything.
template <typename Fn>
inline void walk_pixel(const std::vector<Projected>& proj, const std::vector<int>& list,
                       double px, double py, const RenderOptions& opt, bool culled, Fn&& fn) {
  const double rho_max = opt.cull_sigma * opt.cull_sigma;
  real T = 1;
  for (int idx : list) {
    const Projected& p = proj[std::size_t(idx)];
    const real dx = static_cast<real>(px - p.mean.x());
    const real dy = static_cast<real>(py - p.mean.y());
    const real rho = p.inv(0, 0) * dx * dx + 2 * p.inv(0, 1) * dx * dy + p.inv(1, 1) * dy * dy;
    if (rho < 0) continue;
    if (culled && rho > rho_max) continue;
    real gk = std::exp(real(-0.5) * rho);
    real a = p.alpha * gk;
    bool clamped = false;
    if (a > opt.alpha_clamp) {
      a = static_cast<real>(opt.alpha_clamp);
      clamped = true;
    }
    if (culled && a < 1e-14) continue;
    fn(Contribution{idx, a, clamped ? real(0) : gk, dx, dy}, T);
    T *= (1 - a);
    if (culled && T < opt.stop_transmittance) break;
  }
}

inline void composite_pixel(const std::vector<Projected>& proj, const std::vector<int>& list,
                            double px, double py, const RenderOptions& opt, bool culled,
                            real* rgb, real* depth, real* acc) {
  walk_pixel(proj, list, px, py, opt, culled, [&](const Contribution& c, real T) {
    const Projected& p = proj[std::size_t(c.idx)];
    const real w = c.a * T;
    rgb[0] += w * p.r;
    rgb[1] += w * p.g;
    rgb[2] += w * p.b;
    *depth += w * static_cast<real>(p.p_cam.z());
    *acc += w;
  });
}

}  // namespace detail

// Tiled forward renderer. An all-culled set yields a black image with zero
// accumulated alpha rather than an error.
inline RenderOutput render(const GaussianArrays& g, const Camera& cam, const SE3Pose& pose,
                           const RenderOptions& opt = {}, Window win = {}) {
  if (win.w == 0) win = full_window(cam);
  RenderOutput out;
  out.color = ad::Tensor::zeros({win.h, win.w, 3});
  out.depth = ad::Tensor::zeros({win.h, win.w});
  out.alpha_acc = ad::Tensor::zeros({win.h, win.w});
  detail::Prepared prep = detail::prepare(g, cam, pose, opt);
  if (prep.order.empty()) return out;
  int ntx = 0, nty = 0;
  auto tiles = detail::bin_tiles(prep, cam, opt, ntx, nty);
  parallel_for(win.h, [&](std::int64_t yy0, std::int64_t yy1) {
    for (std::int64_t y = yy0; y < yy1; ++y) {
      int gy = win.y0 + static_cast<int>(y);
      for (int x = 0; x < win.w; ++x) {
        int gx = win.x0 + x;
        const auto& list = tiles[std::size_t((gy / opt.tile_size) * ntx + gx / opt.tile_size)];
        detail::composite_pixel(prep.proj, list, gx, gy, opt, true,
                                out.color.data() + (y * win.w + x) * 3,
                                out.depth.data() + y * win.w + x,
                                out.alpha_acc.data() + y * win.w + x);
      }
    }
  });
  return out;
}

// Oracle path: per-pixel-per-Gaussian compositing with no tiling or culling.
inline RenderOutput render_naive(const GaussianArrays& g, const Camera& cam, const SE3Pose& pose,
                                 const RenderOptions& opt = {}, Window win = {}) {
  if (win.w == 0) win = full_window(cam);
  RenderOutput out;
  out.color = ad::Tensor::zeros({win.h, win.w, 3});
  out.depth = ad::Tensor::zeros({win.h, win.w});
  out.alpha_acc = ad::Tensor::zeros({win.h, win.w});
  detail::Prepared prep = detail::prepare(g, cam, pose, opt);
  for (int y = 0; y < win.h; ++y)
    for (int x = 0; x < win.w; ++x)
      detail::composite_pixel(prep.proj, prep.order, win.x0 + x, win.y0 + y, opt, false,
                              out.color.data() + (std::int64_t(y) * win.w + x) * 3,
                              out.depth.data() + std::int64_t(y) * win.w + x,
                              out.alpha_acc.data() + std::int64_t(y) * win.w + x);
  return out;
}

struct GaussianGrads {
  std::vector<real> mu, scale, rot, alpha, color;

  explicit GaussianGrads(int count)
      : mu(std::size_t(count) * 3, 0),
        scale(std::size_t(count) * 3, 0),
        rot(std::size_t(count) * 4, 0),
        alpha(std::size_t(count), 0),
        color(std::size_t(count) * 3, 0) {}
};

// Analytic gradients of sum(cotangent * color_image) w.r.t. every Gaussian
// parameter, matching the tiled forward pass pixel for pixel.
inline GaussianGrads render_backward(const GaussianArrays& g, const Camera& cam,
                                     const SE3Pose& pose, const ad::Tensor& cotangent,
                                     const RenderOptions& opt = {}, Window win = {}) {
  if (win.w == 0) win = full_window(cam);
  require(cotangent.ndim() == 3 && cotangent.dim(0) == win.h && cotangent.dim(1) == win.w &&
              cotangent.dim(2) == 3,
          Err::ShapeMismatch, "render_backward: cotangent must be [h,w,3]");
  GaussianGrads out(g.count);
  detail::Prepared prep = detail::prepare(g, cam, pose, opt);
  if (prep.order.empty()) return out;
  int ntx = 0, nty = 0;
  auto tiles = detail::bin_tiles(prep, cam, opt, ntx, nty);

  // Per-gaussian 2D-level accumulators: d(mean2d), d(d d^T), d(alpha), d(rgb).
  std::vector<double> acc_mean(std::size_t(g.count) * 2, 0.0);
  std::vector<double> acc_ddt(std::size_t(g.count) * 3, 0.0);  // xx, xy, yy
  std::vector<double> acc_alpha(std::size_t(g.count), 0.0);
  std::vector<double> acc_col(std::size_t(g.count) * 3, 0.0);

  std::vector<detail::Contribution> contrib;
  for (int y = 0; y < win.h; ++y) {
    int gy = win.y0 + y;
    for (int x = 0; x < win.w; ++x) {
      int gx = win.x0 + x;
      const real* ct = cotangent.data() + (std::int64_t(y) * win.w + x) * 3;
      if (ct[0] == 0 && ct[1] == 0 && ct[2] == 0) continue;
      const auto& list = tiles[std::size_t((gy / opt.tile_size) * ntx + gx / opt.tile_size)];
      contrib.clear();
      real t_final = 1;
      detail::walk_pixel(prep.proj, list, gx, gy, opt, true,
                         [&](const detail::Contribution& c, real) { contrib.push_back(c); });
      for (const auto& c : contrib) t_final *= (1 - c.a);

      double t_after = t_final;
      double s_col[3] = {0, 0, 0};
      for (int k = static_cast<int>(contrib.size()) - 1; k >= 0; --k) {
        const auto& c = contrib[std::size_t(k)];
        const detail::Projected& p = prep.proj[std::size_t(c.idx)];
        const double one_minus = 1.0 - c.a;
        const double tk = t_after / one_minus;
        const double w = c.a * tk;
        const double col[3] = {p.r, p.g, p.b};
        double da = 0;
        for (int ch = 0; ch < 3; ++ch) {
          acc_col[std::size_t(c.idx) * 3 + ch] += w * ct[ch];
          da += ct[ch] * (col[ch] * tk - s_col[ch] / one_minus);
        }
        for (int ch = 0; ch < 3; ++ch) s_col[ch] += w * col[ch];
        t_after = tk;
        if (c.gk == 0) continue;  // clamped: no kernel/alpha gradient
        acc_alpha[std::size_t(c.idx)] += da * c.gk;
        const double drho = -0.5 * c.a * da;
        // d = pix - mean, so dL/dmean = -2 * drho * Q d
        const double qd_x = p.inv(0, 0) * c.dx + p.inv(0, 1) * c.dy;
        const double qd_y = p.inv(0, 1) * c.dx + p.inv(1, 1) * c.dy;
        acc_mean[std::size_t(c.idx) * 2 + 0] += -2.0 * drho * qd_x;
        acc_mean[std::size_t(c.idx) * 2 + 1] += -2.0 * drho * qd_y;
        acc_ddt[std::size_t(c.idx) * 3 + 0] += drho * c.dx * c.dx;
        acc_ddt[std::size_t(c.idx) * 3 + 1] += drho * c.dx * c.dy;
        acc_ddt[std::size_t(c.idx) * 3 + 2] += drho * c.dy * c.dy;
      }
    }
  }

  // Chain the 2D accumulators to the 3D parameters.
  Mat3 r_cw = pose.rotation();
  for (int i = 0; i < g.count; ++i) {
    const detail::Projected& p = prep.proj[std::size_t(i)];
    if (!p.valid) continue;
    Vec2 d_mean(acc_mean[std::size_t(i) * 2], acc_mean[std::size_t(i) * 2 + 1]);
    Mat2 d_q;
    d_q << acc_ddt[std::size_t(i) * 3 + 0], acc_ddt[std::size_t(i) * 3 + 1],
        acc_ddt[std::size_t(i) * 3 + 1], acc_ddt[std::size_t(i) * 3 + 2];
    Mat2 d_cov = -p.Q * d_q * p.Q;

    Mat23 A = p.J * p.M;
    Mat23 d_a = 2.0 * d_cov * A;
    Mat3 d_m = p.J.transpose() * d_a;
    Mat23 d_j = d_a * p.M.transpose();

    // projection of the mean
    Vec3 d_pcam = p.J.transpose() * d_mean;
    // J's own dependence on the camera-frame point
    const double fx = cam.fx, fy = cam.fy;
    const double X = p.p_cam.x(), Y = p.p_cam.y(), Z = p.p_cam.z();
    const double iz2 = 1.0 / (Z * Z), iz3 = iz2 / Z;
    d_pcam.x() += d_j(0, 2) * (-fx * iz2);
    d_pcam.y() += d_j(1, 2) * (-fy * iz2);
    d_pcam.z() += d_j(0, 0) * (-fx * iz2) + d_j(0, 2) * (2 * fx * X * iz3) +
                  d_j(1, 1) * (-fy * iz2) + d_j(1, 2) * (2 * fy * Y * iz3);

    Vec3 d_mu = r_cw.transpose() * d_pcam;
    for (int k = 0; k < 3; ++k) out.mu[std::size_t(i) * 3 + k] += static_cast<real>(d_mu[k]);

    Mat3 d_b = r_cw.transpose() * d_m;  // M = R_cw * Rq * diag(s)
    Mat3 d_rq = d_b * p.s.asDiagonal();
    for (int k = 0; k < 3; ++k) {
      double ds = d_b.col(k).dot(p.Rq.col(k));
      out.scale[std::size_t(i) * 3 + k] += static_cast<real>(ds);
    }

    // rotation matrix w.r.t. the normalized quaternion
    const double w = p.qhat[0], x = p.qhat[1], y = p.qhat[2], z = p.qhat[3];
    Mat3 dRdq[4];
    dRdq[0] << 0, -z, y, z, 0, -x, -y, x, 0;
    dRdq[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dRdq[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dRdq[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    Eigen::Vector4d d_qhat;
    for (int k = 0; k < 4; ++k)
      d_qhat[k] = 2.0 * (d_rq.array() * dRdq[k].array()).sum();
    Eigen::Vector4d d_qraw = (d_qhat - p.qhat * p.qhat.dot(d_qhat)) / p.qnorm;
    for (int k = 0; k < 4; ++k) out.rot[std::size_t(i) * 4 + k] += static_cast<real>(d_qraw[k]);

    out.alpha[std::size_t(i)] += static_cast<real>(acc_alpha[std::size_t(i)]);
    for (int k = 0; k < 3; ++k)
      out.color[std::size_t(i) * 3 + k] += static_cast<real>(acc_col[std::size_t(i) * 3 + k]);
  }
  return out;
}

// Convenience wrappers over GaussianSet values.
inline RenderOutput render(const GaussianSet& set, const Camera& cam, const SE3Pose& pose,
                           const RenderOptions& opt = {}, Window win = {}) {
  GaussianSoA soa(set);
  return render(soa.view(), cam, pose, opt, win);
}

inline RenderOutput render_naive(const GaussianSet& set, const Camera& cam, const SE3Pose& pose,
                                 const RenderOptions& opt = {}, Window win = {}) {
  GaussianSoA soa(set);
  return render_naive(soa.view(), cam, pose, opt, win);
}

// Tape op: color image as a tracked tensor, gradients routed through
// render_backward into the Gaussian parameter tensors.
inline ad::Tensor render_op(ad::Tape& t, const ad::Tensor& mu, const ad::Tensor& scale,
                            const ad::Tensor& rot, const ad::Tensor& alpha,
                            const ad::Tensor& color, const Camera& cam, const SE3Pose& pose,
                            const RenderOptions& opt = {}, Window win = {},
                            RenderOutput* aux = nullptr) {
  const int count = alpha.dim(0);
  require(mu.shape == ad::Shape{count, 3} && scale.shape == ad::Shape{count, 3} &&
              rot.shape == ad::Shape{count, 4} && color.shape == ad::Shape{count, 3},
          Err::ShapeMismatch, "render_op: inconsistent gaussian tensor shapes");
  if (win.w == 0) win = full_window(cam);
  GaussianArrays arrays{mu.data(), scale.data(), rot.data(), alpha.data(), color.data(), count};
  RenderOutput ro = render(arrays, cam, pose, opt, win);
  if (aux) *aux = ro;
  ad::Tensor out = ro.color;
  if (ad::ops::tracked(t, {&mu, &scale, &rot, &alpha, &color})) {
    int nmu = mu.node, nsc = scale.node, nrt = rot.node, nal = alpha.node, nco = color.node;
    auto smu = mu.store, ssc = scale.store, srt = rot.store, sal = alpha.store, sco = color.store;
    out.node = t.emplace(out.shape, [=](ad::Tape& tp, int self) {
      ad::Tensor cot;
      cot.shape = {win.h, win.w, 3};
      cot.store = std::make_shared<ad::Storage>(ad::numel(cot.shape));
      const auto& gself = tp.grad(self);
      std::copy(gself.begin(), gself.end(), cot.data());
      GaussianArrays ga{smu->data(), ssc->data(), srt->data(), sal->data(), sco->data(), count};
      GaussianGrads gg = render_backward(ga, cam, pose, cot, opt, win);
      auto accumulate = [&tp](int node, const std::vector<real>& src) {
        if (node < 0) return;
        auto& dst = tp.grad(node);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
      };
      accumulate(nmu, gg.mu);
      accumulate(nsc, gg.scale);
      accumulate(nrt, gg.rot);
      accumulate(nal, gg.alpha);
      accumulate(nco, gg.color);
    });
  }
  return out;
}

}  // namespace poseless::splat
