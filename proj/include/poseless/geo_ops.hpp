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
// Tape ops that bridge tensor autodiff and camera geometry: bilinear feature
// gathering at fixed coordinates, depth-to-point lifting along fixed rays,
// and dense image warping differentiable in depth and in an SE(3) twist.

#pragma once

#include "poseless/geometry.hpp"
#include "poseless/ops.hpp"

namespace poseless::geo {

// ---------------------------------------------------------------------------
// SO(3)/SE(3) derivative helpers
// ---------------------------------------------------------------------------

inline void exp_coefficients(double theta, double& a, double& b, double& da, double& db) {
  if (theta < 1e-5) {
    const double t2 = theta * theta;
    a = 0.5 - t2 / 24.0;
    b = 1.0 / 6.0 - t2 / 120.0;
    da = -theta / 12.0;
    db = -theta / 60.0;
  } else {
    const double t2 = theta * theta, t3 = t2 * theta, t4 = t3 * theta;
    a = (1.0 - std::cos(theta)) / t2;
    b = (theta - std::sin(theta)) / t3;
    da = (theta * std::sin(theta) - 2.0 * (1.0 - std::cos(theta))) / t3;
    db = (theta * (1.0 - std::cos(theta)) - 3.0 * (theta - std::sin(theta))) / t4;
  }
}

inline Mat3 so3_right_jacobian(const Vec3& psi) {
  double theta = psi.norm(), a, b, da, db;
  exp_coefficients(theta, a, b, da, db);
  Mat3 k = skew(psi);
  return Mat3::Identity() - a * k + b * (k * k);
}

// d/dpsi of V(psi) * m, where V is the SE(3) exponential's translation mixer.
inline Mat3 dV_m_dpsi(const Vec3& psi, const Vec3& m) {
  double theta = psi.norm(), a, b, da, db;
  exp_coefficients(theta, a, b, da, db);
  Mat3 k = skew(psi);
  Vec3 km = k * m;
  Vec3 kkm = k * km;
  Mat3 out = Mat3::Zero();
  Vec3 dtheta = theta < 1e-12 ? Vec3::Zero() : Vec3(psi / theta);
  // a(theta) skew(psi) m  +  b(theta) skew(psi)^2 m
  out += km * (da * dtheta).transpose();
  out += kkm * (db * dtheta).transpose();
  for (int i = 0; i < 3; ++i) {
    Vec3 e = Vec3::Unit(i);
    Mat3 se = skew(e);
    out.col(i) += a * (se * m);
    out.col(i) += b * ((se * k + k * se) * m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// gather_bilinear: differentiable w.r.t. the field; coordinates are fixed
// ---------------------------------------------------------------------------

struct GatherResult {
  ad::Tensor values;  // [N,C], zeroed where invalid
  std::vector<std::uint8_t> valid;
};

inline GatherResult gather_bilinear(ad::Tape& t, const ad::Tensor& field,
                                    const std::vector<Vec2>& coords) {
  require(field.ndim() == 3, Err::ShapeMismatch, "gather_bilinear expects [H,W,C]");
  const int H = field.dim(0), W = field.dim(1), C = field.dim(2);
  const int N = static_cast<int>(coords.size());
  GatherResult out;
  out.values = ad::Tensor::zeros({N, C});
  out.valid.assign(static_cast<std::size_t>(N), 0);
  std::vector<BilinearTaps> taps(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    taps[std::size_t(i)] = bilinear_taps(coords[std::size_t(i)].x(), coords[std::size_t(i)].y(),
                                         W, H);
    if (!taps[std::size_t(i)].valid) continue;
    out.valid[std::size_t(i)] = 1;
    real* dst = out.values.data() + std::int64_t(i) * C;
    for (int k = 0; k < 4; ++k) {
      const real* src = field.data() + std::int64_t(taps[std::size_t(i)].idx[k]) * C;
      for (int c = 0; c < C; ++c) dst[c] += taps[std::size_t(i)].w[k] * src[c];
    }
  }
  if (ad::ops::tracked(t, {&field})) {
    int fn = field.node;
    out.values.node = t.emplace(out.values.shape, [fn, taps, N, C](ad::Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gf = tp.grad(fn);
      for (int i = 0; i < N; ++i) {
        const BilinearTaps& b = taps[std::size_t(i)];
        if (!b.valid) continue;
        for (int k = 0; k < 4; ++k)
          for (int c = 0; c < C; ++c)
            gf[std::int64_t(b.idx[k]) * C + c] += b.w[k] * g[std::int64_t(i) * C + c];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// depth_to_points: p[i] = d[i] * dir[i] + origin[i] along fixed rays
// ---------------------------------------------------------------------------

inline ad::Tensor depth_to_points(ad::Tape& t, const ad::Tensor& depth,
                                  const std::vector<Vec3>& dirs,
                                  const std::vector<Vec3>& origins) {
  const int P = depth.dim(0);
  require(depth.ndim() == 1 && static_cast<int>(dirs.size()) == P &&
              static_cast<int>(origins.size()) == P,
          Err::ShapeMismatch, "depth_to_points: need [P] depths with P rays");
  ad::Tensor out({P, 3});
  for (int i = 0; i < P; ++i)
    for (int k = 0; k < 3; ++k)
      out.data()[i * 3 + k] =
          depth.data()[i] * static_cast<real>(dirs[std::size_t(i)][k]) +
          static_cast<real>(origins[std::size_t(i)][k]);
  ad::check_finite(out, "depth_to_points");
  if (ad::ops::tracked(t, {&depth})) {
    int dn = depth.node;
    out.node = t.emplace(out.shape, [dn, dirs, P](ad::Tape& tp, int self) {
      const auto& g = tp.grad(self);
      auto& gd = tp.grad(dn);
      for (int i = 0; i < P; ++i)
        for (int k = 0; k < 3; ++k)
          gd[i] += g[i * 3 + k] * static_cast<real>(dirs[std::size_t(i)][k]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// differentiable dense warp
// ---------------------------------------------------------------------------

// Per-pixel sampling of a reference field at the reprojection of the target
// pixel, with analytic Jacobians w.r.t. the per-pixel depth and a twist xi
// applied as pose = base ∘ exp(xi). The warp transform is the inverse:
//   X_ref = exp(-xi) ∘ base^{-1} ∘ X_target.
struct WarpSetup {
  SE3Pose base_ref_to_target;  // the pose iterate T_{r->t}
  Camera cam_ref, cam_target;
};

struct WarpValueJac {
  bool valid = false;
  std::vector<real> value;       // C
  std::vector<real> d_depth;     // C
  std::vector<real> d_xi;        // C x 6 row-major
};

namespace warp_detail {

struct PoseEval {
  Mat3 r_psi;        // R(psi), psi = -phi
  Mat3 v_psi;        // V(psi)
  Vec3 t_exp;        // V(psi) * (-rho)
  Mat3 j_r;          // J_r(psi)
  Mat3 dv_m;         // d[V(psi) m]/dpsi with m = -rho
  Mat3 r_w0;         // base^{-1} rotation
  Vec3 t_w0;         // base^{-1} translation
  Mat3 r_full;       // R(psi) * r_w0
};

inline PoseEval eval_pose(const SE3Pose& base_ref_to_target, const Vec6& xi) {
  PoseEval pe;
  SE3Pose w0 = base_ref_to_target.inverse();
  pe.r_w0 = w0.rotation();
  pe.t_w0 = w0.t;
  Vec3 rho = xi.head<3>(), phi = xi.tail<3>();
  Vec3 psi = -phi;
  SE3Pose e = SE3Pose::exp((Vec6() << -rho, psi).finished());
  pe.r_psi = e.rotation();
  pe.t_exp = e.t;
  double a, b, da, db;
  exp_coefficients(psi.norm(), a, b, da, db);
  Mat3 k = skew(psi);
  pe.v_psi = Mat3::Identity() + a * k + b * (k * k);
  pe.j_r = so3_right_jacobian(psi);
  pe.dv_m = dV_m_dpsi(psi, -rho);
  pe.r_full = pe.r_psi * pe.r_w0;
  return pe;
}

// value + spatial gradient of the bilinear surface at (x, y)
inline bool sample_with_grad(const ad::Tensor& field, double x, double y, real* val, real* gx,
                             real* gy) {
  const int H = field.dim(0), W = field.dim(1), C = field.dim(2);
  BilinearTaps b = bilinear_taps(x, y, W, H);
  if (!b.valid) return false;
  real fx = b.w[1] + b.w[3];  // fractional x
  real fy = b.w[2] + b.w[3];  // fractional y
  for (int c = 0; c < C; ++c) {
    const real v00 = field.data()[std::int64_t(b.idx[0]) * C + c];
    const real v01 = field.data()[std::int64_t(b.idx[1]) * C + c];
    const real v10 = field.data()[std::int64_t(b.idx[2]) * C + c];
    const real v11 = field.data()[std::int64_t(b.idx[3]) * C + c];
    val[c] = b.w[0] * v00 + b.w[1] * v01 + b.w[2] * v10 + b.w[3] * v11;
    gx[c] = (1 - fy) * (v01 - v00) + fy * (v11 - v10);
    gy[c] = (1 - fx) * (v10 - v00) + fx * (v11 - v01);
  }
  return true;
}

}  // namespace warp_detail

// Evaluates the warped sample and its Jacobians for one target pixel.
inline WarpValueJac warp_pixel_jacobian(const ad::Tensor& reference, const WarpSetup& setup,
                                        const warp_detail::PoseEval& pe, const Vec2& pixel,
                                        double depth, bool want_xi, bool want_depth) {
  const int C = reference.dim(2);
  WarpValueJac out;
  Vec3 x_t = backproject_camera(pixel, depth, setup.cam_target);
  Vec3 y = pe.r_w0 * x_t + pe.t_w0;
  Vec3 x_r = pe.r_psi * y + pe.t_exp;
  auto proj = try_project_camera(x_r, setup.cam_ref);
  if (!proj) return out;
  out.value.assign(std::size_t(C), 0);
  std::vector<real> gx(std::size_t(C)), gy(std::size_t(C));
  if (!warp_detail::sample_with_grad(reference, proj->pixel.x(), proj->pixel.y(),
                                     out.value.data(), gx.data(), gy.data()))
    return out;
  out.valid = true;
  Mat23 j_proj = projection_jacobian(x_r, setup.cam_ref);
  if (want_depth) {
    Vec3 a_u((pixel.x() - setup.cam_target.cx) / setup.cam_target.fx,
             (pixel.y() - setup.cam_target.cy) / setup.cam_target.fy, 1.0);
    Vec2 dpix = j_proj * (pe.r_full * a_u);
    out.d_depth.resize(std::size_t(C));
    for (int c = 0; c < C; ++c)
      out.d_depth[std::size_t(c)] = gx[std::size_t(c)] * static_cast<real>(dpix.x()) +
                                    gy[std::size_t(c)] * static_cast<real>(dpix.y());
  }
  if (want_xi) {
    // X_r = R(psi) y + V(psi)(-rho) with psi = -phi, so
    //   d X_r / d rho = -V(psi)
    //   d X_r / d phi = R(psi) skew(y) J_r(psi) - d[V(psi)(-rho)]/dpsi
    Eigen::Matrix<double, 3, 6> dxr;
    dxr.leftCols<3>() = -pe.v_psi;
    dxr.rightCols<3>() = pe.r_psi * skew(y) * pe.j_r - pe.dv_m;
    Eigen::Matrix<double, 2, 6> dpix = j_proj * dxr;
    out.d_xi.resize(std::size_t(C) * 6);
    for (int c = 0; c < C; ++c)
      for (int k = 0; k < 6; ++k)
        out.d_xi[std::size_t(c) * 6 + k] =
            gx[std::size_t(c)] * static_cast<real>(dpix(0, k)) +
            gy[std::size_t(c)] * static_cast<real>(dpix(1, k));
  }
  return out;
}

struct WarpOpResult {
  ad::Tensor image;  // [Ht,Wt,C], tracked through depth and xi
  ad::Tensor mask;   // [Ht,Wt] constant validity (from the forward evaluation)
};

// Dense warp as a tape op. The reference field is a constant; gradients flow
// to the per-pixel depth map and to the twist applied on the pose iterate.
inline WarpOpResult warp_image_op(ad::Tape& t, const ad::Tensor& reference,
                                  const ad::Tensor& depth, const ad::Tensor& xi,
                                  const WarpSetup& setup) {
  require(reference.ndim() == 3, Err::ShapeMismatch, "warp_image_op expects [H,W,C] reference");
  require(reference.node < 0, Err::InvalidArgument,
          "warp_image_op: reference-field gradients are not supported");
  require(depth.ndim() == 2, Err::ShapeMismatch, "warp_image_op expects [Ht,Wt] depth");
  require(xi.shape == ad::Shape{6}, Err::ShapeMismatch, "warp_image_op expects a 6-twist");
  const int Ht = depth.dim(0), Wt = depth.dim(1), C = reference.dim(2);
  Vec6 xi_v;
  for (int k = 0; k < 6; ++k) xi_v[k] = xi.data()[k];
  warp_detail::PoseEval pe = warp_detail::eval_pose(setup.base_ref_to_target, xi_v);

  WarpOpResult out;
  out.image = ad::Tensor::zeros({Ht, Wt, C});
  out.mask = ad::Tensor::zeros({Ht, Wt});
  for (int y = 0; y < Ht; ++y)
    for (int x = 0; x < Wt; ++x) {
      WarpValueJac wj = warp_pixel_jacobian(reference, setup, pe, Vec2(x, y),
                                            depth.data()[y * Wt + x], false, false);
      if (!wj.valid) continue;
      out.mask.data()[y * Wt + x] = 1;
      for (int c = 0; c < C; ++c)
        out.image.data()[(std::int64_t(y) * Wt + x) * C + c] = wj.value[std::size_t(c)];
    }

  if (ad::ops::tracked(t, {&depth, &xi})) {
    int dn = depth.node, xn = xi.node;
    auto dstore = depth.store;
    auto rstore = reference;
    out.image.node =
        t.emplace(out.image.shape, [dn, xn, dstore, rstore, setup, pe, Ht, Wt, C](ad::Tape& tp,
                                                                                  int self) {
          const auto& g = tp.grad(self);
          real* gd = dn >= 0 ? tp.grad(dn).data() : nullptr;
          real* gx = xn >= 0 ? tp.grad(xn).data() : nullptr;
          for (int y = 0; y < Ht; ++y)
            for (int x = 0; x < Wt; ++x) {
              WarpValueJac wj =
                  warp_pixel_jacobian(rstore, setup, pe, Vec2(x, y),
                                      dstore->data()[y * Wt + x], gx != nullptr, gd != nullptr);
              if (!wj.valid) continue;
              const real* gpix = g.data() + (std::int64_t(y) * Wt + x) * C;
              if (gd) {
                real acc = 0;
                for (int c = 0; c < C; ++c) acc += gpix[c] * wj.d_depth[std::size_t(c)];
                gd[y * Wt + x] += acc;
              }
              if (gx) {
                for (int c = 0; c < C; ++c)
                  for (int k = 0; k < 6; ++k)
                    gx[k] += gpix[c] * wj.d_xi[std::size_t(c) * 6 + k];
              }
            }
        });
  }
  return out;
}

}  // namespace poseless::geo
