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

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <optional>

#include "poseless/tensor.hpp"

namespace poseless {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;

// Pinhole intrinsics. Integer pixel coordinates address pixel centers.
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  Camera() = default;
  Camera(double fx_, double fy_, double cx_, double cy_, int w, int h)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h) {
    require(fx > 0 && fy > 0, Err::InvalidArgument, "Camera: focal lengths must be positive");
    require(cx >= 0 && cx < w && cy >= 0 && cy < h, Err::InvalidArgument,
            "Camera: principal point outside the image");
  }

  // Camera addressing the s-times-downsampled feature grid, with pixel
  // centers aligned: x_f = (x + 0.5)/s - 0.5.
  Camera scaled(int s) const {
    return Camera(fx / s, fy / s, (cx + 0.5) / s - 0.5, (cy + 0.5) / s - 0.5,
                  (width + s - 1) / s, (height + s - 1) / s);
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rigid transform X_out = R * X_in + t, kept as unit quaternion + translation.
// The arrow convention everywhere is X_b = T_{a->b} * X_a.
struct SE3Pose {
  Eigen::Quaterniond q{1, 0, 0, 0};
  Vec3 t{0, 0, 0};

  SE3Pose() = default;
  SE3Pose(const Eigen::Quaterniond& q_, const Vec3& t_) : q(q_.normalized()), t(t_) {}

  static SE3Pose identity() { return SE3Pose(); }

  Vec3 apply(const Vec3& p) const { return q * p + t; }
  Mat3 rotation() const { return q.toRotationMatrix(); }

  SE3Pose inverse() const {
    Eigen::Quaterniond qi = q.conjugate();
    return SE3Pose(qi, -(qi * t));
  }

  // Full SE(3) exponential of a twist (rho, phi).
  static SE3Pose exp(const Vec6& xi) {
    Vec3 rho = xi.head<3>();
    Vec3 phi = xi.tail<3>();
    double theta = phi.norm();
    Eigen::Quaterniond q;
    Mat3 V;
    if (theta < 1e-12) {
      q = Eigen::Quaterniond(1, phi.x() / 2, phi.y() / 2, phi.z() / 2).normalized();
      V = Mat3::Identity() + 0.5 * skew(phi);
    } else {
      q = Eigen::Quaterniond(Eigen::AngleAxisd(theta, phi / theta));
      Mat3 K = skew(phi);
      V = Mat3::Identity() + (1 - std::cos(theta)) / (theta * theta) * K +
          (theta - std::sin(theta)) / (theta * theta * theta) * K * K;
    }
    return SE3Pose(q, V * rho);
  }

  // Right-multiplied retraction: this ∘ exp(xi).
  SE3Pose retract(const Vec6& xi) const { return compose(*this, exp(xi)); }

  // compose(A, B): apply B first, then A.
  static SE3Pose compose(const SE3Pose& a, const SE3Pose& b) {
    return SE3Pose(a.q * b.q, a.q * b.t + a.t);
  }

  double rotation_angle_deg() const {
    double w = std::min(1.0, std::abs(q.normalized().w()));
    return 2.0 * std::acos(w) * 180.0 / M_PI;
  }
};

inline double pose_diff_angle_deg(const SE3Pose& a, const SE3Pose& b) {
  return SE3Pose::compose(a.inverse(), b).rotation_angle_deg();
}

// H x W grid of positive finite depths.
struct DepthMap {
  ad::Tensor values;  // [H,W]

  DepthMap() = default;
  explicit DepthMap(ad::Tensor v) : values(std::move(v)) {
    require(values.ndim() == 2, Err::ShapeMismatch, "DepthMap expects [H,W]");
    for (std::int64_t i = 0; i < values.size(); ++i)
      require(std::isfinite(values.data()[i]) && values.data()[i] > 0, Err::NonPositiveDepth,
              "DepthMap entries must be positive and finite");
  }

  int height() const { return values.dim(0); }
  int width() const { return values.dim(1); }
  double at(int y, int x) const { return values.data()[y * width() + x]; }
};

struct PixelGrid {
  std::vector<Vec2> coords;
};

struct Projection {
  Vec2 pixel;
  double depth;
};

inline Vec3 backproject_camera(const Vec2& uv, double depth, const Camera& cam) {
  require(depth > 0, Err::NonPositiveDepth, "backproject: depth must be positive");
  return Vec3((uv.x() - cam.cx) / cam.fx * depth, (uv.y() - cam.cy) / cam.fy * depth, depth);
}

inline std::optional<Projection> try_project_camera(const Vec3& p, const Camera& cam) {
  if (p.z() <= 0) return std::nullopt;
  return Projection{Vec2(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy),
                    p.z()};
}

// pose maps world to camera.
inline Projection project(const Vec3& p, const Camera& cam, const SE3Pose& pose) {
  Vec3 pc = pose.apply(p);
  auto pr = try_project_camera(pc, cam);
  if (!pr) fail(Err::BehindCamera, "project: point behind the camera");
  return *pr;
}

inline std::optional<Projection> try_project(const Vec3& p, const Camera& cam,
                                             const SE3Pose& pose) {
  return try_project_camera(pose.apply(p), cam);
}

inline Vec3 backproject(const Vec2& uv, double depth, const Camera& cam, const SE3Pose& pose) {
  return pose.inverse().apply(backproject_camera(uv, depth, cam));
}

// Jacobian of (u, v) w.r.t. the camera-frame point.
inline Mat23 projection_jacobian(const Vec3& p, const Camera& cam) {
  Mat23 j;
  double iz = 1.0 / p.z();
  j << cam.fx * iz, 0, -cam.fx * p.x() * iz * iz, 0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
  return j;
}

// ---------------------------------------------------------------------------
// bilinear sampling
// ---------------------------------------------------------------------------

struct BilinearTaps {
  int idx[4] = {0, 0, 0, 0};
  real w[4] = {0, 0, 0, 0};
  bool valid = false;
};

inline BilinearTaps bilinear_taps(double x, double y, int W, int H) {
  BilinearTaps b;
  if (!(std::isfinite(x) && std::isfinite(y)) || x < 0 || y < 0 || x > W - 1 || y > H - 1)
    return b;
  int x0 = std::min(static_cast<int>(std::floor(x)), W - 2);
  int y0 = std::min(static_cast<int>(std::floor(y)), H - 2);
  if (W == 1) x0 = 0;
  if (H == 1) y0 = 0;
  real fx = static_cast<real>(x - x0);
  real fy = static_cast<real>(y - y0);
  int x1 = std::min(x0 + 1, W - 1);
  int y1 = std::min(y0 + 1, H - 1);
  b.idx[0] = y0 * W + x0;
  b.idx[1] = y0 * W + x1;
  b.idx[2] = y1 * W + x0;
  b.idx[3] = y1 * W + x1;
  b.w[0] = (1 - fx) * (1 - fy);
  b.w[1] = fx * (1 - fy);
  b.w[2] = (1 - fx) * fy;
  b.w[3] = fx * fy;
  b.valid = true;
  return b;
}

struct SampledVectors {
  ad::Tensor values;             // [N,C]; flagged-invalid rows are zero
  std::vector<std::uint8_t> valid;
};

// field: [H,W,C] (or [H,W] treated as C=1). Out-of-bounds samples come back
// zeroed with valid=0 so cost averages can exclude them.
inline SampledVectors bilinear_sample(const ad::Tensor& field, const PixelGrid& grid) {
  require(field.ndim() == 3 || field.ndim() == 2, Err::ShapeMismatch,
          "bilinear_sample expects [H,W,C] or [H,W]");
  const int H = field.dim(0), W = field.dim(1);
  const int C = field.ndim() == 3 ? field.dim(2) : 1;
  const int N = static_cast<int>(grid.coords.size());
  SampledVectors out;
  out.values = ad::Tensor::zeros({N, C});
  out.valid.assign(static_cast<std::size_t>(N), 0);
  for (int i = 0; i < N; ++i) {
    BilinearTaps b = bilinear_taps(grid.coords[std::size_t(i)].x(),
                                   grid.coords[std::size_t(i)].y(), W, H);
    if (!b.valid) continue;
    out.valid[std::size_t(i)] = 1;
    real* dst = out.values.data() + std::int64_t(i) * C;
    for (int k = 0; k < 4; ++k) {
      const real* src = field.data() + std::int64_t(b.idx[k]) * C;
      for (int c = 0; c < C; ++c) dst[c] += b.w[k] * src[c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// image warping
// ---------------------------------------------------------------------------

struct WarpResult {
  ad::Tensor image;  // [Ht,Wt,C]
  ad::Tensor mask;   // [Ht,Wt] in {0,1}
};

// Backprojects each target pixel with D_t, maps it by T (target camera frame
// -> reference camera frame), projects into the reference view, and samples
// I_r bilinearly. Pixels that leave the reference frustum are masked out.
inline WarpResult warp_image(const ad::Tensor& reference, const DepthMap& depth_t,
                             const SE3Pose& target_to_ref, const Camera& cam_r,
                             const Camera& cam_t) {
  require(reference.ndim() == 3, Err::ShapeMismatch, "warp_image expects [H,W,C] reference");
  const int Ht = depth_t.height(), Wt = depth_t.width();
  const int Hr = reference.dim(0), Wr = reference.dim(1), C = reference.dim(2);
  WarpResult out;
  out.image = ad::Tensor::zeros({Ht, Wt, C});
  out.mask = ad::Tensor::zeros({Ht, Wt});
  for (int y = 0; y < Ht; ++y)
    for (int x = 0; x < Wt; ++x) {
      Vec3 pc = backproject_camera(Vec2(x, y), depth_t.at(y, x), cam_t);
      Vec3 pr = target_to_ref.apply(pc);
      auto proj = try_project_camera(pr, cam_r);
      if (!proj) continue;
      BilinearTaps b = bilinear_taps(proj->pixel.x(), proj->pixel.y(), Wr, Hr);
      if (!b.valid) continue;
      out.mask.data()[y * Wt + x] = 1;
      real* dst = out.image.data() + (std::int64_t(y) * Wt + x) * C;
      for (int k = 0; k < 4; ++k) {
        const real* src = reference.data() + std::int64_t(b.idx[k]) * C;
        for (int c = 0; c < C; ++c) dst[c] += b.w[k] * src[c];
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// epipolar sampling geometry
// ---------------------------------------------------------------------------

struct EpipolarSamples {
  PixelGrid coords;                  // S pixel positions in view j
  std::vector<double> depths;        // candidate depths along the view-i ray
  std::vector<std::uint8_t> valid;   // in-frustum flags
  bool degenerate = false;           // all samples coincide (e.g. pure rotation)
};

// Candidate depths uniform in inverse depth between 1/d_max and 1/d_min,
// ordered near to far.
inline std::vector<double> epipolar_depths(double d_min, double d_max, int S) {
  require(S >= 2, Err::InvalidArgument, "epipolar sampling needs S >= 2");
  require(d_min > 0 && d_min < d_max, Err::InvalidArgument, "need 0 < d_min < d_max");
  std::vector<double> d(static_cast<std::size_t>(S));
  double inv_near = 1.0 / d_min, inv_far = 1.0 / d_max;
  for (int s = 0; s < S; ++s) {
    double a = static_cast<double>(s) / (S - 1);
    d[std::size_t(s)] = 1.0 / (inv_near + a * (inv_far - inv_near));
  }
  return d;
}

inline EpipolarSamples epipolar_line(const Vec2& u, const SE3Pose& i_to_j, const Camera& cam_i,
                                     const Camera& cam_j, double d_min, double d_max, int S) {
  EpipolarSamples out;
  out.depths = epipolar_depths(d_min, d_max, S);
  out.coords.coords.resize(static_cast<std::size_t>(S), Vec2(0, 0));
  out.valid.assign(static_cast<std::size_t>(S), 0);
  Vec2 lo(1e300, 1e300), hi(-1e300, -1e300);
  int n_valid = 0;
  for (int s = 0; s < S; ++s) {
    Vec3 p = backproject_camera(u, out.depths[std::size_t(s)], cam_i);
    auto proj = try_project_camera(i_to_j.apply(p), cam_j);
    if (!proj) continue;
    const Vec2& px = proj->pixel;
    out.coords.coords[std::size_t(s)] = px;
    bool inside = px.x() >= 0 && px.x() <= cam_j.width - 1 && px.y() >= 0 &&
                  px.y() <= cam_j.height - 1;
    if (inside) {
      out.valid[std::size_t(s)] = 1;
      lo = lo.cwiseMin(px);
      hi = hi.cwiseMax(px);
      ++n_valid;
    }
  }
  if (n_valid >= 2) out.degenerate = (hi - lo).norm() < 1e-9;
  return out;
}

}  // namespace poseless
