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
// Training losses: masked SSIM+L1 photometric consistency, edge-aware depth
// smoothness, MSE reconstruction, and the scheduled joint combination.

#pragma once

#include "poseless/ops.hpp"

namespace poseless::losses {

constexpr real kDefaultSsimMix = 0.85;

namespace detail {

inline std::vector<real> gaussian_taps_11(double sigma = 1.5) {
  std::vector<real> k(11);
  real sum = 0;
  for (int i = 0; i < 11; ++i) {
    double x = i - 5;
    k[std::size_t(i)] = static_cast<real>(std::exp(-x * x / (2 * sigma * sigma)));
    sum += k[std::size_t(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable 11x11 Gaussian blur in valid mode over a single-channel map.
inline ad::Tensor blur_valid(ad::Tape& t, const ad::Tensor& x) {
  static const std::vector<real> taps = gaussian_taps_11();
  ad::Tensor kcol({11, 1, 1, 1});
  ad::Tensor krow({1, 11, 1, 1});
  std::copy(taps.begin(), taps.end(), kcol.data());
  std::copy(taps.begin(), taps.end(), krow.data());
  return ad::ops::conv2d(t, ad::ops::conv2d(t, x, kcol, 1, 0), krow, 1, 0);
}

inline ad::Tensor channel(ad::Tape& t, const ad::Tensor& img, int c) {
  return ad::ops::slice_lastdim(t, img, c, c + 1);
}

}  // namespace detail

// SSIM map (valid-mode windows) for one channel pair [H,W,1] -> [H-10,W-10,1].
inline ad::Tensor ssim_map(ad::Tape& t, const ad::Tensor& a, const ad::Tensor& b) {
  namespace op = ad::ops;
  constexpr real c1 = real(0.01 * 0.01), c2 = real(0.03 * 0.03);
  ad::Tensor mu_a = detail::blur_valid(t, a);
  ad::Tensor mu_b = detail::blur_valid(t, b);
  ad::Tensor mu_aa = op::mul(t, mu_a, mu_a);
  ad::Tensor mu_bb = op::mul(t, mu_b, mu_b);
  ad::Tensor mu_ab = op::mul(t, mu_a, mu_b);
  ad::Tensor var_a = op::sub(t, detail::blur_valid(t, op::mul(t, a, a)), mu_aa);
  ad::Tensor var_b = op::sub(t, detail::blur_valid(t, op::mul(t, b, b)), mu_bb);
  ad::Tensor cov = op::sub(t, detail::blur_valid(t, op::mul(t, a, b)), mu_ab);
  ad::Tensor num = op::mul(t, op::add_const(t, op::scale(t, mu_ab, 2), c1),
                           op::add_const(t, op::scale(t, cov, 2), c2));
  ad::Tensor den = op::mul(t, op::add_const(t, op::add(t, mu_aa, mu_bb), c1),
                           op::add_const(t, op::add(t, var_a, var_b), c2));
  return op::div(t, num, den);
}

// Mean SSIM over channels; windows weighted by the (constant) mask cropped to
// window centers. Full-image SSIM passes an all-ones mask.
inline ad::Tensor ssim(ad::Tape& t, const ad::Tensor& a, const ad::Tensor& b,
                       const ad::Tensor& mask) {
  namespace op = ad::ops;
  require_same_shape(a, b, "ssim");
  require(mask.node < 0, Err::InvalidArgument, "ssim: mask must be constant");
  const int H = a.dim(0), W = a.dim(1), C = a.dim(2);
  require(H >= 11 && W >= 11, Err::ShapeMismatch, "ssim needs at least an 11x11 image");
  // window-center weights
  ad::Tensor wc = ad::Tensor::zeros({H - 10, W - 10, 1});
  double wsum = 0;
  for (int y = 0; y < H - 10; ++y)
    for (int x = 0; x < W - 10; ++x) {
      real m = mask.data()[(y + 5) * W + x + 5];
      wc.data()[y * (W - 10) + x] = m;
      wsum += m;
    }
  require(wsum > 0, Err::EmptyMask, "ssim: empty mask");
  ad::Tensor acc;
  for (int c = 0; c < C; ++c) {
    ad::Tensor m = ssim_map(t, detail::channel(t, a, c), detail::channel(t, b, c));
    ad::Tensor term = op::reduce_sum_all(t, op::mul(t, m, wc));
    acc = acc.defined() ? op::add(t, acc, term) : term;
  }
  return op::scale(t, acc, real(1.0 / (wsum * C)));
}

// alpha * (1 - ssim)/2 + (1 - alpha) * L1, masked mean over valid pixels.
inline ad::Tensor loss_photo(ad::Tape& t, const ad::Tensor& warped, const ad::Tensor& target,
                             const ad::Tensor& mask, real alpha) {
  namespace op = ad::ops;
  require_same_shape(warped, target, "loss_photo");
  require(mask.ndim() == 2 && mask.dim(0) == warped.dim(0) && mask.dim(1) == warped.dim(1),
          Err::ShapeMismatch, "loss_photo: mask must be [H,W]");
  const int H = warped.dim(0), W = warped.dim(1), C = warped.dim(2);
  double count = 0;
  ad::Tensor mask3 = ad::Tensor::zeros({H, W, C});
  for (int p = 0; p < H * W; ++p) {
    count += mask.data()[p];
    for (int c = 0; c < C; ++c) mask3.data()[p * C + c] = mask.data()[p];
  }
  require(count > 0, Err::EmptyMask, "loss_photo: no valid warp pixels");
  ad::Tensor l1 = op::scale(
      t, op::reduce_sum_all(t, op::mul(t, op::abs(t, op::sub(t, warped, target)), mask3)),
      real(1.0 / (count * C)));
  ad::Tensor s = ssim(t, warped, target, mask);
  ad::Tensor dssim = op::scale(t, op::add_const(t, op::scale(t, s, -1), 1), real(0.5));
  return op::add(t, op::scale(t, dssim, alpha), op::scale(t, l1, 1 - alpha));
}

// Edge-aware smoothness of the (mean-normalized) depth; image gradients act
// as constant attenuation weights.
inline ad::Tensor loss_depth(ad::Tape& t, const ad::Tensor& depth, const ad::Tensor& image) {
  namespace op = ad::ops;
  require(depth.ndim() == 2, Err::ShapeMismatch, "loss_depth expects [H,W] depth");
  require(image.ndim() == 3 && image.dim(0) == depth.dim(0) && image.dim(1) == depth.dim(1),
          Err::ShapeMismatch, "loss_depth: image/depth size mismatch");
  const int H = depth.dim(0), W = depth.dim(1), C = image.dim(2);
  // normalize by the mean to decouple smoothness from the scene scale
  ad::Tensor mean = op::reduce_mean_all(t, depth);
  ad::Tensor recip = op::div(t, ad::Tensor::full({1}, 1), mean);
  ad::Tensor dn = op::reshape(
      t, op::row_scale(t, op::reshape(t, depth, {1, H * W}), recip), {H, W, 1});

  // constant attenuation from the channel-mean image
  ad::Tensor gray({H, W});
  for (int p = 0; p < H * W; ++p) {
    real s = 0;
    for (int c = 0; c < C; ++c) s += image.data()[p * C + c];
    gray.data()[p] = s / C;
  }
  ad::Tensor wx = ad::Tensor::zeros({H, W - 1, 1});
  ad::Tensor wy = ad::Tensor::zeros({H - 1, W, 1});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x + 1 < W; ++x)
      wx.data()[y * (W - 1) + x] =
          std::exp(-std::abs(gray.data()[y * W + x + 1] - gray.data()[y * W + x]));
  for (int y = 0; y + 1 < H; ++y)
    for (int x = 0; x < W; ++x)
      wy.data()[y * W + x] =
          std::exp(-std::abs(gray.data()[(y + 1) * W + x] - gray.data()[y * W + x]));

  ad::Tensor gx = op::abs(
      t, op::sub(t, op::crop2d(t, dn, 0, 1, H, W - 1), op::crop2d(t, dn, 0, 0, H, W - 1)));
  ad::Tensor gy = op::abs(
      t, op::sub(t, op::crop2d(t, dn, 1, 0, H - 1, W), op::crop2d(t, dn, 0, 0, H - 1, W)));
  ad::Tensor tx = op::reduce_mean_all(t, op::mul(t, gx, wx));
  ad::Tensor ty = op::reduce_mean_all(t, op::mul(t, gy, wy));
  return op::add(t, tx, ty);
}

// Plain MSE over pixels and channels.
inline ad::Tensor loss_rgb(ad::Tape& t, const ad::Tensor& rendered, const ad::Tensor& target) {
  namespace op = ad::ops;
  require_same_shape(rendered, target, "loss_rgb");
  ad::Tensor d = op::sub(t, rendered, target);
  return op::reduce_mean_all(t, op::mul(t, d, d));
}

struct LossBreakdown {
  real l_photo = 0, l_depth = 0, l_rgb = 0, l_joint = 0, w = 1;
};

inline real schedule_weight(std::int64_t step, double beta) {
  return static_cast<real>(std::exp2(beta * static_cast<double>(step)));
}

// joint = w (l_depth + l_photo) + (1-w) l_rgb with w = 2^(beta t).
inline ad::Tensor loss_joint(ad::Tape& t, const ad::Tensor& l_photo, const ad::Tensor& l_depth,
                             const ad::Tensor& l_rgb, std::int64_t step, double beta,
                             LossBreakdown* out = nullptr) {
  namespace op = ad::ops;
  require(step >= 0, Err::InvalidArgument, "loss_joint: step must be non-negative");
  real w = schedule_weight(step, beta);
  ad::Tensor joint = op::add(t, op::scale(t, op::add(t, l_photo, l_depth), w),
                             op::scale(t, l_rgb, 1 - w));
  if (out) {
    out->l_photo = l_photo.scalar();
    out->l_depth = l_depth.scalar();
    out->l_rgb = l_rgb.scalar();
    out->l_joint = joint.scalar();
    out->w = w;
  }
  return joint;
}

}  // namespace poseless::losses
