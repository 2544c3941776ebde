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
// Iterative pose optimization: a feature-metric reprojection cost over nearby
// views, iteratively refined either by a learned Conv-GRU update or by a
// damped Gauss-Newton step (the oracle path), plus relative-pose chaining.

#pragma once

#include "poseless/encoder.hpp"
#include "poseless/geo_ops.hpp"
#include "poseless/losses.hpp"

namespace poseless::ipo {

struct IPOConfig {
  int iters = 8;  // K
  double d_min = 0.5;
  double d_max = 8.0;
  double gamma = 0.8;       // per-iteration supervision decay (learned training)
  double lm_lambda = 1e-2;  // initial Gauss-Newton damping
  int max_backtracks = 6;
};

struct CostMap {
  ad::Tensor values;  // [H8,W8] mean residual norm over valid views
  ad::Tensor valid;   // [H8,W8] count of views contributing per pixel
  double mean = 0;    // mean over pixels with at least one valid view
};

struct IPOState {
  std::vector<SE3Pose> poses;      // T_{r->t} per reference view
  ad::Tensor log_depth;            // [H8,W8] value tensor (depth = exp)
  std::vector<ad::Tensor> hidden;  // per-ref Conv-GRU state (learned path)
  int k = 0;
};

inline ad::Tensor depth_from_log(const ad::Tensor& log_depth) {
  ad::Tensor d(log_depth.shape);
  for (std::int64_t i = 0; i < d.size(); ++i) d.data()[i] = std::exp(log_depth.data()[i]);
  return d;
}

// Per-view warped feature samples at scale-8 pixels for the current iterate.
inline void warp_feature_residuals(const ad::Tensor& f_ref, const ad::Tensor& f_tgt,
                                   const SE3Pose& pose_r_to_t, const Camera& cam8,
                                   const ad::Tensor& depth, bool want_jacobians,
                                   std::vector<geo::WarpValueJac>& out) {
  const int H = f_tgt.dim(0), W = f_tgt.dim(1), C = f_tgt.dim(2);
  geo::WarpSetup setup{pose_r_to_t, cam8, cam8};
  geo::warp_detail::PoseEval pe = geo::warp_detail::eval_pose(pose_r_to_t, Vec6::Zero());
  out.assign(std::size_t(H) * W, {});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      geo::WarpValueJac wj = geo::warp_pixel_jacobian(
          f_ref, setup, pe, Vec2(x, y), depth.data()[y * W + x], want_jacobians, want_jacobians);
      if (wj.valid)
        for (int c = 0; c < C; ++c) wj.value[std::size_t(c)] -= f_tgt.data()[(y * W + x) * C + c];
      out[std::size_t(y) * W + x] = std::move(wj);
    }
}

// Eq.-style feature-metric cost: per-pixel L2 residual norm between warped
// reference features and target features, averaged over valid nearby views.
inline CostMap cost_map(const ad::Tensor& f_tgt, const std::vector<ad::Tensor>& f_refs,
                        const ad::Tensor& depth, const std::vector<SE3Pose>& poses,
                        const Camera& cam8) {
  require(!f_refs.empty() && f_refs.size() == poses.size(), Err::InvalidArgument,
          "cost_map: need one pose per reference view");
  const int H = f_tgt.dim(0), W = f_tgt.dim(1), C = f_tgt.dim(2);
  CostMap cm;
  cm.values = ad::Tensor::zeros({H, W});
  cm.valid = ad::Tensor::zeros({H, W});
  std::vector<geo::WarpValueJac> wjs;
  for (std::size_t r = 0; r < f_refs.size(); ++r) {
    warp_feature_residuals(f_refs[r], f_tgt, poses[r], cam8, depth, false, wjs);
    for (int p = 0; p < H * W; ++p) {
      if (!wjs[std::size_t(p)].valid) continue;
      real n2 = 0;
      for (int c = 0; c < C; ++c)
        n2 += wjs[std::size_t(p)].value[std::size_t(c)] * wjs[std::size_t(p)].value[std::size_t(c)];
      cm.values.data()[p] += std::sqrt(n2);
      cm.valid.data()[p] += 1;
    }
  }
  double sum = 0;
  int n = 0;
  for (int p = 0; p < H * W; ++p) {
    if (cm.valid.data()[p] > 0) {
      cm.values.data()[p] /= cm.valid.data()[p];
      sum += cm.values.data()[p];
      ++n;
    }
  }
  require(n > 0, Err::NoValidPixels, "cost_map: every warp left the reference frustum");
  cm.mean = sum / n;
  return cm;
}

// ---------------------------------------------------------------------------
// analytic Gauss-Newton update (oracle path)
// ---------------------------------------------------------------------------

struct GNReport {
  double cost_before = 0;
  double cost_after = 0;
  bool pose_accepted = false;
  bool depth_accepted = false;
};

inline double total_cost(const ad::Tensor& f_tgt, const std::vector<ad::Tensor>& f_refs,
                         const ad::Tensor& depth, const std::vector<SE3Pose>& poses,
                         const Camera& cam8) {
  return cost_map(f_tgt, f_refs, depth, poses, cam8).mean;
}

// One damped Gauss-Newton step on poses (per view) and log-depth (per pixel),
// each accepted only if the Eq.-1 cost does not increase.
inline GNReport gauss_newton_step(IPOState& state, const ad::Tensor& f_tgt,
                                  const std::vector<ad::Tensor>& f_refs, const Camera& cam8,
                                  const IPOConfig& cfg) {
  const int H = f_tgt.dim(0), W = f_tgt.dim(1), C = f_tgt.dim(2);
  GNReport rep;
  ad::Tensor depth = depth_from_log(state.log_depth);
  rep.cost_before = total_cost(f_tgt, f_refs, depth, state.poses, cam8);

  std::vector<geo::WarpValueJac> wjs;
  // depth normal-equation accumulators, summed over views
  std::vector<double> h_d(std::size_t(H) * W, 0.0), g_d(std::size_t(H) * W, 0.0);

  std::vector<SE3Pose> cand = state.poses;
  for (std::size_t r = 0; r < f_refs.size(); ++r) {
    warp_feature_residuals(f_refs[r], f_tgt, state.poses[r], cam8, depth, true, wjs);
    Mat6 hess = Mat6::Zero();
    Vec6 grad = Vec6::Zero();
    for (int p = 0; p < H * W; ++p) {
      const auto& wj = wjs[std::size_t(p)];
      if (!wj.valid) continue;
      for (int c = 0; c < C; ++c) {
        Eigen::Map<const Eigen::Matrix<real, 6, 1>> j(&wj.d_xi[std::size_t(c) * 6]);
        Vec6 jd = j.template cast<double>();
        hess += jd * jd.transpose();
        grad += jd * double(wj.value[std::size_t(c)]);
        double jdep = wj.d_depth[std::size_t(c)];
        h_d[std::size_t(p)] += jdep * jdep;
        g_d[std::size_t(p)] += jdep * double(wj.value[std::size_t(c)]);
      }
    }
    // Levenberg damping with backtracking on this view's pose
    double lambda = cfg.lm_lambda;
    std::vector<SE3Pose> trial = cand;
    for (int bt = 0; bt < cfg.max_backtracks; ++bt) {
      Mat6 damped = hess + lambda * Mat6(hess.diagonal().asDiagonal()) +
                    1e-12 * Mat6::Identity();
      Vec6 delta = damped.ldlt().solve(-grad);
      require(delta.allFinite(), Err::NonFiniteUpdate, "gauss_newton_step: non-finite twist");
      trial[r] = state.poses[r].retract(delta);
      std::vector<SE3Pose> probe = cand;
      probe[r] = trial[r];
      double c_new = total_cost(f_tgt, f_refs, depth, probe, cam8);
      if (c_new <= rep.cost_before + 1e-15) {
        cand[r] = trial[r];
        rep.pose_accepted = true;
        break;
      }
      lambda *= 10;
    }
  }
  double cost_posed = total_cost(f_tgt, f_refs, depth, cand, cam8);
  if (cost_posed <= rep.cost_before + 1e-15) {
    state.poses = cand;
  } else {
    cost_posed = rep.cost_before;
    rep.pose_accepted = false;
  }

  // depth: per-pixel damped step in log space, halved until non-increasing
  ad::Tensor trial_log(state.log_depth.shape);
  double step_scale = 1.0;
  const double log_min = std::log(cfg.d_min), log_max = std::log(cfg.d_max);
  for (int bt = 0; bt < cfg.max_backtracks; ++bt) {
    for (int p = 0; p < H * W; ++p) {
      double d = depth.data()[p];
      double jl2 = h_d[std::size_t(p)] * d * d;  // chain to log-depth
      double gl = g_d[std::size_t(p)] * d;
      double step = jl2 > 1e-18 ? -step_scale * gl / (jl2 * (1 + cfg.lm_lambda)) : 0.0;
      double nl = state.log_depth.data()[p] + step;
      trial_log.data()[p] = std::clamp(nl, log_min, log_max);
    }
    double c_new = total_cost(f_tgt, f_refs, depth_from_log(trial_log), state.poses, cam8);
    if (c_new <= cost_posed + 1e-15) {
      state.log_depth = trial_log;
      rep.depth_accepted = true;
      rep.cost_after = c_new;
      break;
    }
    step_scale *= 0.5;
  }
  if (!rep.depth_accepted) rep.cost_after = cost_posed;
  state.k += 1;
  return rep;
}

// ---------------------------------------------------------------------------
// learned Conv-GRU update
// ---------------------------------------------------------------------------

struct IPOModel {
  static constexpr int kHidden = 16;
  static constexpr int kCin = 1 + EncoderModel::kChannels + 1;  // cost, F_t, log-depth

  int wz = -1, bz = -1, wr = -1, br = -1, wh = -1, bh = -1;
  int w_twist = -1, b_twist = -1;
  int w_depth = -1, b_depth = -1;

  static IPOModel create(ad::ParamStore& ps, Rng& rng) {
    IPOModel m;
    const int cin = kCin + kHidden;
    auto conv = [&](const char* name, int& w, int& b) {
      w = ps.add(std::string("ipo.gru.") + name + ".w",
                 enc_detail::conv_init({3, 3, cin, kHidden}, rng));
      b = ps.add(std::string("ipo.gru.") + name + ".b", ad::Tensor::zeros({kHidden}));
    };
    conv("z", m.wz, m.bz);
    conv("r", m.wr, m.br);
    conv("h", m.wh, m.bh);
    // zero-initialized output heads: the first update is exactly identity
    m.w_twist = ps.add("ipo.head.twist.w", ad::Tensor::zeros({kHidden, 6}));
    m.b_twist = ps.add("ipo.head.twist.b", ad::Tensor::zeros({6}));
    m.w_depth = ps.add("ipo.head.depth.w", ad::Tensor::zeros({1, 1, kHidden, 1}));
    m.b_depth = ps.add("ipo.head.depth.b", ad::Tensor::zeros({1}));
    return m;
  }

  struct Bound {
    ad::Tensor wz, bz, wr, br, wh, bh, w_twist, b_twist, w_depth, b_depth;
  };

  Bound bind(ad::Tape& t, ad::ParamStore& ps) const {
    return Bound{ps.use(t, wz),      ps.use(t, bz),      ps.use(t, wr),     ps.use(t, br),
                 ps.use(t, wh),      ps.use(t, bh),      ps.use(t, w_twist), ps.use(t, b_twist),
                 ps.use(t, w_depth), ps.use(t, b_depth)};
  }
};

inline ad::Tensor conv_gru_cell(ad::Tape& t, const ad::Tensor& x, const ad::Tensor& h,
                                const IPOModel::Bound& w) {
  namespace op = ad::ops;
  ad::Tensor cat = op::concat_lastdim(t, x, h);
  ad::Tensor z = op::sigmoid(t, op::add(t, op::conv2d(t, cat, w.wz, 1, 1), w.bz));
  ad::Tensor r = op::sigmoid(t, op::add(t, op::conv2d(t, cat, w.wr, 1, 1), w.br));
  ad::Tensor cat2 = op::concat_lastdim(t, x, op::mul(t, r, h));
  ad::Tensor hh = op::tanh(t, op::add(t, op::conv2d(t, cat2, w.wh, 1, 1), w.bh));
  return op::add(t, h, op::mul(t, z, op::sub(t, hh, h)));
}

struct LearnedStepResult {
  std::vector<ad::Tensor> twists;  // per ref, [6] tape tensors
  ad::Tensor dlog_depth;           // [H8,W8,1] tape tensor (mean over refs)
};

// One Conv-GRU update. Inputs per reference view: [cost_r, F_t, log-depth]
// (cost and log-depth enter as constants; gradients reach the GRU through its
// own outputs and the chained hidden state).
inline LearnedStepResult learned_update_step(ad::Tape& t, const IPOModel::Bound& w,
                                             IPOState& state, const ad::Tensor& f_tgt_tape,
                                             const std::vector<ad::Tensor>& f_refs,
                                             const Camera& cam8) {
  namespace op = ad::ops;
  const int H = f_tgt_tape.dim(0), W = f_tgt_tape.dim(1);
  LearnedStepResult out;
  ad::Tensor depth = depth_from_log(state.log_depth);
  ad::Tensor logd_in = ad::ops::reshape(t, ad::detach(state.log_depth), {H, W, 1});

  ad::Tensor dlog_sum;
  std::vector<geo::WarpValueJac> wjs;
  for (std::size_t r = 0; r < f_refs.size(); ++r) {
    // per-view cost channel (constant input feature)
    ad::Tensor cost_r = ad::Tensor::zeros({H, W, 1});
    warp_feature_residuals(ad::detach(f_refs[r]), ad::detach(f_tgt_tape), state.poses[r], cam8,
                           depth, false, wjs);
    for (int p = 0; p < H * W; ++p) {
      if (!wjs[std::size_t(p)].valid) continue;
      real n2 = 0;
      for (real v : wjs[std::size_t(p)].value) n2 += v * v;
      cost_r.data()[p] = std::sqrt(n2);
    }
    ad::Tensor x = op::concat_lastdim(t, op::concat_lastdim(t, cost_r, f_tgt_tape), logd_in);
    state.hidden[r] = conv_gru_cell(t, x, state.hidden[r], w);
    ad::Tensor pooled = op::reduce_mean_rows(
        t, op::reshape(t, state.hidden[r], {H * W, IPOModel::kHidden}));
    ad::Tensor xi = op::add(t, op::matmul(t, op::reshape(t, pooled, {1, IPOModel::kHidden}),
                                          w.w_twist),
                            w.b_twist);
    out.twists.push_back(op::reshape(t, xi, {6}));
    ad::Tensor dl = op::add(t, op::conv2d(t, state.hidden[r], w.w_depth, 1, 0), w.b_depth);
    dlog_sum = dlog_sum.defined() ? op::add(t, dlog_sum, dl) : dl;
  }
  out.dlog_depth = op::scale(t, dlog_sum, real(1) / real(f_refs.size()));
  return out;
}

// ---------------------------------------------------------------------------
// full estimation loop
// ---------------------------------------------------------------------------

struct IPOResult {
  std::vector<SE3Pose> poses;  // T_{r->t}
  DepthMap depth8;             // final depth at the stride-8 grid
  std::vector<double> cost_history;
  // learned-path training terms (valid when has_losses)
  ad::Tensor loss_photo;
  ad::Tensor loss_depth;
  bool has_losses = false;
};

struct IPOInit {
  std::vector<SE3Pose> poses;
  ad::Tensor log_depth;  // [H8,W8]
};

// Runs encode + K update iterations. `learned == nullptr` selects the
// Gauss-Newton oracle path. When `train` is set (learned path, recording
// tape), per-iteration photometric/smoothness losses are accumulated with
// decay gamma^(K-k).
inline IPOResult estimate(ad::Tape& t, ad::ParamStore& ps, const EncoderModel& enc,
                          const IPOModel* learned, const ad::Tensor& target_image,
                          const std::vector<ad::Tensor>& ref_images, const Camera& cam,
                          const IPOConfig& cfg, bool train = false,
                          const IPOInit* init = nullptr) {
  namespace op = ad::ops;
  require(!ref_images.empty(), Err::InsufficientViews, "estimate: empty reference set");
  EncoderWeights ew = EncoderWeights::bind(t, ps, enc);
  FeaturePyramid tgt = encode(t, ew, target_image);
  std::vector<ad::Tensor> f_refs;
  for (const auto& img : ref_images) f_refs.push_back(encode(t, ew, img).f8.features);
  const Camera cam8 = cam.scaled(8);
  const int H = tgt.f8.features.dim(0), W = tgt.f8.features.dim(1);

  IPOState state;
  if (init) {
    state.poses = init->poses;
    state.log_depth = init->log_depth;
  } else {
    state.poses.assign(ref_images.size(), SE3Pose::identity());
    state.log_depth =
        ad::Tensor::full({H, W}, real(0.5 * (std::log(cfg.d_min) + std::log(cfg.d_max))));
  }
  for (std::size_t r = 0; r < ref_images.size(); ++r)
    state.hidden.push_back(ad::Tensor::zeros({H, W, IPOModel::kHidden}));

  IPOResult res;
  res.cost_history.push_back(
      total_cost(ad::detach(tgt.f8.features), f_refs, depth_from_log(state.log_depth),
                 state.poses, cam8));

  const IPOModel::Bound bound =
      learned ? learned->bind(t, ps) : IPOModel::Bound{};

  for (int k = 0; k < cfg.iters; ++k) {
    if (!learned) {
      GNReport rep = gauss_newton_step(state, ad::detach(tgt.f8.features), f_refs, cam8, cfg);
      res.cost_history.push_back(rep.cost_after);
      continue;
    }
    LearnedStepResult step = learned_update_step(t, bound, state, tgt.f8.features, f_refs, cam8);
    // apply the increments: poses by right-multiplied twist, depth in log space
    ad::Tensor new_log = op::add(t, op::reshape(t, ad::detach(state.log_depth), {H, W, 1}),
                                 step.dlog_depth);
    if (train) {
      // supervise this iteration's increments through the warp
      ad::Tensor d_img8 = op::exp(t, new_log);
      ad::Tensor d_full = d_img8;
      for (int u = 0; u < 3; ++u) d_full = op::upsample2x(t, d_full);
      ad::Tensor d_full2 =
          op::reshape(t, d_full, {target_image.dim(0), target_image.dim(1)});
      ad::Tensor photo_sum, smooth_sum;
      for (std::size_t r = 0; r < ref_images.size(); ++r) {
        geo::WarpSetup setup{state.poses[r], cam, cam};
        geo::WarpOpResult warped =
            geo::warp_image_op(t, ad::detach(ref_images[r]), d_full2, step.twists[r], setup);
        ad::Tensor lp = losses::loss_photo(t, warped.image, ad::detach(target_image),
                                           warped.mask, losses::kDefaultSsimMix);
        photo_sum = photo_sum.defined() ? op::add(t, photo_sum, lp) : lp;
      }
      photo_sum = op::scale(t, photo_sum, real(1) / real(ref_images.size()));
      ad::Tensor ld = losses::loss_depth(t, d_full2, ad::detach(target_image));
      real wk = static_cast<real>(std::pow(cfg.gamma, cfg.iters - 1 - k));
      res.loss_photo = res.loss_photo.defined()
                           ? op::add(t, res.loss_photo, op::scale(t, photo_sum, wk))
                           : op::scale(t, photo_sum, wk);
      res.loss_depth = res.loss_depth.defined()
                           ? op::add(t, res.loss_depth, op::scale(t, ld, wk))
                           : op::scale(t, ld, wk);
      res.has_losses = true;
    }
    // advance the value-level state (bases detached between iterations)
    for (std::size_t r = 0; r < ref_images.size(); ++r) {
      Vec6 xi;
      for (int i = 0; i < 6; ++i) xi[i] = step.twists[r].data()[i];
      require(xi.allFinite(), Err::NonFiniteUpdate, "learned update produced non-finite twist");
      state.poses[r] = state.poses[r].retract(xi);
    }
    ad::Tensor nl = ad::detach(new_log);
    state.log_depth = ad::Tensor({H, W});
    const double log_min = std::log(cfg.d_min), log_max = std::log(cfg.d_max);
    for (int p = 0; p < H * W; ++p)
      state.log_depth.data()[p] =
          std::clamp(nl.data()[p], static_cast<real>(log_min), static_cast<real>(log_max));
    state.k += 1;
    res.cost_history.push_back(
        total_cost(ad::detach(tgt.f8.features), f_refs, depth_from_log(state.log_depth),
                   state.poses, cam8));
  }

  res.poses = state.poses;
  res.depth8 = DepthMap(depth_from_log(state.log_depth));
  return res;
}

// T_{r->r+1} = T_{r+1->t}^{-1} ∘ T_{r->t} for consecutive reference indexing.
inline std::vector<SE3Pose> chain_relatives(const std::vector<SE3Pose>& poses_r_to_t) {
  std::vector<SE3Pose> out;
  for (std::size_t r = 0; r + 1 < poses_r_to_t.size(); ++r)
    out.push_back(SE3Pose::compose(poses_r_to_t[r + 1].inverse(), poses_r_to_t[r]));
  return out;
}

}  // namespace poseless::ipo
