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

#include <catch2/catch_amalgamated.hpp>

#include "poseless/splat.hpp"
#include "support.hpp"

using namespace poseless;
using ad::ParamStore;
using ad::Tape;
using ad::Tensor;
namespace op = ad::ops;

namespace {

GaussianSet random_cloud(Rng& rng, int count, bool separated_depths = false) {
  GaussianSet set;
  std::uniform_real_distribution<double> ux(-0.9, 0.9), us(0.03, 0.25), ua(0.1, 0.9), uc(0, 1),
      uq(-1, 1), uz(1.2, 4.0);
  for (int i = 0; i < count; ++i) {
    GaussianPoint g;
    double z = separated_depths ? 1.5 + 0.4 * i : uz(rng);
    g.mu = Vec3(ux(rng), ux(rng), z);
    g.scale = Vec3(us(rng), us(rng), us(rng));
    g.rot = Eigen::Quaterniond(1 + uq(rng) * 0.4, uq(rng) * 0.4, uq(rng) * 0.4, uq(rng) * 0.4)
                .normalized();
    g.alpha = ua(rng);
    g.rgb = Vec3(uc(rng), uc(rng), uc(rng));
    g.validate();
    set.points.push_back(g);
  }
  return set;
}

Camera test_cam(int w = 48, int h = 40) {
  return Camera(40, 40, (w - 1) / 2.0, (h - 1) / 2.0, w, h);
}

}  // namespace

TEST_CASE("single opaque isotropic gaussian hits its pixel with its color") {
  Camera cam = test_cam(33, 33);
  GaussianSet set;
  GaussianPoint g;
  g.mu = Vec3(0, 0, 2);
  g.scale = Vec3(0.05, 0.05, 0.05);
  g.alpha = 0.97;
  g.rgb = Vec3(0.2, 0.9, 0.4);
  set.points.push_back(g);
  auto out = splat::render(set, cam, SE3Pose::identity());
  int cxy = 16;
  const real* px = out.color.data() + (cxy * 33 + cxy) * 3;
  REQUIRE(px[0] == Catch::Approx(0.97 * 0.2).margin(1e-6));
  REQUIRE(px[1] == Catch::Approx(0.97 * 0.9).margin(1e-6));
  REQUIRE(px[2] == Catch::Approx(0.97 * 0.4).margin(1e-6));
  REQUIRE(out.alpha_acc.data()[cxy * 33 + cxy] == Catch::Approx(0.97).margin(1e-6));
  REQUIRE(out.depth.data()[cxy * 33 + cxy] == Catch::Approx(0.97 * 2.0).margin(1e-5));
}

TEST_CASE("a nearly opaque front gaussian occludes the back one") {
  Camera cam = test_cam(33, 33);
  GaussianSet set;
  GaussianPoint front, back;
  front.mu = Vec3(0, 0, 1.5);
  front.scale = Vec3(0.08, 0.08, 0.08);
  front.alpha = 0.999;
  front.rgb = Vec3(1, 0, 0);
  back = front;
  back.mu = Vec3(0, 0, 3.0);
  back.alpha = 0.9;
  back.rgb = Vec3(0, 1, 0);
  set.points = {back, front};  // insertion order should not matter
  auto out = splat::render(set, cam, SE3Pose::identity());
  const real* px = out.color.data() + (16 * 33 + 16) * 3;
  REQUIRE(px[0] == Catch::Approx(0.999).margin(1e-3));
  REQUIRE(px[1] < 2e-3);
}

TEST_CASE("tiled renderer matches the naive oracle on 500 random gaussians") {
  Rng rng(2024);
  GaussianSet set = random_cloud(rng, 500);
  Camera cam = test_cam(64, 48);
  SE3Pose pose(Eigen::Quaterniond(Eigen::AngleAxisd(0.05, Vec3::UnitY())), Vec3(0.02, -0.01, 0));
  auto fast = splat::render(set, cam, pose);
  auto slow = splat::render_naive(set, cam, pose);
  REQUIRE(ad::max_abs_diff(fast.color, slow.color) < 1e-6);
  REQUIRE(ad::max_abs_diff(fast.alpha_acc, slow.alpha_acc) < 1e-6);
  REQUIRE(ad::max_abs_diff(fast.depth, slow.depth) < 1e-5);
}

TEST_CASE("render of an empty or all-culled set is black, not an error") {
  Camera cam = test_cam();
  GaussianSet empty;
  auto out = splat::render_naive(empty, cam, SE3Pose::identity());
  for (std::int64_t i = 0; i < out.alpha_acc.size(); ++i)
    REQUIRE(out.alpha_acc.data()[i] == 0.0);
  GaussianSet behind;
  GaussianPoint g;
  g.mu = Vec3(0, 0, -2);
  behind.points.push_back(g);
  auto out2 = splat::render(behind, cam, SE3Pose::identity());
  for (std::int64_t i = 0; i < out2.color.size(); ++i) REQUIRE(out2.color.data()[i] == 0.0);
}

TEST_CASE("rendering is invariant to gaussian input order") {
  Rng rng(7);
  GaussianSet set = random_cloud(rng, 40, /*separated_depths=*/true);
  Camera cam = test_cam();
  auto a = splat::render(set, cam, SE3Pose::identity());
  std::reverse(set.points.begin(), set.points.end());
  auto b = splat::render(set, cam, SE3Pose::identity());
  REQUIRE(ad::bitwise_equal(a.color, b.color));
  REQUIRE(ad::bitwise_equal(a.depth, b.depth));
}

TEST_CASE("alpha accumulation bounds and per-pixel transmittance monotonicity") {
  Rng rng(99);
  GaussianSet set = random_cloud(rng, 120);
  Camera cam = test_cam();
  auto out = splat::render(set, cam, SE3Pose::identity());
  for (int p = 0; p < 48 * 40; ++p) {
    real acc = out.alpha_acc.data()[p];
    REQUIRE(acc >= 0.0);
    REQUIRE(acc <= 1.0);
    for (int c = 0; c < 3; ++c) {
      REQUIRE(out.color.data()[p * 3 + c] >= 0.0);
      REQUIRE(out.color.data()[p * 3 + c] <= acc + 1e-12);
    }
  }
  // independent check of the transmittance recursion on a few pixels
  GaussianSoA soa(set);
  auto prep = splat::detail::prepare(soa.view(), cam, SE3Pose::identity(), {});
  for (int px : {100, 777, 1500}) {
    double x = px % 48, y = px / 48;
    real prev_t = 1;
    splat::detail::walk_pixel(prep.proj, prep.order, x, y, {}, false,
                              [&](const splat::detail::Contribution& c, real t) {
                                REQUIRE(t <= prev_t + 1e-15);
                                prev_t = t * (1 - c.a);
                              });
  }
}

TEST_CASE("windowed rendering is a bitwise crop of the full frame") {
  Rng rng(1234);
  GaussianSet set = random_cloud(rng, 200);
  Camera cam = test_cam(64, 48);
  auto full = splat::render(set, cam, SE3Pose::identity());
  splat::Window win{19, 7, 21, 17};
  auto part = splat::render(set, cam, SE3Pose::identity(), {}, win);
  for (int y = 0; y < win.h; ++y)
    for (int x = 0; x < win.w; ++x)
      for (int c = 0; c < 3; ++c)
        REQUIRE(part.color.data()[(y * win.w + x) * 3 + c] ==
                full.color.data()[((y + win.y0) * 64 + x + win.x0) * 3 + c]);
}

TEST_CASE("render_backward: zero cotangent gives zero gradients") {
  Rng rng(5);
  GaussianSet set = random_cloud(rng, 10);
  GaussianSoA soa(set);
  Camera cam = test_cam();
  auto gg = splat::render_backward(soa.view(), cam, SE3Pose::identity(),
                                   Tensor::zeros({40, 48, 3}));
  for (real v : gg.mu) REQUIRE(v == 0.0);
  for (real v : gg.alpha) REQUIRE(v == 0.0);
}

TEST_CASE("render_backward matches finite differences on a 5-gaussian scene") {
  Rng rng(31337);
  Camera cam = test_cam(24, 20);
  const int P = 5;
  GaussianSet set = random_cloud(rng, P, /*separated_depths=*/true);
  // moderate opacities keep the compositing well inside the clamp
  for (auto& g : set.points) g.alpha = std::min(0.85, std::max(0.15, g.alpha));
  GaussianSoA soa(set);

  ParamStore ps;
  ps.add("mu", Tensor::from({P, 3}, soa.mu));
  ps.add("scale", Tensor::from({P, 3}, soa.scale));
  ps.add("rot", Tensor::from({P, 4}, soa.rot));
  ps.add("alpha", Tensor::from({P}, soa.alpha));
  ps.add("color", Tensor::from({P, 3}, soa.color));
  Rng wr(4);
  Tensor cot = Tensor::uniform({20, 24, 3}, wr);
  auto f = [&](Tape& t, ParamStore& p) {
    Tensor img = splat::render_op(t, p.use(t, 0), p.use(t, 1), p.use(t, 2), p.use(t, 3),
                                  p.use(t, 4), cam, SE3Pose::identity());
    return op::reduce_sum_all(t, op::mul(t, img, t.leaf(cot)));
  };
  REQUIRE(poseless::test::max_fd_rel_err(ps, f, 1e-5) < 1e-4);
}

TEST_CASE("per-patch render backward sums to the full-image backward") {
  Rng rng(77);
  GaussianSet set = random_cloud(rng, 60);
  GaussianSoA soa(set);
  Camera cam = test_cam(32, 32);
  Rng cr(8);
  Tensor cot = Tensor::uniform({32, 32, 3}, cr);

  auto full = splat::render_backward(soa.view(), cam, SE3Pose::identity(), cot);

  splat::GaussianGrads acc(static_cast<int>(set.count()));
  for (int qy = 0; qy < 2; ++qy)
    for (int qx = 0; qx < 2; ++qx) {
      splat::Window win{qx * 16, qy * 16, 16, 16};
      Tensor part({16, 16, 3});
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          for (int c = 0; c < 3; ++c)
            part.data()[(y * 16 + x) * 3 + c] =
                cot.data()[((y + win.y0) * 32 + x + win.x0) * 3 + c];
      auto gg = splat::render_backward(soa.view(), cam, SE3Pose::identity(), part, {}, win);
      for (std::size_t i = 0; i < acc.mu.size(); ++i) acc.mu[i] += gg.mu[i];
      for (std::size_t i = 0; i < acc.scale.size(); ++i) acc.scale[i] += gg.scale[i];
      for (std::size_t i = 0; i < acc.rot.size(); ++i) acc.rot[i] += gg.rot[i];
      for (std::size_t i = 0; i < acc.alpha.size(); ++i) acc.alpha[i] += gg.alpha[i];
      for (std::size_t i = 0; i < acc.color.size(); ++i) acc.color[i] += gg.color[i];
    }
  REQUIRE(poseless::test::max_rel_diff(acc.mu, full.mu) < 1e-9);
  REQUIRE(poseless::test::max_rel_diff(acc.scale, full.scale) < 1e-9);
  REQUIRE(poseless::test::max_rel_diff(acc.rot, full.rot) < 1e-9);
  REQUIRE(poseless::test::max_rel_diff(acc.alpha, full.alpha) < 1e-9);
  REQUIRE(poseless::test::max_rel_diff(acc.color, full.color) < 1e-9);
}

TEST_CASE("gaussian serialization round-trips through the f32 records") {
  Rng rng(3);
  GaussianSet set = random_cloud(rng, 17);
  set.source_image_id = 4;
  std::string path = "/tmp/poseless_test_gaussians.ggs";
  save_gaussians(path, set, "deadbeef");
  GaussianSet back = load_gaussians(path);
  REQUIRE(back.count() == set.count());
  REQUIRE(back.source_image_id == 4);
  for (std::size_t i = 0; i < set.count(); ++i) {
    REQUIRE((back.points[i].mu - set.points[i].mu).norm() < 1e-6);
    REQUIRE(std::abs(back.points[i].alpha - set.points[i].alpha) < 1e-6);
  }
}
