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

#include "poseless/encoder.hpp"
#include "support.hpp"

using namespace poseless;
using ad::ParamStore;
using ad::Tape;
using ad::Tensor;
namespace op = ad::ops;

namespace {

struct Ctx {
  ParamStore ps;
  EncoderModel model;
  Ctx(unsigned seed = 42) {
    Rng rng(seed);
    model = EncoderModel::create(ps, rng);
  }
  FeaturePyramid run(const Tensor& img) {
    Tape t(ad::Mode::NoGrad);
    auto w = EncoderWeights::bind(t, ps, model);
    return encode(t, w, img);
  }
};

}  // namespace

TEST_CASE("encoder shape contract and resolution check") {
  Ctx ctx;
  Tensor img = Tensor::zeros({48, 64, 3});
  auto fp = ctx.run(img);
  REQUIRE(fp.f4.features.shape == ad::Shape{12, 16, 32});
  REQUIRE(fp.f8.features.shape == ad::Shape{6, 8, 32});
  REQUIRE(fp.f4.scale == 4);
  REQUIRE(fp.f8.scale == 8);
  Tensor bad = Tensor::zeros({50, 64, 3});
  Tape t(ad::Mode::NoGrad);
  auto w = EncoderWeights::bind(t, ctx.ps, ctx.model);
  REQUIRE_THROWS_AS(encode(t, w, bad), Error);
}

TEST_CASE("constant image gives spatially constant interior features") {
  Ctx ctx;
  Tensor img = Tensor::full({64, 64, 3}, real(0.37));
  auto fp = ctx.run(img);
  const int margin4 = 4;
  const Tensor& f = fp.f4.features;
  const int H = f.dim(0), W = f.dim(1), C = f.dim(2);
  const real* ref = f.data() + ((margin4 * W) + margin4) * C;
  for (int y = margin4; y < H - margin4; ++y)
    for (int x = margin4; x < W - margin4; ++x)
      for (int c = 0; c < C; ++c)
        REQUIRE(f.data()[(y * W + x) * C + c] == Catch::Approx(ref[c]).margin(1e-9));
}

TEST_CASE("shifting the input by 4 pixels shifts scale-4 features by one cell") {
  Ctx ctx;
  Rng rng(9);
  Tensor img = Tensor::uniform({64, 64, 3}, rng, 0, 1);
  Tensor shifted = Tensor::zeros({64, 64, 3});
  // shift content right by 4 pixels
  for (int y = 0; y < 64; ++y)
    for (int x = 4; x < 64; ++x)
      for (int c = 0; c < 3; ++c)
        shifted.data()[(y * 64 + x) * 3 + c] = img.data()[(y * 64 + x - 4) * 3 + c];
  auto fa = ctx.run(img).f4.features;
  auto fb = ctx.run(shifted).f4.features;
  const int margin = 6;  // receptive-field/4 ring
  const int H = fa.dim(0), W = fa.dim(1), C = fa.dim(2);
  for (int y = margin; y < H - margin; ++y)
    for (int x = margin; x < W - margin; ++x)
      for (int c = 0; c < C; ++c)
        REQUIRE(fb.data()[(y * W + x + 1) * C + c] ==
                Catch::Approx(fa.data()[(y * W + x) * C + c]).margin(1e-9));
}

TEST_CASE("encoder weight gradients match finite differences") {
  Rng rng(77);
  ParamStore ps;
  EncoderModel model = EncoderModel::create(ps, rng);
  Tensor img = Tensor::uniform({16, 16, 3}, rng, 0, 1);
  Rng wr(3);
  auto f = [&](Tape& t, ParamStore& p) {
    auto w = EncoderWeights::bind(t, p, model);
    auto fp = encode(t, w, img);
    Rng local = wr;
    Tensor r4 = Tensor::uniform(fp.f4.features.shape, local);
    Tensor r8 = Tensor::uniform(fp.f8.features.shape, local);
    Tensor s4 = op::reduce_sum_all(t, op::mul(t, fp.f4.features, t.leaf(r4)));
    Tensor s8 = op::reduce_sum_all(t, op::mul(t, fp.f8.features, t.leaf(r8)));
    return op::add(t, s4, s8);
  };
  REQUIRE(poseless::test::max_fd_rel_err(ps, f) < 1e-5);
}

TEST_CASE("the encoder is shared: both views read the same parameter storage") {
  Ctx ctx;
  Tape t;
  auto w = EncoderWeights::bind(t, ctx.ps, ctx.model);
  Rng rng(4);
  Tensor a = Tensor::uniform({16, 16, 3}, rng, 0, 1);
  Tensor b = Tensor::uniform({16, 16, 3}, rng, 0, 1);
  auto fa = encode(t, w, a, 0);
  auto fb = encode(t, w, b, 1);
  REQUIRE(fa.f4.source_image_id == 0);
  REQUIRE(fb.f4.source_image_id == 1);
  // pointer equality of the weight set used by both calls
  REQUIRE(w.w1.store.get() == ctx.ps.value(ctx.model.c1.w).store.get());
  REQUIRE(w.wout4.store.get() == ctx.ps.value(ctx.model.out4.w).store.get());
}
