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
// Shared image encoder: a small conv trunk with two output levels (stride 4
// and stride 8, 32 channels each) and a strided lateral merge into the coarse
// head. Both pose estimation and Gaussian prediction read these features.

#pragma once

#include "poseless/ops.hpp"

namespace poseless {

struct FeatureMap {
  ad::Tensor features;  // [H', W', C]
  int scale = 1;
  int source_image_id = -1;
};

struct FeaturePyramid {
  FeatureMap f4;  // stride 4, C=32 (Gaussian prediction)
  FeatureMap f8;  // stride 8, C=32 (pose cost maps)
};

namespace enc_detail {

inline ad::Tensor conv_init(ad::Shape s, Rng& rng) {
  double fan_in = double(s[0]) * s[1] * s[2];
  double limit = std::sqrt(6.0 / fan_in);
  return ad::Tensor::uniform(std::move(s), rng, real(-limit), real(limit));
}

}  // namespace enc_detail

struct EncoderModel {
  static constexpr int kChannels = 32;

  struct Conv {
    int w = -1, b = -1;
  };
  Conv c1, c2, c3, c4, c5, c6, lat, out4;

  static EncoderModel create(ad::ParamStore& ps, Rng& rng) {
    EncoderModel m;
    auto mk = [&](const char* name, int kh, int kw, int cin, int cout) {
      Conv c;
      c.w = ps.add(std::string("enc.") + name + ".w",
                   enc_detail::conv_init({kh, kw, cin, cout}, rng));
      c.b = ps.add(std::string("enc.") + name + ".b", ad::Tensor::zeros({cout}));
      return c;
    };
    m.c1 = mk("c1", 3, 3, 3, 16);
    m.c2 = mk("c2", 3, 3, 16, 32);
    m.c3 = mk("c3", 3, 3, 32, 32);
    m.c4 = mk("c4", 3, 3, 32, 48);
    m.c5 = mk("c5", 3, 3, 48, 48);
    m.c6 = mk("c6", 3, 3, 48, 32);
    m.lat = mk("lat", 3, 3, 32, 32);
    m.out4 = mk("out4", 3, 3, 32, 32);
    return m;
  }
};

// Parameter tensors bound to one tape; every encode call on the tape shares
// these leaves, so F_r and F_t provably come from one weight set.
struct EncoderWeights {
  ad::Tensor w1, b1, w2, b2, w3, b3, w4, b4, w5, b5, w6, b6, wlat, blat, wout4, bout4;

  static EncoderWeights bind(ad::Tape& t, ad::ParamStore& ps, const EncoderModel& m) {
    EncoderWeights w;
    w.w1 = ps.use(t, m.c1.w);
    w.b1 = ps.use(t, m.c1.b);
    w.w2 = ps.use(t, m.c2.w);
    w.b2 = ps.use(t, m.c2.b);
    w.w3 = ps.use(t, m.c3.w);
    w.b3 = ps.use(t, m.c3.b);
    w.w4 = ps.use(t, m.c4.w);
    w.b4 = ps.use(t, m.c4.b);
    w.w5 = ps.use(t, m.c5.w);
    w.b5 = ps.use(t, m.c5.b);
    w.w6 = ps.use(t, m.c6.w);
    w.b6 = ps.use(t, m.c6.b);
    w.wlat = ps.use(t, m.lat.w);
    w.blat = ps.use(t, m.lat.b);
    w.wout4 = ps.use(t, m.out4.w);
    w.bout4 = ps.use(t, m.out4.b);
    return w;
  }
};

inline FeaturePyramid encode(ad::Tape& t, const EncoderWeights& w, const ad::Tensor& image,
                             int image_id = -1) {
  namespace op = ad::ops;
  require(image.ndim() == 3 && image.dim(2) == 3, Err::ShapeMismatch,
          "encode expects an [H,W,3] image");
  require(image.dim(0) % 8 == 0 && image.dim(1) % 8 == 0, Err::BadResolution,
          "encode needs H and W divisible by 8");
  ad::Tensor h1 = op::relu(t, op::add(t, op::conv2d(t, image, w.w1, 2, 1), w.b1));
  ad::Tensor h2 = op::relu(t, op::add(t, op::conv2d(t, h1, w.w2, 2, 1), w.b2));
  ad::Tensor h3 = op::relu(t, op::add(t, op::conv2d(t, h2, w.w3, 1, 1), w.b3));
  ad::Tensor h4 = op::relu(t, op::add(t, op::conv2d(t, h3, w.w4, 2, 1), w.b4));
  ad::Tensor h5 = op::relu(t, op::add(t, op::conv2d(t, h4, w.w5, 1, 1), w.b5));
  // lateral merge runs downward (stride-2) so the fine level keeps strict
  // stride-4 shift equivariance
  ad::Tensor f8 = op::add(t, op::add(t, op::conv2d(t, h5, w.w6, 1, 1), w.b6),
                          op::add(t, op::conv2d(t, h3, w.wlat, 2, 1), w.blat));
  ad::Tensor f4 = op::add(t, op::conv2d(t, h3, w.wout4, 1, 1), w.bout4);
  FeaturePyramid out;
  out.f4 = FeatureMap{f4, 4, image_id};
  out.f8 = FeatureMap{f8, 8, image_id};
  return out;
}

}  // namespace poseless
