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

#include <fstream>

#include <json.hpp>

#include "poseless/geometry.hpp"

namespace poseless {

// One anisotropic 3D Gaussian: Sigma = R(rot) diag(scale^2) R(rot)^T.
struct GaussianPoint {
  Vec3 mu = Vec3::Zero();
  Vec3 scale = Vec3::Ones();
  Eigen::Quaterniond rot{1, 0, 0, 0};
  double alpha = 0.5;
  Vec3 rgb = Vec3::Zero();

  void validate() const {
    require(scale.minCoeff() > 0, Err::InvalidArgument, "GaussianPoint: scale must be positive");
    require(alpha > 0 && alpha < 1, Err::InvalidArgument, "GaussianPoint: alpha must be in (0,1)");
  }

  Mat3 covariance() const {
    Mat3 r = rot.normalized().toRotationMatrix();
    return r * scale.cwiseProduct(scale).asDiagonal() * r.transpose();
  }
};

constexpr std::size_t kGaussianRecordBytes = 14 * sizeof(float);

struct GaussianSet {
  std::vector<GaussianPoint> points;
  int source_image_id = -1;

  std::size_t count() const { return points.size(); }
  std::size_t byte_estimate() const { return points.size() * 14 * sizeof(real); }
};

inline GaussianSet concat_sets(const std::vector<GaussianSet>& sets) {
  GaussianSet all;
  all.source_image_id = -1;
  for (const auto& s : sets)
    all.points.insert(all.points.end(), s.points.begin(), s.points.end());
  return all;
}

// Structure-of-arrays view used by the rasterizer; also the bridge between
// GaussianSet values and the tape tensors of the prediction head.
struct GaussianArrays {
  const real* mu = nullptr;     // [P,3]
  const real* scale = nullptr;  // [P,3]
  const real* rot = nullptr;    // [P,4] (w,x,y,z), normalized internally
  const real* alpha = nullptr;  // [P]
  const real* color = nullptr;  // [P,3]
  int count = 0;
};

struct GaussianSoA {
  std::vector<real> mu, scale, rot, alpha, color;

  explicit GaussianSoA(const GaussianSet& s) {
    const std::size_t n = s.points.size();
    mu.resize(3 * n);
    scale.resize(3 * n);
    rot.resize(4 * n);
    alpha.resize(n);
    color.resize(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
      const GaussianPoint& g = s.points[i];
      for (int k = 0; k < 3; ++k) {
        mu[i * 3 + k] = static_cast<real>(g.mu[k]);
        scale[i * 3 + k] = static_cast<real>(g.scale[k]);
        color[i * 3 + k] = static_cast<real>(g.rgb[k]);
      }
      rot[i * 4 + 0] = static_cast<real>(g.rot.w());
      rot[i * 4 + 1] = static_cast<real>(g.rot.x());
      rot[i * 4 + 2] = static_cast<real>(g.rot.y());
      rot[i * 4 + 3] = static_cast<real>(g.rot.z());
      alpha[i] = static_cast<real>(g.alpha);
    }
  }

  GaussianArrays view() const {
    return GaussianArrays{mu.data(), scale.data(), rot.data(), alpha.data(), color.data(),
                          static_cast<int>(alpha.size())};
  }
};

inline GaussianSet set_from_arrays(const GaussianArrays& a, int source_image_id) {
  GaussianSet s;
  s.source_image_id = source_image_id;
  s.points.resize(static_cast<std::size_t>(a.count));
  for (int i = 0; i < a.count; ++i) {
    GaussianPoint& g = s.points[std::size_t(i)];
    g.mu = Vec3(a.mu[i * 3], a.mu[i * 3 + 1], a.mu[i * 3 + 2]);
    g.scale = Vec3(a.scale[i * 3], a.scale[i * 3 + 1], a.scale[i * 3 + 2]);
    g.rot = Eigen::Quaterniond(a.rot[i * 4], a.rot[i * 4 + 1], a.rot[i * 4 + 2], a.rot[i * 4 + 3])
                .normalized();
    g.alpha = a.alpha[i];
    g.rgb = Vec3(a.color[i * 3], a.color[i * 3 + 1], a.color[i * 3 + 2]);
  }
  return s;
}

// Flat binary records (mu[3], scale[3], rot[4], alpha, rgb[3]) as f32
// little-endian, plus a JSON sidecar at <path>.json.
inline void save_gaussians(const std::string& path, const GaussianSet& set,
                           const std::string& scene_hash) {
  std::ofstream bin(path, std::ios::binary);
  require(bin.good(), Err::IoError, "cannot write " + path);
  for (const auto& g : set.points) {
    float rec[14] = {
        float(g.mu.x()),    float(g.mu.y()),    float(g.mu.z()),   float(g.scale.x()),
        float(g.scale.y()), float(g.scale.z()), float(g.rot.w()),  float(g.rot.x()),
        float(g.rot.y()),   float(g.rot.z()),   float(g.alpha),    float(g.rgb.x()),
        float(g.rgb.y()),   float(g.rgb.z())};
    bin.write(reinterpret_cast<const char*>(rec), sizeof(rec));
  }
  bin.close();
  nlohmann::json side;
  side["count"] = set.points.size();
  side["source_image_id"] = set.source_image_id;
  side["scene_hash"] = scene_hash;
  std::ofstream js(path + ".json");
  require(js.good(), Err::IoError, "cannot write " + path + ".json");
  js << side.dump(2) << "\n";
}

inline GaussianSet load_gaussians(const std::string& path) {
  std::ifstream js(path + ".json");
  require(js.good(), Err::IoError, "missing sidecar " + path + ".json");
  nlohmann::json side = nlohmann::json::parse(js);
  GaussianSet set;
  set.source_image_id = side.at("source_image_id").get<int>();
  std::size_t count = side.at("count").get<std::size_t>();
  std::ifstream bin(path, std::ios::binary);
  require(bin.good(), Err::IoError, "cannot read " + path);
  set.points.resize(count);
  for (auto& g : set.points) {
    float rec[14];
    bin.read(reinterpret_cast<char*>(rec), sizeof(rec));
    require(bin.good(), Err::IoError, "truncated gaussian file " + path);
    g.mu = Vec3(rec[0], rec[1], rec[2]);
    g.scale = Vec3(rec[3], rec[4], rec[5]);
    g.rot = Eigen::Quaterniond(rec[6], rec[7], rec[8], rec[9]).normalized();
    g.alpha = rec[10];
    g.rgb = Vec3(rec[11], rec[12], rec[13]);
  }
  return set;
}

}  // namespace poseless
