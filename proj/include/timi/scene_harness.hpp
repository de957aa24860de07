// Copyright 2026 The TIMI Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef TIMI_SCENE_HARNESS_HPP
#define TIMI_SCENE_HARNESS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "timi/error.hpp"
#include "timi/io.hpp"
#include "timi/latent_field.hpp"
#include "timi/metrics.hpp"
#include "timi/toy_pipeline.hpp"

// Seeded synthetic multi-instance scenes with exact ground truth. Instances
// are placed next to an already placed instance at exactly `gap` empty voxels
// along a random axis, so every scene holds spatially adjacent objects. The
// "image" is an orthographic front view along D rendered at token resolution.

namespace timi {

enum class ShapeKind { kBox, kSphere, kLShape };

inline const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::kBox: return "box";
    case ShapeKind::kSphere: return "sphere";
    case ShapeKind::kLShape: return "l-shape";
  }
  return "box";
}

inline ShapeKind parse_shape(const std::string& s) {
  if (s == "box") return ShapeKind::kBox;
  if (s == "sphere") return ShapeKind::kSphere;
  if (s == "l-shape" || s == "lshape") return ShapeKind::kLShape;
  throw Error("config", "unknown shape kind " + s);
}

struct SceneSpec {
  Dims3 dims{32, 32, 32};
  std::size_t instances = 2;       // 2..4; 0 draws it from the seed
  std::vector<ShapeKind> shapes;   // per instance; empty draws kinds from the seed
  std::size_t size_min = 4;
  std::size_t size_max = 10;
  std::size_t gap = 0;             // minimum empty voxels between instances (0, 1 or 2)
  std::size_t token_h = 16;
  std::size_t token_w = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (instances != 0 && (instances < 2 || instances > 4)) throw Error("config", "instance count must be in [2, 4]");
    if (!shapes.empty() && instances != 0 && shapes.size() != instances) {
      throw Error("config", "one shape kind per instance expected");
    }
    if (size_min < 1 || size_min > size_max) throw Error("config", "bad instance size range");
    if (gap > 2) throw Error("config", "gap must be 0, 1 or 2");
    if (size_max > dims.depth || size_max > dims.height || size_max > dims.width) {
      throw Error("config", "instances do not fit in the grid");
    }
    if (token_h == 0 || token_w == 0 || token_h > dims.height || token_w > dims.width) {
      throw Error("config", "token grid must be non-empty and no finer than the voxel grid");
    }
  }
};

struct Placement {
  ShapeKind shape = ShapeKind::kBox;
  std::array<std::size_t, 3> origin{};  // d, h, w of the bounding box corner
  std::array<std::size_t, 3> size{};
};

struct SceneRecord {
  SceneSpec spec;
  std::vector<Placement> placements;
  VoxelGrid fused;
  std::vector<VoxelGrid> instances;
  std::vector<Point3> centroids;  // voxel units
  ConditionSet condition;
  InstanceMaskSet masks;
};

inline VoxelGrid rasterize(const Dims3& dims, const Placement& p) {
  VoxelGrid g(dims);
  const auto [sd, sh, sw] = p.size;
  for (std::size_t i = 0; i < sd; ++i) {
    for (std::size_t j = 0; j < sh; ++j) {
      for (std::size_t k = 0; k < sw; ++k) {
        bool on = true;
        if (p.shape == ShapeKind::kSphere) {
          const double x = (static_cast<double>(i) + 0.5) / (0.5 * static_cast<double>(sd)) - 1.0;
          const double y = (static_cast<double>(j) + 0.5) / (0.5 * static_cast<double>(sh)) - 1.0;
          const double z = (static_cast<double>(k) + 0.5) / (0.5 * static_cast<double>(sw)) - 1.0;
          on = x * x + y * y + z * z <= 1.0;
        } else if (p.shape == ShapeKind::kLShape) {
          on = !(j >= (sh + 1) / 2 && k >= (sw + 1) / 2);
        }
        if (on) g.set(p.origin[0] + i, p.origin[1] + j, p.origin[2] + k);
      }
    }
  }
  return g;
}

// Token footprint rows/cols [lo, hi) of token index j along an axis.
inline std::pair<std::size_t, std::size_t> token_span(std::size_t j, std::size_t tokens, std::size_t voxels) {
  return {j * voxels / tokens, (j + 1) * voxels / tokens};
}

// Condition tokens and masks of a front orthographic view along D. A token is
// owned by the instance of the first occupied voxel met front to back (ties
// within a depth slice resolve in row-major footprint order).
inline std::pair<ConditionSet, InstanceMaskSet> render_condition(const Dims3& dims,
                                                                 const std::vector<VoxelGrid>& instances,
                                                                 std::size_t token_h, std::size_t token_w) {
  const std::size_t K = instances.size();
  std::vector<int> owner_of(dims.volume(), -1);
  std::vector<Payload> codes(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t dmin = dims.depth;
    std::size_t dmax = 0;
    double dsum = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < dims.volume(); ++v) {
      if (instances[k].cells[v] == 0) continue;
      owner_of[v] = static_cast<int>(k);
      const std::size_t d = v / (dims.height * dims.width);
      dmin = std::min(dmin, d);
      dmax = std::max(dmax, d);
      dsum += static_cast<double>(d) + 0.5;
      ++n;
    }
    if (n == 0) throw Error("config", "empty instance grid");
    const double depth_center = dsum / static_cast<double>(n) / static_cast<double>(dims.depth);
    const double half_extent = static_cast<double>(dmax - dmin + 1) / (2.0 * static_cast<double>(dims.depth));
    codes[k] = {1.0, std::cos(std::numbers::pi * depth_center), std::sin(std::numbers::pi * depth_center),
                half_extent};
  }

  const std::size_t M = token_h * token_w;
  std::vector<Payload> payloads(M, kBackgroundCode);
  std::vector<std::vector<std::uint8_t>> masks(K, std::vector<std::uint8_t>(M, 0));
  for (std::size_t th = 0; th < token_h; ++th) {
    const auto [h0, h1] = token_span(th, token_h, dims.height);
    for (std::size_t tw = 0; tw < token_w; ++tw) {
      const auto [w0, w1] = token_span(tw, token_w, dims.width);
      int owner = -1;
      for (std::size_t d = 0; d < dims.depth && owner < 0; ++d) {
        for (std::size_t h = h0; h < h1 && owner < 0; ++h) {
          for (std::size_t w = w0; w < w1 && owner < 0; ++w) owner = owner_of[dims.index(d, h, w)];
        }
      }
      if (owner >= 0) {
        const std::size_t m = th * token_w + tw;
        payloads[m] = codes[static_cast<std::size_t>(owner)];
        masks[static_cast<std::size_t>(owner)][m] = 1;
      }
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (std::find(masks[k].begin(), masks[k].end(), std::uint8_t{1}) == masks[k].end()) {
      throw Error("occluded", "instance " + std::to_string(k) + " owns no condition token");
    }
  }
  return {ConditionSet::on_grid(token_h, token_w, std::move(payloads)), InstanceMaskSet(M, std::move(masks))};
}

namespace detail {

// Cells within Chebyshev distance `radius` of any occupied cell.
inline VoxelGrid dilate(const VoxelGrid& g, std::size_t radius) {
  if (radius == 0) return g;
  const Dims3& dims = g.dims;
  VoxelGrid out(dims);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  for (std::size_t d = 0; d < dims.depth; ++d) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        if (!g.occupied(d, h, w)) continue;
        for (std::ptrdiff_t i = -r; i <= r; ++i) {
          for (std::ptrdiff_t j = -r; j <= r; ++j) {
            for (std::ptrdiff_t k = -r; k <= r; ++k) {
              const auto dd = static_cast<std::ptrdiff_t>(d) + i;
              const auto hh = static_cast<std::ptrdiff_t>(h) + j;
              const auto ww = static_cast<std::ptrdiff_t>(w) + k;
              if (dd < 0 || hh < 0 || ww < 0 || dd >= static_cast<std::ptrdiff_t>(dims.depth) ||
                  hh >= static_cast<std::ptrdiff_t>(dims.height) || ww >= static_cast<std::ptrdiff_t>(dims.width)) {
                continue;
              }
              out.set(static_cast<std::size_t>(dd), static_cast<std::size_t>(hh), static_cast<std::size_t>(ww));
            }
          }
        }
      }
    }
  }
  return out;
}

inline std::size_t axis_len(const Dims3& dims, int a) {
  return a == 0 ? dims.depth : a == 1 ? dims.height : dims.width;
}

// Places one instance against `anchor` at exactly `gap` empty cells along a
// random axis and side, overlapping the anchor's extent on the other axes.
inline bool place_adjacent(const Dims3& dims, const Placement& anchor, Placement& p, std::size_t gap, Rng& rng) {
  const int axis = static_cast<int>(rng.below(3));
  const bool after = rng.below(2) == 1;
  for (int a = 0; a < 3; ++a) {
    const auto n = static_cast<std::int64_t>(axis_len(dims, a));
    const auto s = static_cast<std::int64_t>(p.size[static_cast<std::size_t>(a)]);
    const auto ao = static_cast<std::int64_t>(anchor.origin[static_cast<std::size_t>(a)]);
    const auto as = static_cast<std::int64_t>(anchor.size[static_cast<std::size_t>(a)]);
    std::int64_t o = 0;
    if (a == axis) {
      o = after ? ao + as + static_cast<std::int64_t>(gap) : ao - static_cast<std::int64_t>(gap) - s;
    } else {
      const std::int64_t lo = std::max<std::int64_t>(0, ao - s + 1);
      const std::int64_t hi = std::min<std::int64_t>(n - s, ao + as - 1);
      if (lo > hi) return false;
      o = rng.between(lo, hi);
    }
    if (o < 0 || o + s > n) return false;
    p.origin[static_cast<std::size_t>(a)] = static_cast<std::size_t>(o);
  }
  return true;
}

}  // namespace detail

inline constexpr std::size_t kMaxPackingAttempts = 1000;

inline SceneRecord generate_scene(const SceneSpec& spec_in) {
  spec_in.validate();
  Rng rng(spec_in.seed);
  SceneSpec spec = spec_in;
  if (spec.instances == 0) spec.instances = static_cast<std::size_t>(rng.between(2, 4));
  if (spec.shapes.empty()) {
    for (std::size_t k = 0; k < spec.instances; ++k) spec.shapes.push_back(static_cast<ShapeKind>(rng.below(3)));
  }
  if (spec.shapes.size() != spec.instances) throw Error("config", "one shape kind per instance expected");
  const Dims3& dims = spec.dims;

  for (std::size_t attempt = 0; attempt < kMaxPackingAttempts; ++attempt) {
    SceneRecord rec;
    rec.spec = spec;
    rec.fused = VoxelGrid(dims);
    bool ok = true;
    for (std::size_t k = 0; k < spec.instances && ok; ++k) {
      Placement p;
      p.shape = spec.shapes[k];
      for (auto& s : p.size) {
        s = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(spec.size_min),
                                                 static_cast<std::int64_t>(spec.size_max)));
      }
      if (k == 0) {
        for (int a = 0; a < 3; ++a) {
          const auto n = static_cast<std::int64_t>(detail::axis_len(dims, a));
          p.origin[static_cast<std::size_t>(a)] =
              static_cast<std::size_t>(rng.between(0, n - static_cast<std::int64_t>(p.size[static_cast<std::size_t>(a)])));
        }
      } else {
        const auto& anchor = rec.placements[rng.below(rec.placements.size())];
        if (!detail::place_adjacent(dims, anchor, p, spec.gap, rng)) {
          ok = false;
          break;
        }
      }
      VoxelGrid g = rasterize(dims, p);
      const VoxelGrid forbidden = detail::dilate(rec.fused, spec.gap);
      for (std::size_t v = 0; v < g.cells.size() && ok; ++v) ok = !(g.cells[v] != 0 && forbidden.cells[v] != 0);
      if (!ok) break;
      for (std::size_t v = 0; v < g.cells.size(); ++v) rec.fused.cells[v] |= g.cells[v];
      rec.placements.push_back(p);
      rec.instances.push_back(std::move(g));
    }
    if (!ok) continue;
    try {
      auto [cond, masks] = render_condition(dims, rec.instances, spec.token_h, spec.token_w);
      rec.condition = std::move(cond);
      rec.masks = std::move(masks);
    } catch (const Error& e) {
      if (e.code() == "occluded") continue;
      throw;
    }
    for (const auto& g : rec.instances) rec.centroids.push_back(make_instance(dims, occupied_voxels(g)).centroid);
    return rec;
  }
  throw Error("packing-failed", "no valid placement after " + std::to_string(kMaxPackingAttempts) + " attempts");
}

inline nlohmann::json spec_to_json(const SceneSpec& s) {
  nlohmann::json j;
  j["dims"] = {s.dims.depth, s.dims.height, s.dims.width};
  j["instances"] = s.instances;
  std::vector<std::string> kinds;
  for (auto k : s.shapes) kinds.emplace_back(shape_name(k));
  j["shapes"] = kinds;
  j["size_min"] = s.size_min;
  j["size_max"] = s.size_max;
  j["gap"] = s.gap;
  j["token_h"] = s.token_h;
  j["token_w"] = s.token_w;
  j["seed"] = s.seed;
  return j;
}

inline SceneSpec spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  const auto d = j.at("dims").get<std::vector<std::size_t>>();
  if (d.size() != 3) throw Error("config", "dims must have three entries");
  s.dims = {d[0], d[1], d[2]};
  s.instances = j.at("instances").get<std::size_t>();
  for (const auto& k : j.at("shapes")) s.shapes.push_back(parse_shape(k.get<std::string>()));
  s.size_min = j.at("size_min").get<std::size_t>();
  s.size_max = j.at("size_max").get<std::size_t>();
  s.gap = j.at("gap").get<std::size_t>();
  s.token_h = j.at("token_h").get<std::size_t>();
  s.token_w = j.at("token_w").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

// Directory layout: scene.json, fused.{json,f64}, inst_<k>.{json,f64}.
inline void save_scene(const std::filesystem::path& dir, const SceneRecord& rec) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("io", "cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json j;
  j["spec"] = spec_to_json(rec.spec);
  nlohmann::json cents = nlohmann::json::array();
  for (const auto& c : rec.centroids) cents.push_back(c);
  j["centroids"] = cents;
  nlohmann::json masks = nlohmann::json::array();
  for (const auto& m : rec.masks.masks) {
    std::vector<std::size_t> idx;
    for (std::size_t t = 0; t < m.size(); ++t) {
      if (m[t] != 0) idx.push_back(t);
    }
    masks.push_back(idx);
  }
  j["masks"] = masks;
  io::write_json(dir / "scene.json", j);
  io::write_grid(dir / "fused", rec.fused);
  for (std::size_t k = 0; k < rec.instances.size(); ++k) {
    io::write_grid(dir / ("inst_" + std::to_string(k)), rec.instances[k]);
  }
}

// Condition tokens are re-rendered from the instance grids and checked
// against the stored mask indices.
inline SceneRecord load_scene(const std::filesystem::path& dir) {
  const auto j = io::read_json(dir / "scene.json");
  SceneRecord rec;
  try {
    rec.spec = spec_from_json(j.at("spec"));
    rec.fused = io::read_grid(dir / "fused");
    for (std::size_t k = 0; k < rec.spec.instances; ++k) {
      rec.instances.push_back(io::read_grid(dir / ("inst_" + std::to_string(k))));
      if (!(rec.instances.back().dims == rec.fused.dims)) throw Error("data", "instance grid shape mismatch");
    }
    for (const auto& c : j.at("centroids")) {
      const auto v = c.get<std::vector<double>>();
      if (v.size() != 3) throw Error("data", "centroid must have three coordinates");
      rec.centroids.push_back(Point3{v[0], v[1], v[2]});
    }
    auto [cond, masks] = render_condition(rec.fused.dims, rec.instances, rec.spec.token_h, rec.spec.token_w);
    const auto stored = j.at("masks").get<std::vector<std::vector<std::size_t>>>();
    if (stored.size() != masks.size()) throw Error("data", "mask count mismatch");
    for (std::size_t k = 0; k < stored.size(); ++k) {
      std::vector<std::size_t> idx;
      for (std::size_t t = 0; t < masks.masks[k].size(); ++t) {
        if (masks.masks[k][t] != 0) idx.push_back(t);
      }
      if (idx != stored[k]) throw Error("data", "stored mask " + std::to_string(k) + " disagrees with the grids");
    }
    rec.condition = std::move(cond);
    rec.masks = std::move(masks);
  } catch (const nlohmann::json::exception& e) {
    throw Error("data", (dir / "scene.json").string() + ": " + e.what());
  }
  if (rec.centroids.size() != rec.instances.size()) throw Error("data", "centroid count mismatch");
  return rec;
}

}  // namespace timi

#endif  // TIMI_SCENE_HARNESS_HPP
