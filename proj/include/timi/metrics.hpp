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

#ifndef TIMI_METRICS_HPP
#define TIMI_METRICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "timi/latent_field.hpp"

namespace timi {

using Point3 = std::array<double, 3>;

struct PointSet {
  std::vector<Point3> points;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
};

inline double distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// Static 3D k-d tree for nearest-neighbor distance queries.
class KdTree {
 public:
  explicit KdTree(std::span<const Point3> pts) : pts_(pts.begin(), pts.end()), order_(pts.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    axis_.assign(pts.size(), 0);
    build(0, order_.size());
  }

  // Euclidean distance from q to its nearest point. Tree must be non-empty.
  double nearest_distance(const Point3& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(0, order_.size(), q, best);
    return std::sqrt(best);
  }

 private:
  void build(std::size_t lo, std::size_t hi) {
    if (hi - lo <= 1) return;
    Point3 mn = pts_[order_[lo]];
    Point3 mx = mn;
    for (std::size_t i = lo; i < hi; ++i) {
      for (int a = 0; a < 3; ++a) {
        mn[a] = std::min(mn[a], pts_[order_[i]][a]);
        mx[a] = std::max(mx[a], pts_[order_[i]][a]);
      }
    }
    int axis = 0;
    for (int a = 1; a < 3; ++a) {
      if (mx[a] - mn[a] > mx[axis] - mn[axis]) axis = a;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::size_t x, std::size_t y) {
                       return pts_[x][axis] < pts_[y][axis] || (pts_[x][axis] == pts_[y][axis] && x < y);
                     });
    axis_[mid] = axis;
    build(lo, mid);
    build(mid + 1, hi);
  }

  void search(std::size_t lo, std::size_t hi, const Point3& q, double& best) const {
    if (lo >= hi) return;
    const std::size_t mid = lo + (hi - lo) / 2;
    const Point3& p = pts_[order_[mid]];
    const double dx = q[0] - p[0];
    const double dy = q[1] - p[1];
    const double dz = q[2] - p[2];
    best = std::min(best, dx * dx + dy * dy + dz * dz);
    if (hi - lo == 1) return;
    const int axis = axis_[mid];
    const double diff = q[axis] - p[axis];
    const bool left_first = diff < 0.0;
    if (left_first) {
      search(lo, mid, q, best);
      if (diff * diff <= best) search(mid + 1, hi, q, best);
    } else {
      search(mid + 1, hi, q, best);
      if (diff * diff <= best) search(lo, mid, q, best);
    }
  }

  std::vector<Point3> pts_;
  std::vector<std::size_t> order_;
  std::vector<int> axis_;
};

namespace detail {

inline void require_points(const PointSet& x, const PointSet& y) {
  if (x.empty() || y.empty()) throw Error("empty-pointset");
}

// Nearest distance from every point of `from` into `to`.
inline std::vector<double> nearest_distances(const PointSet& from, const PointSet& to) {
  const KdTree tree(to.points);
  std::vector<double> out(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) out[i] = tree.nearest_distance(from.points[i]);
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

// Symmetric Chamfer distance with Euclidean (not squared) nearest distances.
inline double chamfer(const PointSet& x, const PointSet& y) {
  detail::require_points(x, y);
  return detail::mean(detail::nearest_distances(x, y)) + detail::mean(detail::nearest_distances(y, x));
}

inline double fscore(const PointSet& x, const PointSet& y, double tau) {
  detail::require_points(x, y);
  if (!(tau > 0.0)) throw Error("config", "fscore threshold must be positive");
  auto fraction_within = [tau](const std::vector<double>& d) {
    std::size_t hit = 0;
    for (double v : d) hit += v < tau ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(d.size());
  };
  const double precision = fraction_within(detail::nearest_distances(x, y));
  const double recall = fraction_within(detail::nearest_distances(y, x));
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

inline double ssr(std::size_t n_pred, std::size_t n_gt) {
  if (n_gt == 0) throw Error("no-gt-instances");
  if (n_pred == 0) return 0.0;
  return static_cast<double>(std::min(n_pred, n_gt)) / static_cast<double>(std::max(n_pred, n_gt));
}

struct Instance {
  std::vector<std::size_t> voxels;  // ascending token indices
  Point3 centroid{};                // mean voxel center, voxel units
  std::size_t voxel_count = 0;
};

struct InstanceSet {
  Dims3 dims{};
  std::vector<Instance> instances;

  std::size_t size() const noexcept { return instances.size(); }
  bool empty() const noexcept { return instances.empty(); }
};

inline Point3 voxel_center(const Dims3& dims, std::size_t v) {
  const std::size_t w = v % dims.width;
  const std::size_t h = (v / dims.width) % dims.height;
  const std::size_t d = v / (dims.width * dims.height);
  return {static_cast<double>(d) + 0.5, static_cast<double>(h) + 0.5, static_cast<double>(w) + 0.5};
}

inline Instance make_instance(const Dims3& dims, std::vector<std::size_t> voxels) {
  std::sort(voxels.begin(), voxels.end());
  Instance inst;
  inst.voxel_count = voxels.size();
  Point3 sum{};
  for (std::size_t v : voxels) {
    const Point3 c = voxel_center(dims, v);
    for (int a = 0; a < 3; ++a) sum[a] += c[a];
  }
  for (int a = 0; a < 3; ++a) inst.centroid[a] = sum[a] / static_cast<double>(voxels.size());
  inst.voxels = std::move(voxels);
  return inst;
}

// 6-connected components of at least `min_component_size` voxels, ordered by
// size (descending) and then by their lowest voxel index.
inline InstanceSet extract_instances(const VoxelGrid& occ, std::size_t min_component_size = 4) {
  const Dims3& dims = occ.dims;
  InstanceSet out;
  out.dims = dims;
  std::vector<std::uint8_t> seen(occ.cells.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < occ.cells.size(); ++seed) {
    if (occ.cells[seed] == 0 || seen[seed] != 0) continue;
    std::vector<std::size_t> comp;
    stack.push_back(seed);
    seen[seed] = 1;
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      comp.push_back(v);
      const std::size_t w = v % dims.width;
      const std::size_t h = (v / dims.width) % dims.height;
      const std::size_t d = v / (dims.width * dims.height);
      auto visit = [&](std::size_t u) {
        if (occ.cells[u] != 0 && seen[u] == 0) {
          seen[u] = 1;
          stack.push_back(u);
        }
      };
      if (w > 0) visit(v - 1);
      if (w + 1 < dims.width) visit(v + 1);
      if (h > 0) visit(v - dims.width);
      if (h + 1 < dims.height) visit(v + dims.width);
      if (d > 0) visit(v - dims.width * dims.height);
      if (d + 1 < dims.depth) visit(v + dims.width * dims.height);
    }
    if (comp.size() >= min_component_size) out.instances.push_back(make_instance(dims, std::move(comp)));
  }
  std::stable_sort(out.instances.begin(), out.instances.end(), [](const Instance& a, const Instance& b) {
    if (a.voxel_count != b.voxel_count) return a.voxel_count > b.voxel_count;
    return a.voxels.front() < b.voxels.front();
  });
  return out;
}

inline PointSet centroids(const InstanceSet& set) {
  PointSet ps;
  for (const auto& inst : set.instances) ps.points.push_back(inst.centroid);
  return ps;
}

// Centroid Chamfer distance between instance sets.
inline double lcd(const PointSet& pred_centroids, const PointSet& gt_centroids) {
  if (pred_centroids.empty() || gt_centroids.empty()) throw Error("empty-instances");
  return chamfer(pred_centroids, gt_centroids);
}

// Minimum-cost assignment for an n x m cost matrix (row-major). Returns, for
// each row, its assigned column, or SIZE_MAX when n > m leaves it unassigned.
// Shortest augmenting paths with potentials, O(n^2 m); ties resolve toward the
// lowest column index.
inline std::vector<std::size_t> hungarian(std::span<const double> cost, std::size_t n, std::size_t m) {
  constexpr std::size_t kNone = SIZE_MAX;
  if (cost.size() != n * m) throw Error("shape", "cost matrix size mismatch");
  if (n > m) {
    std::vector<double> t(m * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) t[j * n + i] = cost[i * m + j];
    }
    const auto col_to_row = hungarian(t, m, n);
    std::vector<std::size_t> out(n, kNone);
    for (std::size_t j = 0; j < m; ++j) out[col_to_row[j]] = j;
    return out;
  }
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based internal arrays; p[j] = row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<std::uint8_t> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j] != 0) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j] != 0) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> out(n, kNone);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) out[p[j] - 1] = j - 1;
  }
  return out;
}

// Optimal centroid matching; returns min(N_pred, N_gt) (pred, gt) pairs in pred order.
inline std::vector<std::pair<std::size_t, std::size_t>> match_instances(const InstanceSet& pred,
                                                                        const InstanceSet& gt) {
  if (pred.empty() || gt.empty()) throw Error("empty-instances");
  const std::size_t n = pred.size();
  const std::size_t m = gt.size();
  std::vector<double> cost(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) cost[i * m + j] = distance(pred.instances[i].centroid, gt.instances[j].centroid);
  }
  const auto assign = hungarian(cost, n, m);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (assign[i] != SIZE_MAX) out.emplace_back(i, assign[i]);
  }
  return out;
}

// Maps voxel coordinates into the normalized scene frame: centered on the
// bounding box of the reference occupancy, longest box edge scaled to 1.
struct SceneFrame {
  Point3 center{};
  double scale = 1.0;

  static SceneFrame from_grid(const VoxelGrid& ref) {
    const Dims3& dims = ref.dims;
    Point3 lo{INFINITY, INFINITY, INFINITY};
    Point3 hi{-INFINITY, -INFINITY, -INFINITY};
    bool any = false;
    for (std::size_t v = 0; v < ref.cells.size(); ++v) {
      if (ref.cells[v] == 0) continue;
      any = true;
      const Point3 c = voxel_center(dims, v);
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], c[a] - 0.5);
        hi[a] = std::max(hi[a], c[a] + 0.5);
      }
    }
    SceneFrame f;
    if (!any) {
      lo = {0.0, 0.0, 0.0};
      hi = {static_cast<double>(dims.depth), static_cast<double>(dims.height), static_cast<double>(dims.width)};
    }
    double edge = 0.0;
    for (int a = 0; a < 3; ++a) {
      f.center[a] = 0.5 * (lo[a] + hi[a]);
      edge = std::max(edge, hi[a] - lo[a]);
    }
    f.scale = edge > 0.0 ? 1.0 / edge : 1.0;
    return f;
  }

  Point3 apply(const Point3& p) const {
    return {(p[0] - center[0]) * scale, (p[1] - center[1]) * scale, (p[2] - center[2]) * scale};
  }
};

// Voxel centers of `voxels` in the scene frame, reservoir-sampled (algorithm R)
// down to at most `cap` points with the given seed.
inline PointSet sample_points(const Dims3& dims, std::span<const std::size_t> voxels, const SceneFrame& frame,
                              std::size_t cap, std::uint64_t seed) {
  PointSet ps;
  if (cap == 0 || voxels.size() <= cap) {
    for (std::size_t v : voxels) ps.points.push_back(frame.apply(voxel_center(dims, v)));
    return ps;
  }
  Rng rng(seed);
  std::vector<std::size_t> chosen(voxels.begin(), voxels.begin() + static_cast<std::ptrdiff_t>(cap));
  for (std::size_t i = cap; i < voxels.size(); ++i) {
    const std::uint64_t j = rng.below(i + 1);
    if (j < cap) chosen[j] = voxels[i];
  }
  for (std::size_t v : chosen) ps.points.push_back(frame.apply(voxel_center(dims, v)));
  return ps;
}

inline std::vector<std::size_t> occupied_voxels(const VoxelGrid& g) {
  std::vector<std::size_t> out;
  for (std::size_t v = 0; v < g.cells.size(); ++v) {
    if (g.cells[v] != 0) out.push_back(v);
  }
  return out;
}

struct EvalConfig {
  std::size_t points_cap = 2048;
  double fscore_tau = 0.1;
  std::size_t min_component_size = 4;
  std::uint64_t seed = 0;
};

// One row of the results table. Empty optionals print as "undefined".
struct MetricRow {
  std::string scene_id;
  std::optional<double> lcd;
  std::optional<double> cd_s;
  std::optional<double> fs_s;
  double ssr = 0.0;
  std::optional<double> cd_o;
  std::optional<double> fs_o;
  double time_s = 0.0;
  std::size_t n_pred = 0;
  std::size_t n_gt = 0;
};

// Scores a predicted occupancy against the fused ground truth and its
// per-instance grids. Points live in the frame of the ground-truth scene.
inline MetricRow evaluate_scene(const VoxelGrid& pred, const VoxelGrid& gt_fused,
                                std::span<const VoxelGrid> gt_instances, const EvalConfig& cfg) {
  if (!(pred.dims == gt_fused.dims)) throw Error("shape", "prediction and ground truth differ in shape");
  const Dims3& dims = pred.dims;
  const SceneFrame frame = SceneFrame::from_grid(gt_fused);
  MetricRow row;

  InstanceSet gt;
  gt.dims = dims;
  for (const auto& g : gt_instances) gt.instances.push_back(make_instance(dims, occupied_voxels(g)));
  row.n_gt = gt.size();
  const InstanceSet found = extract_instances(pred, cfg.min_component_size);
  row.n_pred = found.size();
  row.ssr = ssr(found.size(), gt.size());

  const auto pred_vox = occupied_voxels(pred);
  if (pred_vox.empty()) return row;
  const auto gt_vox = occupied_voxels(gt_fused);
  // Both sides draw with the same seed, so identical occupancies give identical samples.
  const PointSet ps = sample_points(dims, pred_vox, frame, cfg.points_cap, cfg.seed);
  const PointSet pg = sample_points(dims, gt_vox, frame, cfg.points_cap, cfg.seed);
  row.cd_s = chamfer(ps, pg);
  row.fs_s = fscore(ps, pg, cfg.fscore_tau);
  if (found.empty()) return row;

  auto to_frame = [&frame](const InstanceSet& s) {
    PointSet c = centroids(s);
    for (auto& p : c.points) p = frame.apply(p);
    return c;
  };
  row.lcd = lcd(to_frame(found), to_frame(gt));

  const auto pairs = match_instances(found, gt);
  double cd_sum = 0.0;
  double fs_sum = 0.0;
  for (const auto& [i, j] : pairs) {
    const std::uint64_t tag = cfg.seed ^ (0x0B1EC7ULL + 131 * i + j);
    const PointSet a = sample_points(dims, found.instances[i].voxels, frame, cfg.points_cap, tag);
    const PointSet b = sample_points(dims, gt.instances[j].voxels, frame, cfg.points_cap, tag);
    cd_sum += chamfer(a, b);
    fs_sum += fscore(a, b, cfg.fscore_tau);
  }
  row.cd_o = cd_sum / static_cast<double>(pairs.size());
  row.fs_o = fs_sum / static_cast<double>(pairs.size());
  return row;
}

inline constexpr const char* kResultsHeader = "scene_id,LCD,CD_S,FS_S,SSR,CD_O,FS_O,time_s";

// Arithmetic mean over scenes, per column, over the scenes where it is defined.
inline MetricRow mean_row(std::span<const MetricRow> rows, std::string id = "mean") {
  MetricRow out;
  out.scene_id = std::move(id);
  auto avg = [&rows](auto field) -> std::optional<double> {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (const auto v = field(r)) {
        s += *v;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
  };
  out.lcd = avg([](const MetricRow& r) { return r.lcd; });
  out.cd_s = avg([](const MetricRow& r) { return r.cd_s; });
  out.fs_s = avg([](const MetricRow& r) { return r.fs_s; });
  out.ssr = avg([](const MetricRow& r) { return std::optional<double>(r.ssr); }).value_or(0.0);
  out.cd_o = avg([](const MetricRow& r) { return r.cd_o; });
  out.fs_o = avg([](const MetricRow& r) { return r.fs_o; });
  out.time_s = avg([](const MetricRow& r) { return std::optional<double>(r.time_s); }).value_or(0.0);
  return out;
}

inline std::string format_metric(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

inline std::string csv_line(const MetricRow& r) {
  return r.scene_id + "," + format_metric(r.lcd) + "," + format_metric(r.cd_s) + "," + format_metric(r.fs_s) +
         "," + format_metric(r.ssr) + "," + format_metric(r.cd_o) + "," + format_metric(r.fs_o) + "," +
         format_metric(r.time_s);
}

inline std::string results_csv(std::span<const MetricRow> rows, bool with_mean = true) {
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows) out += csv_line(r) + "\n";
  if (with_mean && !rows.empty()) out += csv_line(mean_row(rows)) + "\n";
  return out;
}

inline std::string ply_ascii(const PointSet& ps) {
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(ps.size()) +
                    "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  char buf[96];
  for (const auto& p : ps.points) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out += buf;
  }
  return out;
}

}  // namespace timi

#endif  // TIMI_METRICS_HPP
