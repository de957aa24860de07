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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "timi/metrics.hpp"

namespace {

using timi::Error;
using timi::Point3;
using timi::PointSet;
using timi::Rng;
using timi::VoxelGrid;

PointSet random_points(Rng& rng, std::size_t n) {
  PointSet ps;
  for (std::size_t i = 0; i < n; ++i) ps.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  return ps;
}

double brute_nn(const Point3& p, const PointSet& y) {
  double best = INFINITY;
  for (const auto& q : y.points) {
    best = std::min(best, std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                    (p[2] - q[2]) * (p[2] - q[2])));
  }
  return best;
}

double brute_chamfer(const PointSet& x, const PointSet& y) {
  double a = 0.0, b = 0.0;
  for (const auto& p : x.points) a += brute_nn(p, y);
  for (const auto& q : y.points) b += brute_nn(q, x);
  return a / static_cast<double>(x.size()) + b / static_cast<double>(y.size());
}

// Random rotation (via a normalized quaternion) followed by a translation.
PointSet rigid(const PointSet& ps, Rng& rng) {
  double q[4];
  double n = 0.0;
  for (double& x : q) {
    x = rng.normal();
    n += x * x;
  }
  for (double& x : q) x /= std::sqrt(n);
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double r[3][3] = {{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
                          {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
                          {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}};
  const Point3 t{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
  PointSet out;
  for (const auto& p : ps.points) {
    Point3 o{};
    for (int i = 0; i < 3; ++i) o[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
    out.points.push_back(o);
  }
  return out;
}

void fill_box(VoxelGrid& g, std::size_t d0, std::size_t h0, std::size_t w0, std::size_t n) {
  for (std::size_t d = d0; d < d0 + n; ++d) {
    for (std::size_t h = h0; h < h0 + n; ++h) {
      for (std::size_t w = w0; w < w0 + n; ++w) g.set(d, h, w);
    }
  }
}

// Union-find component sizes under face adjacency.
std::vector<std::size_t> union_find_sizes(const VoxelGrid& g) {
  const auto& dims = g.dims;
  std::vector<std::size_t> parent(g.cells.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t d = 0; d < dims.depth; ++d) {
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        if (!g.occupied(d, h, w)) continue;
        const std::size_t v = dims.index(d, h, w);
        if (d + 1 < dims.depth && g.occupied(d + 1, h, w)) parent[find(v)] = find(dims.index(d + 1, h, w));
        if (h + 1 < dims.height && g.occupied(d, h + 1, w)) parent[find(v)] = find(dims.index(d, h + 1, w));
        if (w + 1 < dims.width && g.occupied(d, h, w + 1)) parent[find(v)] = find(dims.index(d, h, w + 1));
      }
    }
  }
  std::vector<std::size_t> count(g.cells.size(), 0);
  for (std::size_t v = 0; v < g.cells.size(); ++v) {
    if (g.cells[v] != 0) ++count[find(v)];
  }
  std::vector<std::size_t> sizes;
  for (std::size_t c : count) {
    if (c > 0) sizes.push_back(c);
  }
  std::sort(sizes.rbegin(), sizes.rend());
  return sizes;
}

TEST(Chamfer, MatchesBruteForce) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto x = random_points(rng, 1 + rng.below(512));
    const auto y = random_points(rng, 1 + rng.below(512));
    EXPECT_NEAR(timi::chamfer(x, y), brute_chamfer(x, y), 1e-9);
  }
}

TEST(Chamfer, KdTreeNearestIsExact) {
  Rng rng(2);
  const auto pts = random_points(rng, 700);
  const timi::KdTree tree(pts.points);
  for (int i = 0; i < 500; ++i) {
    const Point3 q{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    EXPECT_NEAR(tree.nearest_distance(q), brute_nn(q, pts), 1e-12);
  }
}

TEST(Chamfer, HandCases) {
  Rng rng(3);
  const auto x = random_points(rng, 50);
  EXPECT_EQ(timi::chamfer(x, x), 0.0);
  EXPECT_DOUBLE_EQ(timi::chamfer(PointSet{{{0, 0, 0}}}, PointSet{{{0.75, 0, 0}}}), 1.5);
  EXPECT_THROW(timi::chamfer(PointSet{}, x), Error);
}

TEST(Chamfer, SymmetricAndRigidInvariant) {
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const auto x = random_points(rng, 60);
    const auto y = random_points(rng, 45);
    EXPECT_NEAR(timi::chamfer(x, y), timi::chamfer(y, x), 1e-12);
    Rng motion(100 + t);
    Rng motion_copy(100 + t);
    const auto rx = rigid(x, motion);
    const auto ry = rigid(y, motion_copy);
    EXPECT_NEAR(timi::chamfer(rx, ry), timi::chamfer(x, y), 1e-9);
    EXPECT_NEAR(timi::lcd(rx, ry), timi::lcd(x, y), 1e-9);
    EXPECT_NEAR(timi::fscore(rx, ry, 0.3), timi::fscore(x, y, 0.3), 1e-9);
  }
}

TEST(FScore, HandCases) {
  const PointSet x{{{0, 0, 0}, {1, 0, 0}}};
  EXPECT_EQ(timi::fscore(x, x, 0.01), 1.0);
  EXPECT_EQ(timi::fscore(x, PointSet{{{10, 0, 0}}}, 0.5), 0.0);
  // Half of X near Y, all of Y near X: P = 0.5, R = 1.
  EXPECT_NEAR(timi::fscore(x, PointSet{{{0.05, 0, 0}}}, 0.1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(timi::fscore(PointSet{{{0.05, 0, 0}}}, x, 0.1), 2.0 / 3.0, 1e-15);
  EXPECT_THROW(timi::fscore(x, PointSet{}, 0.1), Error);
}

TEST(Lcd, HandCases) {
  const PointSet a{{{0, 0, 0}, {1, 2, 3}}};
  EXPECT_EQ(timi::lcd(a, a), 0.0);
  EXPECT_DOUBLE_EQ(timi::lcd(PointSet{{{0, 0, 0}}}, PointSet{{{3, 4, 0}}}), 10.0);
  EXPECT_EQ(timi::lcd(PointSet{{{0, 0, 0}, {1, 0, 0}}}, PointSet{{{0, 0, 0}}}), 0.5);
  try {
    timi::lcd(PointSet{}, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "empty-instances");
  }
}

TEST(Ssr, Formula) {
  EXPECT_EQ(timi::ssr(3, 3), 1.0);
  EXPECT_EQ(timi::ssr(3, 4), 0.75);
  EXPECT_EQ(timi::ssr(4, 3), 0.75);
  EXPECT_EQ(timi::ssr(0, 2), 0.0);
  try {
    timi::ssr(2, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "no-gt-instances");
  }
  for (std::size_t a = 1; a < 8; ++a) {
    for (std::size_t b = 1; b < 8; ++b) {
      EXPECT_EQ(timi::ssr(a, b), timi::ssr(b, a));
      EXPECT_GE(timi::ssr(a, b), 0.0);
      EXPECT_LE(timi::ssr(a, b), 1.0);
    }
  }
}

TEST(Hungarian, MatchesExhaustiveSearch) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.below(6);
    const std::size_t m = 1 + rng.below(6);
    std::vector<double> cost(n * m);
    for (double& c : cost) c = rng.uniform(0, 5);
    const auto assign = timi::hungarian(cost, n, m);
    double got = 0.0;
    std::size_t pairs = 0;
    std::vector<bool> used(m, false);
    for (std::size_t i = 0; i < n; ++i) {
      if (assign[i] == SIZE_MAX) continue;
      ASSERT_LT(assign[i], m);
      ASSERT_FALSE(used[assign[i]]);
      used[assign[i]] = true;
      got += cost[i * m + assign[i]];
      ++pairs;
    }
    EXPECT_EQ(pairs, std::min(n, m));
    std::vector<std::size_t> perm(std::max(n, m));
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < std::min(n, m); ++i) s += n <= m ? cost[i * m + perm[i]] : cost[perm[i] * m + i];
      best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(got, best, 1e-12);
  }
}

TEST(Hungarian, CrossedNearestNeighboursUseTotalCost) {
  // Greedy would pair row 0 with column 0 (cost 1) and pay 10 for row 1.
  const std::vector<double> cost{1, 2, 2, 10};
  const auto a = timi::hungarian(cost, 2, 2);
  EXPECT_EQ(a[0], 1u);
  EXPECT_EQ(a[1], 0u);
}

TEST(ExtractInstances, ConnectivityCases) {
  VoxelGrid g({10, 10, 10});
  fill_box(g, 0, 0, 0, 2);
  fill_box(g, 0, 0, 3, 2);  // one empty voxel between
  EXPECT_EQ(timi::extract_instances(g).size(), 2u);
  VoxelGrid face({10, 10, 10});
  fill_box(face, 0, 0, 0, 2);
  fill_box(face, 0, 0, 2, 2);
  EXPECT_EQ(timi::extract_instances(face).size(), 1u);
  VoxelGrid edge({10, 10, 10});
  fill_box(edge, 0, 0, 0, 2);
  fill_box(edge, 0, 2, 2, 2);
  EXPECT_EQ(timi::extract_instances(edge).size(), 2u);
  VoxelGrid corner({10, 10, 10});
  fill_box(corner, 0, 0, 0, 2);
  fill_box(corner, 2, 2, 2, 2);
  EXPECT_EQ(timi::extract_instances(corner).size(), 2u);
}

TEST(ExtractInstances, SmallComponentsDropped) {
  VoxelGrid g({6, 6, 6});
  fill_box(g, 0, 0, 0, 2);
  g.set(5, 5, 5);
  g.set(5, 5, 4);
  g.set(5, 5, 3);
  const auto inst = timi::extract_instances(g, 4);
  ASSERT_EQ(inst.size(), 1u);
  EXPECT_EQ(inst.instances[0].voxel_count, 8u);
  EXPECT_EQ(timi::extract_instances(g, 3).size(), 2u);
  EXPECT_TRUE(timi::extract_instances(VoxelGrid({3, 3, 3})).empty());
}

TEST(ExtractInstances, MatchesUnionFindOnRandomGrids) {
  Rng rng(6);
  for (int t = 0; t < 30; ++t) {
    VoxelGrid g({7, 8, 9});
    const double density = rng.uniform(0.15, 0.45);
    for (auto& c : g.cells) c = rng.uniform() < density ? 1 : 0;
    const auto inst = timi::extract_instances(g, 1);
    std::vector<std::size_t> sizes;
    for (const auto& i : inst.instances) sizes.push_back(i.voxel_count);
    EXPECT_EQ(sizes, union_find_sizes(g));
    for (std::size_t i = 1; i < inst.size(); ++i) {
      const auto& a = inst.instances[i - 1];
      const auto& b = inst.instances[i];
      EXPECT_TRUE(a.voxel_count > b.voxel_count || (a.voxel_count == b.voxel_count && a.voxels[0] < b.voxels[0]));
    }
  }
}

TEST(ExtractInstances, CentroidIsMeanVoxelCenter) {
  VoxelGrid g({8, 8, 8});
  fill_box(g, 1, 2, 3, 3);
  const auto inst = timi::extract_instances(g);
  ASSERT_EQ(inst.size(), 1u);
  EXPECT_EQ(inst.instances[0].centroid, (Point3{2.5, 3.5, 4.5}));  // voxel centres sit at index + 0.5
}

TEST(MatchInstances, IdentityAndCardinality) {
  VoxelGrid g({12, 12, 12});
  fill_box(g, 0, 0, 0, 3);
  fill_box(g, 6, 6, 6, 2);
  fill_box(g, 0, 8, 8, 2);
  const auto a = timi::extract_instances(g);
  const auto pairs = timi::match_instances(a, a);
  ASSERT_EQ(pairs.size(), 3u);
  for (const auto& [i, j] : pairs) EXPECT_EQ(i, j);
  VoxelGrid two({12, 12, 12});
  fill_box(two, 0, 0, 0, 3);
  fill_box(two, 6, 6, 6, 2);
  EXPECT_EQ(timi::match_instances(a, timi::extract_instances(two)).size(), 2u);
  EXPECT_THROW(timi::match_instances(a, timi::InstanceSet{}), Error);
}

TEST(SamplePoints, ReservoirIsSeededSubset) {
  const timi::Dims3 dims{20, 20, 20};
  std::vector<std::size_t> vox(3000);
  std::iota(vox.begin(), vox.end(), 0);
  const timi::SceneFrame frame{};
  const auto a = timi::sample_points(dims, vox, frame, 2048, 7);
  const auto b = timi::sample_points(dims, vox, frame, 2048, 7);
  const auto c = timi::sample_points(dims, vox, frame, 2048, 8);
  EXPECT_EQ(a.size(), 2048u);
  EXPECT_EQ(a.points, b.points);
  EXPECT_NE(a.points, c.points);
  EXPECT_EQ(timi::sample_points(dims, std::span(vox).first(100), frame, 2048, 7).size(), 100u);
}

TEST(SceneFrame, LongestEdgeIsUnit) {
  VoxelGrid g({10, 10, 10});
  fill_box(g, 2, 2, 2, 4);
  g.set(9, 2, 2);
  const auto f = timi::SceneFrame::from_grid(g);
  EXPECT_DOUBLE_EQ(f.scale, 1.0 / 8.0);
  EXPECT_EQ(f.center, (Point3{6.0, 4.0, 4.0}));
}

TEST(EvaluateScene, PerfectPrediction) {
  VoxelGrid a({16, 16, 16}), b({16, 16, 16});
  fill_box(a, 1, 1, 1, 5);
  fill_box(b, 8, 8, 8, 6);
  VoxelGrid fused = a;
  for (std::size_t v = 0; v < fused.cells.size(); ++v) fused.cells[v] |= b.cells[v];
  const std::vector<VoxelGrid> inst{a, b};
  const auto row = timi::evaluate_scene(fused, fused, inst, timi::EvalConfig{});
  EXPECT_EQ(row.lcd, 0.0);
  EXPECT_EQ(row.cd_s, 0.0);
  EXPECT_EQ(row.fs_s, 1.0);
  EXPECT_EQ(row.ssr, 1.0);
  EXPECT_EQ(row.cd_o, 0.0);
  EXPECT_EQ(row.fs_o, 1.0);
  // Above the point cap both sides still draw the same sample.
  timi::EvalConfig small;
  small.points_cap = 50;
  const auto capped = timi::evaluate_scene(fused, fused, inst, small);
  EXPECT_EQ(capped.cd_s, 0.0);
  EXPECT_EQ(capped.cd_o, 0.0);
}

TEST(EvaluateScene, MissingInstanceHalvesSsr) {
  VoxelGrid a({16, 16, 16}), b({16, 16, 16});
  fill_box(a, 1, 1, 1, 5);
  fill_box(b, 8, 8, 8, 6);
  VoxelGrid fused = a;
  for (std::size_t v = 0; v < fused.cells.size(); ++v) fused.cells[v] |= b.cells[v];
  const auto row = timi::evaluate_scene(a, fused, std::vector<VoxelGrid>{a, b}, timi::EvalConfig{});
  EXPECT_EQ(row.ssr, 0.5);
  EXPECT_EQ(row.n_pred, 1u);
  EXPECT_EQ(row.cd_o, 0.0);  // the surviving instance matches exactly
}

TEST(EvaluateScene, DilatedPredictionAgainstScalarOracles) {
  VoxelGrid a({12, 12, 12}), b({12, 12, 12});
  fill_box(a, 2, 2, 2, 3);
  fill_box(b, 2, 2, 7, 3);
  VoxelGrid fused = a;
  for (std::size_t v = 0; v < fused.cells.size(); ++v) fused.cells[v] |= b.cells[v];
  VoxelGrid pred({12, 12, 12});
  fill_box(pred, 1, 1, 1, 5);
  fill_box(pred, 1, 1, 6, 5);  // the two dilated blocks touch, so they fuse
  const std::vector<VoxelGrid> inst{a, b};
  const auto row = timi::evaluate_scene(pred, fused, inst, timi::EvalConfig{});
  // Oracles recomputed from every voxel in the shared scene frame.
  const auto frame = timi::SceneFrame::from_grid(fused);
  auto pts = [&](const VoxelGrid& g) {
    PointSet ps;
    for (std::size_t v = 0; v < g.cells.size(); ++v) {
      if (g.cells[v] != 0) ps.points.push_back(frame.apply(timi::voxel_center(g.dims, v)));
    }
    return ps;
  };
  EXPECT_NEAR(*row.cd_s, brute_chamfer(pts(pred), pts(fused)), 1e-12);
  EXPECT_EQ(row.n_pred, 1u);
  EXPECT_EQ(row.ssr, 0.5);
  const Point3 pc = frame.apply({3.5, 3.5, 6.0});
  const PointSet gc{{frame.apply({3.5, 3.5, 3.5}), frame.apply({3.5, 3.5, 8.5})}};
  EXPECT_NEAR(*row.lcd, brute_chamfer(PointSet{{pc}}, gc), 1e-12);
}

TEST(EvaluateScene, EmptyPredictionIsUndefinedNotFatal) {
  VoxelGrid gt({8, 8, 8});
  fill_box(gt, 1, 1, 1, 3);
  const auto row = timi::evaluate_scene(VoxelGrid({8, 8, 8}), gt, std::vector<VoxelGrid>{gt}, timi::EvalConfig{});
  EXPECT_EQ(row.ssr, 0.0);
  EXPECT_FALSE(row.cd_s);
  EXPECT_FALSE(row.lcd);
  EXPECT_EQ(timi::csv_line(row), ",undefined,undefined,undefined,0,undefined,undefined,0");
}

TEST(ResultsCsv, HeaderAndMeanRow) {
  timi::MetricRow a, b;
  a.scene_id = "a";
  a.lcd = 1.0;
  a.ssr = 0.5;
  b.scene_id = "b";
  b.ssr = 1.0;
  const std::vector<timi::MetricRow> rows{a, b};
  EXPECT_EQ(timi::results_csv(rows),
            "scene_id,LCD,CD_S,FS_S,SSR,CD_O,FS_O,time_s\n"
            "a,1,undefined,undefined,0.5,undefined,undefined,0\n"
            "b,undefined,undefined,undefined,1,undefined,undefined,0\n"
            "mean,1,undefined,undefined,0.75,undefined,undefined,0\n");
}

TEST(Ply, AsciiLayout) {
  const auto ply = timi::ply_ascii(PointSet{{{0.1, -2, 3}}});
  EXPECT_EQ(ply,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\n"
            "end_header\n0.10000000000000001 -2 3\n");
}

}  // namespace
