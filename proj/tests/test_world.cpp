#include <gtest/gtest.h>

#include <map>

#include "swarmsynth/world.hpp"

using namespace swarmsynth;
using namespace swarmsynth::world;

namespace {

bool inside_oracle(const Primitive& p, double cx, double cy, double cz) {
  const double dx = cx - p.center.x, dy = cy - p.center.y, dz = cz - p.center.z;
  if (p.shape == Shape::kSphere) return dx * dx + dy * dy + dz * dz <= p.half_extent.x * p.half_extent.x;
  return std::fabs(dx) <= p.half_extent.x && std::fabs(dy) <= p.half_extent.y && std::fabs(dz) <= p.half_extent.z;
}

double marched_transmittance(const Scene& s, Vec3 a, Vec3 b, int skip_class) {
  const int steps = 200000;
  const Vec3 d = b - a;
  const double ds = norm(d) / steps;
  double depth = 0.0;
  for (int i = 0; i < steps; ++i) {
    const Vec3 p = a + d * ((i + 0.5) / steps);
    const int x = static_cast<int>(std::floor(p.x)), y = static_cast<int>(std::floor(p.y)),
              z = static_cast<int>(std::floor(p.z));
    if (x < 0 || y < 0 || z < 0 || x >= s.dims.nx || y >= s.dims.ny || z >= s.dims.nz) continue;
    const std::size_t vi = s.dims.index(x, y, z);
    if (s.class_id[vi] == skip_class) continue;
    depth += s.density[vi] * ds;
  }
  return std::exp(-depth);
}

Scene box_scene(GridDims dims, std::vector<Primitive> objs) { return rasterize(dims, std::move(objs)); }

}  // namespace

TEST(BuildScene, EmptySpecIsEmpty) {
  SceneSpec spec;
  spec.object_count = 0;
  const Scene s = build_scene(spec, 123);
  for (std::size_t i = 0; i < s.density.size(); ++i) {
    EXPECT_EQ(s.density[i], 0.0);
    EXPECT_EQ(s.class_id[i], 0);
  }
}

TEST(BuildScene, DeterministicPerSeed) {
  SceneSpec spec;
  EXPECT_EQ(build_scene(spec, 5), build_scene(spec, 5));
  EXPECT_FALSE(build_scene(spec, 5) == build_scene(spec, 6));
}

TEST(BuildScene, ClassCountsMatchIndependentRasterization) {
  SceneSpec spec;
  spec.object_count = 3;
  const Scene s = build_scene(spec, 7);
  ASSERT_EQ(s.objects.size(), 3u);
  std::map<int, int> got, want;
  for (int id : s.class_id)
    if (id) ++got[id];
  for (int z = 0; z < s.dims.nz; ++z)
    for (int y = 0; y < s.dims.ny; ++y)
      for (int x = 0; x < s.dims.nx; ++x)
        for (const Primitive& p : s.objects)
          if (inside_oracle(p, x + 0.5, y + 0.5, z + 0.5)) ++want[p.class_id];
  EXPECT_EQ(got, want);
  std::set<int> ids;
  for (const auto& p : s.objects) ids.insert(p.class_id);
  EXPECT_EQ(ids.size(), 3u);
}

TEST(BuildScene, InvariantsHold) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Scene s = build_scene(SceneSpec{}, seed);
    for (std::size_t i = 0; i < s.density.size(); ++i) {
      EXPECT_GE(s.density[i], 0.0);
      EXPECT_EQ(s.class_id[i] == 0, s.density[i] < Scene::kEmptyThreshold);
      for (int ch = 0; ch < 3; ++ch) {
        EXPECT_GE(s.color[i][static_cast<std::size_t>(ch)], 0.0);
        EXPECT_LE(s.color[i][static_cast<std::size_t>(ch)], 1.0);
      }
    }
  }
}

TEST(BuildScene, RejectsBadSpecs) {
  SceneSpec spec;
  spec.dims = {3, 8, 8};
  EXPECT_THROW(build_scene(spec, 1), InvalidArgument);
  spec = SceneSpec{};
  spec.dims = {8, 8, 8};
  spec.object_count = 40;
  spec.max_size = 5;
  EXPECT_THROW(build_scene(spec, 1), InvalidArgument);
}

TEST(ZonePartition, SingleDroneCoversGrid) {
  const auto zones = zone_partition(GridDims{32, 32, 32}, 1);
  ASSERT_EQ(zones.size(), 1u);
  EXPECT_EQ(zones[0].lo, (std::array<int, 3>{0, 0, 0}));
  EXPECT_EQ(zones[0].hi, (std::array<int, 3>{32, 32, 32}));
}

TEST(ZonePartition, FourSlabs) {
  const auto zones = zone_partition(GridDims{32, 32, 32}, 4);
  ASSERT_EQ(zones.size(), 4u);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(zones[k].hi[0] - zones[k].lo[0], 8);
    EXPECT_EQ(zones[k].voxel_count(), 8u * 32u * 32u);
    EXPECT_EQ(zones[k].owner, k);
  }
}

TEST(ZonePartition, ExhaustiveMembership) {
  for (GridDims d : {GridDims{32, 32, 32}, GridDims{5, 7, 4}, GridDims{4, 4, 4}, GridDims{2, 9, 3}}) {
    for (int n : {1, 2, 3, 4, 5, 7, 9, 13, 33}) {
      if (static_cast<std::size_t>(n) > d.count()) continue;
      const auto zones = zone_partition(d, n);
      ASSERT_EQ(zones.size(), static_cast<std::size_t>(n));
      std::size_t covered = 0;
      for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
          for (int x = 0; x < d.nx; ++x) {
            int hits = 0;
            for (const Zone& zn : zones) hits += zn.contains_voxel(x, y, z);
            EXPECT_EQ(hits, 1);
            covered += hits;
          }
      EXPECT_EQ(covered, d.count());
      std::size_t total = 0;
      for (const Zone& zn : zones) {
        EXPECT_GT(zn.voxel_count(), 0u);
        total += zn.voxel_count();
      }
      EXPECT_EQ(total, d.count());
    }
  }
}

TEST(ZonePartition, RejectsZero) {
  EXPECT_THROW(zone_partition(GridDims{4, 4, 4}, 0), InvalidArgument);
  EXPECT_THROW(zone_partition(GridDims{2, 2, 2}, 9), InvalidArgument);
}

TEST(GroundTruthRender, EmptySceneIsBackground) {
  SceneSpec spec;
  spec.object_count = 0;
  const Scene s = build_scene(spec, 1);
  const Image img = ground_truth_render(s, Pose::look_at({16, 16, 60}, {16, 16, 0}, {0, 1, 0}), CameraIntrinsics{}, 32);
  for (double v : img.data) EXPECT_EQ(v, 0.0);
}

TEST(GroundTruthRender, Deterministic) {
  const Scene s = build_scene(SceneSpec{}, 3);
  const Pose pose = Pose::look_at({16, -20, 30}, {16, 16, 0});
  EXPECT_EQ(ground_truth_render(s, pose, CameraIntrinsics{}, 64), ground_truth_render(s, pose, CameraIntrinsics{}, 64));
}

TEST(GroundTruthRender, SingleOpaqueVoxelHandQuadrature) {
  Primitive p;
  p.center = {4.5, 4.5, 4.5};
  p.half_extent = {0.5, 0.5, 0.5};
  p.density = 20.0;
  p.color = {0.8, 0.3, 0.6};
  const Scene s = box_scene({9, 9, 9}, {p});
  ASSERT_EQ(std::count(s.class_id.begin(), s.class_id.end(), 1), 1);
  CameraIntrinsics cam;
  cam.width = cam.height = 33;
  cam.far = 20.0;
  const Image img = ground_truth_render(s, Pose::look_at({4.5, 4.5, 14.5}, {4.5, 4.5, 4.5}, {0, 1, 0}), cam, 512);
  // Along the axis through the voxel center the density is a tent of height sigma
  // and unit half-width, so the optical depth is sigma.
  const Rgb pix = img.at(16, 16);
  const double opacity = 1.0 - std::exp(-p.density);
  for (int ch = 0; ch < 3; ++ch) {
    EXPECT_NEAR(pix[static_cast<std::size_t>(ch)], p.color[static_cast<std::size_t>(ch)] * opacity, 1e-3);
    EXPECT_NEAR(pix[static_cast<std::size_t>(ch)], p.color[static_cast<std::size_t>(ch)], 1e-3);
  }
}

TEST(GroundTruthRender, MatchesLearnableFieldHoldingSceneValues) {
  const Scene s = build_scene(SceneSpec{}, 9);
  radiance::VoxelField f(s.dims);
  for (std::size_t i = 0; i < s.density.size(); ++i) {
    f.raw_density[i] = s.density[i] > 0 ? softplus_inverse(s.density[i]) : -800.0;
    for (int ch = 0; ch < 3; ++ch)
      f.color_logit[3 * i + static_cast<std::size_t>(ch)] = logit(std::clamp(s.color[i][static_cast<std::size_t>(ch)], 1e-12, 1 - 1e-12));
  }
  const Pose pose = Pose::look_at({16, 16, 50}, {16, 16, 0}, {0, 1, 0});
  radiance::RenderConfig cfg;
  cfg.samples_per_ray = 64;
  const Image a = ground_truth_render(s, pose, CameraIntrinsics{}, 64);
  const Image b = radiance::render_image(f, pose, CameraIntrinsics{}, cfg);
  for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-9);
  EXPECT_EQ(a, radiance::render_image(s.as_grid(), pose, CameraIntrinsics{}, cfg));
}

TEST(OracleDetect, EmptySceneNoDetections) {
  SceneSpec spec;
  spec.object_count = 0;
  EXPECT_TRUE(oracle_detect(build_scene(spec, 1), Pose::look_at({16, 16, 50}, {16, 16, 0}, {0, 1, 0}), CameraIntrinsics{}).empty());
}

TEST(OracleDetect, UnoccludedObjectDetected) {
  Primitive p;
  p.center = {8.5, 8.5, 3.5};
  p.half_extent = {1.5, 1.5, 1.5};
  const Scene s = box_scene({16, 16, 16}, {p});
  const auto dets = oracle_detect(s, Pose::look_at({8.5, 8.5, 30}, p.center, {0, 1, 0}), CameraIntrinsics{});
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].class_id, 1);
  EXPECT_GT(dets[0].confidence, 0.9);
  EXPECT_GT(dets[0].extent.x, 0.0);
}

TEST(OracleDetect, FrontObjectOccludesBack) {
  Primitive back, front;
  back.class_id = 1;
  back.center = {8.5, 8.5, 3.5};
  back.half_extent = {1.5, 1.5, 1.5};
  front.class_id = 2;
  front.center = {8.5, 8.5, 10.5};
  front.half_extent = {2.5, 2.5, 1.5};
  const Scene s = box_scene({16, 16, 16}, {back, front});
  const Pose pose = Pose::look_at({8.5, 8.5, 40}, back.center, {0, 1, 0});
  const auto dets = oracle_detect(s, pose, CameraIntrinsics{});
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].class_id, 2);
  for (const Primitive& obj : s.objects) {
    const double exact = segment_transmittance(s, pose.position, obj.center, obj.class_id);
    EXPECT_NEAR(exact, marched_transmittance(s, pose.position, obj.center, obj.class_id), 1e-3);
  }
}

TEST(OracleDetect, OutsideFrustumIgnored) {
  Primitive p;
  p.center = {8.5, 8.5, 3.5};
  p.half_extent = {1.5, 1.5, 1.5};
  const Scene s = box_scene({16, 16, 16}, {p});
  EXPECT_TRUE(oracle_detect(s, Pose::look_at({8.5, 8.5, 30}, {8.5, 8.5, 60}, {0, 1, 0}), CameraIntrinsics{}).empty());
}

TEST(OracleDetect, ConfidenceMonotoneInOcclusion) {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    Scene s = build_scene(SceneSpec{}, static_cast<std::uint64_t>(trial));
    const Pose pose = Pose::look_at({16, -10, 40}, {16, 16, 2});
    const auto before = oracle_detect(s, pose, CameraIntrinsics{});
    // Add haze voxels of an unrelated class.
    for (int k = 0; k < 200; ++k) {
      const std::size_t i = uniform_index(rng, s.density.size());
      if (s.class_id[i] != 0) continue;
      s.density[i] = 0.3;
      s.class_id[i] = 99;
    }
    const auto after = oracle_detect(s, pose, CameraIntrinsics{});
    for (const Detection& a : after) {
      const auto it = std::find_if(before.begin(), before.end(), [&](const Detection& b) { return b.class_id == a.class_id; });
      ASSERT_NE(it, before.end());
      EXPECT_LE(a.confidence, it->confidence);
    }
  }
}

TEST(Crop, KeepsOnlyBox) {
  const Scene s = build_scene(SceneSpec{}, 4);
  const Scene c = crop(s, {0, 0, 0}, {8, 32, 32});
  for (int z = 0; z < 32; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const std::size_t i = s.dims.index(x, y, z);
        if (x >= 8) EXPECT_EQ(c.density[i], 0.0);
        else EXPECT_EQ(c.density[i], s.density[i]);
      }
}
