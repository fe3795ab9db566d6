#pragma once

// Seeded synthetic voxel worlds, zone partitions, ground-truth observations and
// an oracle object detector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "swarmsynth/core.hpp"
#include "swarmsynth/radiance.hpp"

namespace swarmsynth::world {

using radiance::CameraIntrinsics;
using radiance::GridDims;

enum class Shape { kBox, kSphere };

/// Placed primitive. Boxes use half_extent per axis; spheres use half_extent.x as radius.
struct Primitive {
  Shape shape = Shape::kBox;
  int class_id = 1;
  Vec3 center;
  Vec3 half_extent;
  double density = 6.0;
  Rgb color{1.0, 1.0, 1.0};

  bool covers(Vec3 p) const {
    const Vec3 d = p - center;
    if (shape == Shape::kBox) {
      return std::abs(d.x) <= half_extent.x && std::abs(d.y) <= half_extent.y && std::abs(d.z) <= half_extent.z;
    }
    return dot(d, d) <= half_extent.x * half_extent.x;
  }
  Vec3 bound() const {
    return shape == Shape::kBox ? half_extent : Vec3{half_extent.x, half_extent.x, half_extent.x};
  }
};

struct SceneSpec {
  GridDims dims{32, 32, 32};
  int object_count = 6;
  int min_size = 3;  // voxels, full width
  int max_size = 7;
  double object_density = 6.0;
  double min_color = 0.15;
  bool objects_on_ground = true;
  int placement_attempts = 2000;
};

struct Scene {
  GridDims dims;
  std::vector<double> density;
  std::vector<Rgb> color;
  std::vector<int> class_id;
  std::vector<Primitive> objects;
  std::uint64_t seed = 0;

  static constexpr double kEmptyThreshold = 1e-6;

  radiance::ActivatedGrid as_grid() const {
    radiance::ActivatedGrid g(dims);
    g.sigma = density;
    g.color = color;
    return g;
  }
  friend bool operator==(const Scene& a, const Scene& b) {
    return a.dims == b.dims && a.density == b.density && a.color == b.color && a.class_id == b.class_id &&
           a.seed == b.seed;
  }
};

/// Empty voxels adjacent to occupied ones take the mean color of their occupied
/// 26-neighbours. Density stays zero there, so rendering of empty space is
/// unchanged, but trilinear color lookups near object surfaces are not darkened
/// by the black background voxels.
inline void pad_colors(Scene& s) {
  const GridDims& d = s.dims;
  std::vector<Rgb> padded = s.color;
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = d.index(x, y, z);
        if (s.class_id[i] != 0) continue;
        Rgb acc;
        int n = 0;
        for (int dz = -1; dz <= 1; ++dz) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int xx = x + dx, yy = y + dy, zz = z + dz;
              if (xx < 0 || yy < 0 || zz < 0 || xx >= d.nx || yy >= d.ny || zz >= d.nz) continue;
              const std::size_t j = d.index(xx, yy, zz);
              if (s.class_id[j] == 0) continue;
              acc = acc + s.color[j];
              ++n;
            }
          }
        }
        padded[i] = n > 0 ? acc * (1.0 / n) : Rgb{};
      }
    }
  }
  s.color = std::move(padded);
}

inline Vec3 voxel_center(int x, int y, int z) { return {x + 0.5, y + 0.5, z + 0.5}; }

/// Writes the primitives into an empty grid of the given size.
inline Scene rasterize(GridDims dims, std::vector<Primitive> objects, std::uint64_t seed = 0) {
  Scene s;
  s.dims = dims;
  s.seed = seed;
  s.density.assign(dims.count(), 0.0);
  s.color.assign(dims.count(), Rgb{});
  s.class_id.assign(dims.count(), 0);
  for (const Primitive& obj : objects) {
    const Vec3 b = obj.bound();
    const int x0 = std::max(0, static_cast<int>(std::floor(obj.center.x - b.x - 0.5)));
    const int x1 = std::min(dims.nx - 1, static_cast<int>(std::ceil(obj.center.x + b.x)));
    const int y0 = std::max(0, static_cast<int>(std::floor(obj.center.y - b.y - 0.5)));
    const int y1 = std::min(dims.ny - 1, static_cast<int>(std::ceil(obj.center.y + b.y)));
    const int z0 = std::max(0, static_cast<int>(std::floor(obj.center.z - b.z - 0.5)));
    const int z1 = std::min(dims.nz - 1, static_cast<int>(std::ceil(obj.center.z + b.z)));
    for (int z = z0; z <= z1; ++z) {
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (!obj.covers(voxel_center(x, y, z))) continue;
          const std::size_t i = dims.index(x, y, z);
          s.density[i] = obj.density;
          s.color[i] = obj.color;
          s.class_id[i] = obj.class_id;
        }
      }
    }
  }
  s.objects = std::move(objects);
  pad_colors(s);
  return s;
}

/// Places `object_count` non-overlapping boxes and spheres with class ids 1..n.
inline Scene build_scene(const SceneSpec& spec, std::uint64_t seed) {
  const GridDims& d = spec.dims;
  if (d.nx < 4 || d.ny < 4 || d.nz < 4) throw InvalidArgument("scene dims must be at least 4 per axis");
  if (spec.object_count < 0) throw InvalidArgument("object count must be non-negative");
  if (spec.min_size < 1 || spec.max_size < spec.min_size) throw InvalidArgument("invalid object size range");
  if (spec.max_size + 2 > std::min({d.nx, d.ny, d.nz})) throw InvalidArgument("objects cannot fit in the grid");
  if (spec.object_density < 0.0) throw InvalidArgument("object density must be non-negative");

  Rng rng(mix64(seed));
  std::vector<Primitive> placed;
  for (int k = 0; k < spec.object_count; ++k) {
    bool ok = false;
    for (int attempt = 0; attempt < spec.placement_attempts && !ok; ++attempt) {
      Primitive p;
      p.class_id = k + 1;
      p.shape = uniform01(rng) < 0.5 ? Shape::kBox : Shape::kSphere;
      const auto size = [&] {
        return static_cast<double>(spec.min_size) +
               static_cast<double>(uniform_index(rng, static_cast<std::uint64_t>(spec.max_size - spec.min_size + 1)));
      };
      if (p.shape == Shape::kBox) {
        p.half_extent = {0.5 * size(), 0.5 * size(), 0.5 * size()};
      } else {
        const double r = 0.5 * size();
        p.half_extent = {r, r, r};
      }
      const Vec3 b = p.bound();
      const auto place = [&](int extent, double half) {
        const double lo = half + 1.0;
        const double hi = extent - half - 1.0;
        return lo + uniform01(rng) * (hi - lo);
      };
      // Snap centers to the voxel lattice so rasterized extents are exact.
      p.center.x = std::round(place(d.nx, b.x) * 2.0) * 0.5;
      p.center.y = std::round(place(d.ny, b.y) * 2.0) * 0.5;
      p.center.z = spec.objects_on_ground ? b.z : std::round(place(d.nz, b.z) * 2.0) * 0.5;
      p.density = spec.object_density;
      for (int ch = 0; ch < 3; ++ch) p.color[static_cast<std::size_t>(ch)] = spec.min_color + (1.0 - spec.min_color) * uniform01(rng);
      ok = std::none_of(placed.begin(), placed.end(), [&](const Primitive& q) {
        const Vec3 qb = q.bound();
        return std::abs(p.center.x - q.center.x) < b.x + qb.x + 1.0 &&
               std::abs(p.center.y - q.center.y) < b.y + qb.y + 1.0 &&
               std::abs(p.center.z - q.center.z) < b.z + qb.z + 1.0;
      });
      if (ok) placed.push_back(p);
    }
    if (!ok) throw InvalidArgument("objects cannot fit: placement failed for object " + std::to_string(k + 1));
  }
  return rasterize(d, std::move(placed), seed);
}

/// Copy of the scene with everything outside the voxel box [lo, hi) removed.
inline Scene crop(const Scene& s, std::array<int, 3> lo, std::array<int, 3> hi) {
  Scene c = s;
  std::fill(c.color.begin(), c.color.end(), Rgb{});
  for (int z = 0; z < s.dims.nz; ++z) {
    for (int y = 0; y < s.dims.ny; ++y) {
      for (int x = 0; x < s.dims.nx; ++x) {
        const std::size_t i = s.dims.index(x, y, z);
        const bool inside = x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2];
        if (!inside) {
          c.density[i] = 0.0;
          c.class_id[i] = 0;
        } else {
          c.color[i] = s.class_id[i] != 0 ? s.color[i] : Rgb{};
        }
      }
    }
  }
  std::erase_if(c.objects, [&](const Primitive& p) {
    return !(p.center.x >= lo[0] && p.center.x < hi[0] && p.center.y >= lo[1] && p.center.y < hi[1] &&
             p.center.z >= lo[2] && p.center.z < hi[2]);
  });
  pad_colors(c);
  return c;
}

struct Zone {
  int id = 0;
  std::array<int, 3> lo{};  // inclusive voxel bounds
  std::array<int, 3> hi{};  // exclusive
  int owner = 0;

  bool contains_voxel(int x, int y, int z) const {
    return x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2];
  }
  bool contains(Vec3 p) const {
    return p.x >= lo[0] && p.x < hi[0] && p.y >= lo[1] && p.y < hi[1] && p.z >= lo[2] && p.z < hi[2];
  }
  std::size_t voxel_count() const {
    return static_cast<std::size_t>(hi[0] - lo[0]) * static_cast<std::size_t>(hi[1] - lo[1]) *
           static_cast<std::size_t>(hi[2] - lo[2]);
  }
  Vec3 center() const {
    return {0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])};
  }
  friend bool operator==(const Zone&, const Zone&) = default;
};

namespace detail {
inline void split_box(std::array<int, 3> lo, std::array<int, 3> hi, int n, std::vector<Zone>& out) {
  if (n == 1) {
    const int id = static_cast<int>(out.size());
    out.push_back({id, lo, hi, id});
    return;
  }
  int axis = 0;
  for (int a = 1; a < 3; ++a) {
    if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
  }
  const int len = hi[axis] - lo[axis];
  const int slabs = std::min(n, len);
  for (int k = 0; k < slabs; ++k) {
    std::array<int, 3> l = lo, h = hi;
    l[axis] = lo[axis] + static_cast<int>((static_cast<long long>(k) * len) / slabs);
    h[axis] = lo[axis] + static_cast<int>((static_cast<long long>(k + 1) * len) / slabs);
    const int share = n / slabs + (k < n % slabs ? 1 : 0);
    split_box(l, h, share, out);
  }
}
}  // namespace detail

/// Disjoint cover of the grid by axis-aligned slabs along the longest axis, one
/// per drone. When drones outnumber the slab axis, slabs are split recursively.
inline std::vector<Zone> zone_partition(const GridDims& dims, int n_drones) {
  if (n_drones <= 0) throw InvalidArgument("zone partition needs at least one drone");
  if (static_cast<std::size_t>(n_drones) > dims.count()) throw InvalidArgument("more drones than voxels");
  std::vector<Zone> zones;
  detail::split_box({0, 0, 0}, {dims.nx, dims.ny, dims.nz}, n_drones, zones);
  return zones;
}

inline std::vector<Zone> zone_partition(const Scene& scene, int n_drones) {
  return zone_partition(scene.dims, n_drones);
}

inline Image ground_truth_render(const Scene& scene, const Pose& pose, const CameraIntrinsics& cam,
                                 int samples_per_ray) {
  radiance::RenderConfig cfg;
  cfg.samples_per_ray = samples_per_ray;
  return radiance::render_image(scene.as_grid(), pose, cam, cfg);
}

struct Detection {
  int class_id = 0;
  Vec3 centroid;
  Vec3 extent;  // full widths
  double confidence = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

inline constexpr double kVisibilityThreshold = 0.5;

/// Exact transmittance along the segment a->b through nearest-voxel density,
/// ignoring voxels of class `skip_class`. Uses a voxel traversal so every
/// crossed cell contributes its exact chord length.
inline double segment_transmittance(const Scene& s, Vec3 a, Vec3 b, int skip_class) {
  const Vec3 d = b - a;
  const double len = norm(d);
  if (len == 0.0) return 1.0;
  // Clip to the grid box.
  double t0 = 0.0, t1 = 1.0;
  for (int ax = 0; ax < 3; ++ax) {
    const double o = a[static_cast<std::size_t>(ax)];
    const double v = d[static_cast<std::size_t>(ax)];
    const double n = s.dims.extent(ax);
    if (v == 0.0) {
      if (o < 0.0 || o > n) return 1.0;
      continue;
    }
    double ta = (0.0 - o) / v, tb = (n - o) / v;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 >= t1) return 1.0;
  // Collect voxel-face crossings in (t0, t1).
  std::vector<double> cuts{t0, t1};
  for (int ax = 0; ax < 3; ++ax) {
    const double o = a[static_cast<std::size_t>(ax)];
    const double v = d[static_cast<std::size_t>(ax)];
    if (v == 0.0) continue;
    const double p0 = o + v * t0, p1 = o + v * t1;
    const int lo = static_cast<int>(std::ceil(std::min(p0, p1)));
    const int hi = static_cast<int>(std::floor(std::max(p0, p1)));
    for (int k = lo; k <= hi; ++k) {
      const double t = (k - o) / v;
      if (t > t0 && t < t1) cuts.push_back(t);
    }
  }
  std::sort(cuts.begin(), cuts.end());
  double depth = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double ta = cuts[i], tb = cuts[i + 1];
    if (tb <= ta) continue;
    const Vec3 mid = a + d * (0.5 * (ta + tb));
    const int x = std::clamp(static_cast<int>(std::floor(mid.x)), 0, s.dims.nx - 1);
    const int y = std::clamp(static_cast<int>(std::floor(mid.y)), 0, s.dims.ny - 1);
    const int z = std::clamp(static_cast<int>(std::floor(mid.z)), 0, s.dims.nz - 1);
    const std::size_t vi = s.dims.index(x, y, z);
    if (s.class_id[vi] == skip_class) continue;
    depth += s.density[vi] * (tb - ta) * len;
  }
  return std::exp(-depth);
}

inline bool in_frustum(const Pose& pose, const CameraIntrinsics& cam, Vec3 p) {
  const Vec3 c = radiance::to_camera(pose, p);
  if (!(c.z > cam.near && c.z < cam.far)) return false;
  const double f = cam.focal();
  const double u = f * c.x / c.z + 0.5 * cam.width;
  const double v = f * c.y / c.z + 0.5 * cam.height;
  return u >= 0.0 && u < cam.width && v >= 0.0 && v < cam.height;
}

/// Oracle detector: every object whose centroid projects into the image and whose
/// line of sight from the camera (excluding the object itself) has transmittance
/// above kVisibilityThreshold. Confidence is that transmittance.
inline std::vector<Detection> oracle_detect(const Scene& scene, const Pose& pose, const CameraIntrinsics& cam) {
  radiance::validate_view(pose, cam);
  std::vector<Detection> out;
  for (const Primitive& obj : scene.objects) {
    if (!in_frustum(pose, cam, obj.center)) continue;
    const double t = segment_transmittance(scene, pose.position, obj.center, obj.class_id);
    if (t <= kVisibilityThreshold) continue;
    out.push_back({obj.class_id, obj.center, obj.bound() * 2.0, t});
  }
  return out;
}

}  // namespace swarmsynth::world
