#pragma once

// Dense voxel radiance fields, quadrature volume rendering and photometric
// training by analytic gradient descent.
//
// World coordinates are voxel units: voxel (i, j, k) covers [i, i+1) x [j, j+1)
// x [k, k+1) and its value lives at the center (i+0.5, j+0.5, k+0.5). Fields are
// sampled by trilinear interpolation of activated values between centers,
// clamped to the edge voxel in the outer half-voxel shell, and are zero outside
// the grid box.

#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "swarmsynth/core.hpp"

namespace swarmsynth::radiance {

struct GridDims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  }
  int extent(int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  bool contains(Vec3 p) const {
    return p.x >= 0.0 && p.y >= 0.0 && p.z >= 0.0 && p.x <= nx && p.y <= ny && p.z <= nz;
  }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

struct CameraIntrinsics {
  int width = 32;
  int height = 32;
  double fov = 1.0;  // horizontal, radians
  double near = 0.5;
  double far = 64.0;

  void validate() const {
    if (width <= 0 || height <= 0) throw InvalidArgument("camera resolution must be positive");
    if (!(near > 0.0 && near < far)) throw InvalidArgument("camera bounds must satisfy 0 < near < far");
    if (!(fov > 0.0 && fov < M_PI)) throw InvalidArgument("camera fov must lie in (0, pi)");
  }
  double focal() const { return 0.5 * width / std::tan(0.5 * fov); }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit length
  double t_near = 0.0;
  double t_far = 1.0;

  Vec3 at(double t) const { return origin + direction * t; }
  void validate() const {
    if (std::abs(norm(direction) - 1.0) > 1e-9) throw InvalidArgument("ray direction must be unit length");
    if (!(t_near < t_far)) throw InvalidArgument("ray bounds must satisfy t_near < t_far");
  }
};

/// Pinhole ray through the center of pixel (px, py).
inline Ray camera_ray(const Pose& pose, const CameraIntrinsics& cam, int px, int py) {
  const double f = cam.focal();
  const Vec3 d_cam{(px + 0.5 - 0.5 * cam.width) / f, (py + 0.5 - 0.5 * cam.height) / f, 1.0};
  return {pose.position, normalized(pose.orientation.rotate(d_cam)), cam.near, cam.far};
}

/// Camera-frame coordinates of a world point (z is depth along the view axis).
inline Vec3 to_camera(const Pose& pose, Vec3 world) {
  const Quaternion& q = pose.orientation;
  const Quaternion inv{q.w, -q.x, -q.y, -q.z};
  return inv.rotate(world - pose.position);
}

inline void validate_view(const Pose& pose, const CameraIntrinsics& cam) {
  pose.validate();
  cam.validate();
}

struct RenderConfig {
  int samples_per_ray = 64;
  bool stratified = false;
  Rgb background{0.0, 0.0, 0.0};
  std::uint64_t jitter_seed = 0;

  void validate() const {
    if (samples_per_ray < 2) throw InvalidArgument("samples_per_ray must be at least 2");
  }
};

struct FieldSample {
  double sigma = 0.0;
  Rgb color;
};

/// Anything that can be queried for activated density and color at a point.
template <class F>
concept Field = requires(const F& f, Vec3 p) {
  { f.sample(p) } -> std::same_as<FieldSample>;
};

struct CornerWeights {
  std::array<std::size_t, 8> index{};
  std::array<double, 8> weight{};
};

/// Trilinear stencil of a point; nullopt outside the grid box.
inline std::optional<CornerWeights> trilinear_corners(const GridDims& dims, Vec3 p) {
  if (!dims.contains(p)) return std::nullopt;
  std::array<int, 3> lo{};
  std::array<int, 3> hi{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    const int n = dims.extent(a);
    const double u = p[static_cast<std::size_t>(a)] - 0.5;
    int i0 = static_cast<int>(std::floor(u));
    double f = u - i0;
    if (i0 < 0) {
      i0 = 0;
      f = 0.0;
    } else if (i0 >= n - 1) {
      i0 = n - 1;
      f = 0.0;
    }
    lo[a] = i0;
    hi[a] = std::min(i0 + 1, n - 1);
    frac[a] = f;
  }
  CornerWeights cw;
  int c = 0;
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx, ++c) {
        const double wx = dx ? frac[0] : 1.0 - frac[0];
        const double wy = dy ? frac[1] : 1.0 - frac[1];
        const double wz = dz ? frac[2] : 1.0 - frac[2];
        cw.index[c] = dims.index(dx ? hi[0] : lo[0], dy ? hi[1] : lo[1], dz ? hi[2] : lo[2]);
        cw.weight[c] = wx * wy * wz;
      }
    }
  }
  return cw;
}

/// Grid that stores activated density and color directly (ground-truth scenes).
struct ActivatedGrid {
  GridDims dims;
  std::vector<double> sigma;  // per voxel, >= 0
  std::vector<Rgb> color;     // per voxel, in [0,1]

  ActivatedGrid() = default;
  explicit ActivatedGrid(GridDims d) : dims(d), sigma(d.count(), 0.0), color(d.count()) {}

  FieldSample sample(Vec3 p) const {
    const auto cw = trilinear_corners(dims, p);
    if (!cw) return {};
    FieldSample s;
    for (int c = 0; c < 8; ++c) {
      const double w = cw->weight[c];
      if (w == 0.0) continue;
      s.sigma += w * sigma[cw->index[c]];
      s.color = s.color + color[cw->index[c]] * w;
    }
    return s;
  }
};

/// Learnable radiance field: sigma = softplus(raw_density), color = logistic(color_logit).
struct VoxelField {
  GridDims dims;
  std::vector<double> raw_density;
  std::vector<double> color_logit;  // 3 per voxel, channel-interleaved

  static constexpr double kInitRawDensity = -3.0;
  static constexpr double kInitColorLogit = 0.0;

  VoxelField() = default;
  explicit VoxelField(GridDims d)
      : dims(d), raw_density(d.count(), kInitRawDensity), color_logit(d.count() * 3, kInitColorLogit) {
    if (d.nx <= 0 || d.ny <= 0 || d.nz <= 0) throw InvalidArgument("field dimensions must be positive");
  }

  std::size_t parameter_count() const { return raw_density.size() + color_logit.size(); }
  double sigma_at(std::size_t i) const { return softplus(raw_density[i]); }
  Rgb color_at(std::size_t i) const {
    return {sigmoid(color_logit[3 * i]), sigmoid(color_logit[3 * i + 1]), sigmoid(color_logit[3 * i + 2])};
  }

  FieldSample sample(Vec3 p) const {
    const auto cw = trilinear_corners(dims, p);
    if (!cw) return {};
    FieldSample s;
    for (int c = 0; c < 8; ++c) {
      const double w = cw->weight[c];
      if (w == 0.0) continue;
      s.sigma += w * sigma_at(cw->index[c]);
      s.color = s.color + color_at(cw->index[c]) * w;
    }
    return s;
  }

  friend bool operator==(const VoxelField&, const VoxelField&) = default;
};

/// Restricts a field to an axis-aligned box; zero density and color elsewhere.
template <Field F>
struct BoxMaskedField {
  const F* field;
  Vec3 lo;
  Vec3 hi;

  FieldSample sample(Vec3 p) const {
    if (p.x < lo.x || p.y < lo.y || p.z < lo.z || p.x > hi.x || p.y > hi.y || p.z > hi.z) return {};
    return field->sample(p);
  }
};

template <Field F>
FieldSample sample_field(const F& field, Vec3 point) {
  return field.sample(point);
}

struct RayResult {
  Rgb color;
  double final_transmittance = 1.0;
  std::vector<double> weights;
};

/// Quadrature compositing: T_i = exp(-sum_{j<i} sigma_j delta_j),
/// w_i = T_i (1 - exp(-sigma_i delta_i)), C = sum_i w_i c_i + T_final * background.
inline RayResult composite(std::span<const double> sigma, std::span<const Rgb> color,
                           std::span<const double> delta, Rgb background) {
  if (sigma.size() != color.size() || sigma.size() != delta.size()) {
    throw InvalidArgument("composite inputs must have equal lengths");
  }
  RayResult r;
  r.weights.resize(sigma.size());
  double optical_depth = 0.0;
  double transmittance = 1.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    const double tau = sigma[i] * delta[i];
    const double next = std::exp(-(optical_depth + tau));
    const double w = transmittance - next;
    r.weights[i] = w;
    r.color = r.color + color[i] * w;
    optical_depth += tau;
    transmittance = next;
  }
  r.final_transmittance = transmittance;
  r.color = r.color + background * transmittance;
  return r;
}

inline std::vector<double> sample_depths(const Ray& ray, const RenderConfig& cfg, Rng* jitter) {
  const int n = cfg.samples_per_ray;
  const double delta = (ray.t_far - ray.t_near) / n;
  std::vector<double> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double u = (cfg.stratified && jitter) ? uniform01(*jitter) : 0.5;
    t[static_cast<std::size_t>(i)] = ray.t_near + (i + u) * delta;
  }
  return t;
}

namespace detail {
inline Rng jitter_rng(const RenderConfig& cfg, const Ray& ray) {
  std::uint64_t h = cfg.jitter_seed;
  for (double v : {ray.origin.x, ray.origin.y, ray.origin.z, ray.direction.x, ray.direction.y, ray.direction.z}) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(v));
    h = mix64(h ^ bits);
  }
  return Rng(h);
}
}  // namespace detail

template <Field F>
RayResult render_ray(const F& field, const Ray& ray, const RenderConfig& cfg) {
  cfg.validate();
  const std::size_t n = static_cast<std::size_t>(cfg.samples_per_ray);
  Rng jitter = detail::jitter_rng(cfg, ray);
  const auto t = sample_depths(ray, cfg, &jitter);
  const double delta = (ray.t_far - ray.t_near) / static_cast<double>(n);
  std::vector<double> sigma(n);
  std::vector<Rgb> color(n);
  const std::vector<double> deltas(n, delta);
  for (std::size_t i = 0; i < n; ++i) {
    const FieldSample s = field.sample(ray.at(t[i]));
    sigma[i] = s.sigma;
    color[i] = s.color;
  }
  return composite(sigma, color, deltas, cfg.background);
}

template <Field F>
Image render_image(const F& field, const Pose& pose, const CameraIntrinsics& cam, const RenderConfig& cfg) {
  validate_view(pose, cam);
  cfg.validate();
  Image img(cam.width, cam.height);
  for (int py = 0; py < cam.height; ++py) {
    for (int px = 0; px < cam.width; ++px) {
      img.set(px, py, render_ray(field, camera_ray(pose, cam, px, py), cfg).color);
    }
  }
  return img;
}

/// 10 log10(1 / MSE) over all channels; +infinity for identical images.
inline double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw InvalidArgument("psnr needs images of equal dimensions");
  CompensatedSum acc;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc.add(d * d);
  }
  const double mse = acc.value() / static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

struct TrainingRay {
  Ray ray;
  Rgb target;
};

struct PhotometricGradient {
  double loss = 0.0;
  std::vector<double> d_raw_density;
  std::vector<double> d_color_logit;
};

/// Photometric loss sum_r |C_hat(r) - C(r)|^2 and its exact gradient with respect
/// to every field parameter.
inline PhotometricGradient photometric_gradient(const VoxelField& field, std::span<const TrainingRay> batch,
                                                const RenderConfig& cfg) {
  cfg.validate();
  PhotometricGradient g;
  g.d_raw_density.assign(field.raw_density.size(), 0.0);
  g.d_color_logit.assign(field.color_logit.size(), 0.0);
  const std::size_t n = static_cast<std::size_t>(cfg.samples_per_ray);

  std::vector<std::optional<CornerWeights>> stencils(n);
  std::vector<double> sigma(n);
  std::vector<Rgb> color(n);
  std::vector<double> trans(n + 1);
  CompensatedSum loss;

  for (const TrainingRay& tr : batch) {
    Rng jitter = detail::jitter_rng(cfg, tr.ray);
    const auto t = sample_depths(tr.ray, cfg, &jitter);
    const double delta = (tr.ray.t_far - tr.ray.t_near) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      stencils[i] = trilinear_corners(field.dims, tr.ray.at(t[i]));
      FieldSample s;
      if (stencils[i]) {
        for (int c = 0; c < 8; ++c) {
          const double w = stencils[i]->weight[c];
          if (w == 0.0) continue;
          s.sigma += w * field.sigma_at(stencils[i]->index[c]);
          s.color = s.color + field.color_at(stencils[i]->index[c]) * w;
        }
      }
      sigma[i] = s.sigma;
      color[i] = s.color;
    }
    // Forward pass, kept in the same form as composite().
    double optical_depth = 0.0;
    trans[0] = 1.0;
    Rgb c_hat;
    for (std::size_t i = 0; i < n; ++i) {
      optical_depth += sigma[i] * delta;
      trans[i + 1] = std::exp(-optical_depth);
      c_hat = c_hat + color[i] * (trans[i] - trans[i + 1]);
    }
    c_hat = c_hat + cfg.background * trans[n];
    const Rgb resid = c_hat - tr.target;
    loss.add(resid.r * resid.r + resid.g * resid.g + resid.b * resid.b);
    const Rgb dl_dc = resid * 2.0;

    // Backward: dC/dsigma_k = delta (T_{k+1} c_k - S_{k+1}), S_{k+1} = suffix radiance incl. background.
    Rgb suffix = cfg.background * trans[n];
    for (std::size_t k = n; k-- > 0;) {
      const double w = trans[k] - trans[k + 1];
      const Rgb dC_dsigma = (color[k] * trans[k + 1] - suffix) * delta;
      suffix = suffix + color[k] * w;
      if (!stencils[k]) continue;
      const double dl_dsigma = dl_dc.r * dC_dsigma.r + dl_dc.g * dC_dsigma.g + dl_dc.b * dC_dsigma.b;
      for (int c = 0; c < 8; ++c) {
        const double cw = stencils[k]->weight[c];
        if (cw == 0.0) continue;
        const std::size_t vi = stencils[k]->index[c];
        g.d_raw_density[vi] += dl_dsigma * cw * sigmoid(field.raw_density[vi]);
        for (int ch = 0; ch < 3; ++ch) {
          const double s = sigmoid(field.color_logit[3 * vi + static_cast<std::size_t>(ch)]);
          g.d_color_logit[3 * vi + static_cast<std::size_t>(ch)] += dl_dc[static_cast<std::size_t>(ch)] * w * cw * s * (1.0 - s);
        }
      }
    }
  }
  g.loss = loss.value();
  return g;
}

struct TrainStepResult {
  VoxelField field;
  double loss = 0.0;  // before the update
};

/// One plain gradient-descent step on the photometric loss.
inline TrainStepResult train_step(const VoxelField& field, std::span<const TrainingRay> batch, double lr,
                                  const RenderConfig& cfg) {
  if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (batch.empty()) throw InvalidArgument("training batch must be non-empty");
  const PhotometricGradient g = photometric_gradient(field, batch, cfg);
  if (!std::isfinite(g.loss)) throw NumericError("non-finite photometric loss");
  TrainStepResult r{field, g.loss};
  for (std::size_t i = 0; i < r.field.raw_density.size(); ++i) r.field.raw_density[i] -= lr * g.d_raw_density[i];
  for (std::size_t i = 0; i < r.field.color_logit.size(); ++i) r.field.color_logit[i] -= lr * g.d_color_logit[i];
  return r;
}

inline std::vector<TrainingRay> rays_from_image(const Image& img, const Pose& pose, const CameraIntrinsics& cam) {
  if (img.width != cam.width || img.height != cam.height) {
    throw InvalidArgument("image and camera resolution differ");
  }
  std::vector<TrainingRay> rays;
  rays.reserve(img.pixel_count());
  for (int py = 0; py < cam.height; ++py) {
    for (int px = 0; px < cam.width; ++px) rays.push_back({camera_ray(pose, cam, px, py), img.at(px, py)});
  }
  return rays;
}

// Checkpoint: "VF01", dims as 3 x u32, raw_density[count] f32, color_logit[3*count] f32; x-fastest.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::uint8_t> encode_checkpoint(const VoxelField& f) {
  ByteWriter w;
  for (char ch : std::string("VF01")) w.u8(static_cast<std::uint8_t>(ch));
  w.u32(static_cast<std::uint32_t>(f.dims.nx));
  w.u32(static_cast<std::uint32_t>(f.dims.ny));
  w.u32(static_cast<std::uint32_t>(f.dims.nz));
  for (double v : f.raw_density) w.f32(static_cast<float>(v));
  for (double v : f.color_logit) w.f32(static_cast<float>(v));
  return w.take();
}

inline std::size_t checkpoint_size(const GridDims& dims) { return 16 + dims.count() * 4 * 4; }

inline VoxelField decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader<CheckpointError> r(bytes);
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.u8()));
  if (magic != "VF01") throw CheckpointError("bad field checkpoint magic");
  GridDims d{static_cast<int>(r.u32()), static_cast<int>(r.u32()), static_cast<int>(r.u32())};
  VoxelField f(d);
  for (double& v : f.raw_density) v = r.f32();
  for (double& v : f.color_logit) v = r.f32();
  return f;
}

inline void save_checkpoint(const std::string& path, const VoxelField& f) {
  const auto bytes = encode_checkpoint(f);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace swarmsynth::radiance
