#pragma once

// Per-drone cooperation: mode selection, the session phase machine, zone-clipped
// field updates, the SSIM discrepancy proxy, the "GP" guidance wire format and the
// refinement dialogue.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "swarmsynth/core.hpp"
#include "swarmsynth/federation.hpp"
#include "swarmsynth/generator.hpp"
#include "swarmsynth/netsim.hpp"
#include "swarmsynth/radiance.hpp"
#include "swarmsynth/semantics.hpp"
#include "swarmsynth/world.hpp"

namespace swarmsynth::protocol {

using netsim::PayloadKind;
using radiance::CameraIntrinsics;
using radiance::VoxelField;

// ---------------------------------------------------------------------------
// Modes

// Declaration order is the expected byte order.
enum class CooperationMode { kDetectionsOnly, kSemantic, kLatent, kRaw };

inline constexpr std::array<CooperationMode, 4> kAllModes{CooperationMode::kDetectionsOnly, CooperationMode::kSemantic,
                                                          CooperationMode::kLatent, CooperationMode::kRaw};

inline std::string_view mode_name(CooperationMode m) {
  switch (m) {
    case CooperationMode::kDetectionsOnly: return "DETECTIONS_ONLY";
    case CooperationMode::kSemantic: return "SEMANTIC";
    case CooperationMode::kLatent: return "LATENT";
    case CooperationMode::kRaw: return "RAW";
  }
  return "?";
}

inline std::optional<CooperationMode> parse_mode(std::string_view s) {
  std::string l;
  for (char c : s) l.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (l == "detections" || l == "detections_only") return CooperationMode::kDetectionsOnly;
  if (l == "semantic") return CooperationMode::kSemantic;
  if (l == "latent") return CooperationMode::kLatent;
  if (l == "raw") return CooperationMode::kRaw;
  return std::nullopt;
}

enum class TaskPriority { kFidelity, kSafety };

struct LinkStats {
  double bandwidth = 0.0;  // bytes / second
  double reliability = 1.0;
};

struct ModeThresholds {
  double high_bandwidth = 5e6;
  double low_bandwidth = 1e5;
  double min_reliability = 0.5;

  void validate() const {
    if (!(low_bandwidth >= 0.0 && low_bandwidth <= high_bandwidth)) {
      throw InvalidArgument("mode thresholds need 0 <= low_bandwidth <= high_bandwidth");
    }
    if (!(min_reliability >= 0.0 && min_reliability <= 1.0)) throw InvalidArgument("min_reliability must lie in [0,1]");
  }
};

/// Adaptation-layer decision table. An unreliable or thin channel wins over
/// everything else, so a trusted high-bandwidth link with reliability below the
/// floor still falls back to detections.
inline CooperationMode select_mode(const LinkStats& link, bool trusted, TaskPriority priority,
                                   const ModeThresholds& th = {}) {
  th.validate();
  if (link.bandwidth < th.low_bandwidth || link.reliability < th.min_reliability) {
    return CooperationMode::kDetectionsOnly;
  }
  if (link.bandwidth >= th.high_bandwidth && trusted) {
    return priority == TaskPriority::kFidelity ? CooperationMode::kLatent : CooperationMode::kRaw;
  }
  return CooperationMode::kSemantic;
}

// ---------------------------------------------------------------------------
// Session phase machine

enum class Phase { kRequest, kResponses, kHallucinate, kUpdate, kValidate, kRefine, kDone, kFailed };

inline std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::kRequest: return "REQUEST";
    case Phase::kResponses: return "RESPONSES";
    case Phase::kHallucinate: return "HALLUCINATE";
    case Phase::kUpdate: return "UPDATE";
    case Phase::kValidate: return "VALIDATE";
    case Phase::kRefine: return "REFINE";
    case Phase::kDone: return "DONE";
    case Phase::kFailed: return "FAILED";
  }
  return "?";
}

inline bool terminal(Phase p) { return p == Phase::kDone || p == Phase::kFailed; }

/// Edges of the phase graph. The counters that bound REFINE live in the session.
inline bool legal_transition(Phase from, Phase to) {
  if (terminal(from)) return false;
  if (to == Phase::kFailed) return true;
  switch (from) {
    case Phase::kRequest: return to == Phase::kResponses;
    case Phase::kResponses: return to == Phase::kHallucinate;
    case Phase::kHallucinate: return to == Phase::kUpdate;
    case Phase::kUpdate: return to == Phase::kValidate;
    case Phase::kValidate: return to == Phase::kDone || to == Phase::kRefine;
    case Phase::kRefine: return to == Phase::kRefine || to == Phase::kUpdate;
    default: return false;
  }
}

struct CooperationSession {
  int target = 0;
  std::vector<int> requested_zones;
  std::vector<int> responders;
  CooperationMode mode = CooperationMode::kSemantic;
  Phase phase = Phase::kRequest;
  int round = 0;  // refinement iterations so far
  int max_rounds = 4;
  bool refined = false;
  std::vector<Phase> history{Phase::kRequest};
  std::vector<netsim::DeliveryReport> reports;
  std::string failure;
  std::uint64_t next_sequence = 0;
  double clock = 0.0;

  void advance(Phase next) {
    if (!legal_transition(phase, next)) {
      throw InvalidArgument("illegal phase transition " + std::string(phase_name(phase)) + " -> " +
                            std::string(phase_name(next)));
    }
    if (next == Phase::kRefine) {
      if (phase == Phase::kValidate && refined) throw InvalidArgument("refinement already ran in this session");
      if (round >= max_rounds) throw InvalidArgument("refinement round budget exhausted");
      if (phase == Phase::kValidate) refined = true;
      ++round;
    }
    phase = next;
    history.push_back(next);
  }

  void fail(std::string why) {
    failure = std::move(why);
    advance(Phase::kFailed);
  }

  /// Sends at the session clock and logs the report, delivered or not.
  netsim::DeliveryReport send(const netsim::Topology& topo, int src, int dst, PayloadKind kind, std::uint64_t bytes) {
    netsim::DeliveryReport r = netsim::transmit(topo, {src, dst, kind, bytes, next_sequence++}, clock);
    reports.push_back(r);
    return r;
  }

  /// Advances the logical clock to the latest arrival seen so far.
  void settle() {
    for (const auto& r : reports) {
      if (r.delivered) clock = std::max(clock, r.arrival_time);
    }
  }

  netsim::BandwidthLedger ledger() const { return netsim::bandwidth_ledger(reports); }
};

// ---------------------------------------------------------------------------
// Zone-clipped rays and rendering

struct Box {
  Vec3 lo;
  Vec3 hi;

  static Box of(const world::Zone& z) {
    return {{static_cast<double>(z.lo[0]), static_cast<double>(z.lo[1]), static_cast<double>(z.lo[2])},
            {static_cast<double>(z.hi[0]), static_cast<double>(z.hi[1]), static_cast<double>(z.hi[2])}};
  }
  bool contains(Vec3 p) const {
    return p.x >= lo.x && p.y >= lo.y && p.z >= lo.z && p.x <= hi.x && p.y <= hi.y && p.z <= hi.z;
  }
};

/// Ray restricted to its overlap with the box (slab test); nullopt if it misses.
inline std::optional<radiance::Ray> clip_ray(const radiance::Ray& ray, const Box& box) {
  double t0 = ray.t_near, t1 = ray.t_far;
  for (std::size_t a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.direction[a];
    const double lo = box.lo[a], hi = box.hi[a];
    if (d == 0.0) {
      if (o < lo || o > hi) return std::nullopt;
      continue;
    }
    double ta = (lo - o) / d, tb = (hi - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t0 < t1)) return std::nullopt;
  radiance::Ray r = ray;
  r.t_near = t0;
  r.t_far = t1;
  return r;
}

/// Camera with the same optics at a different resolution.
inline CameraIntrinsics rescaled(const CameraIntrinsics& cam, int width, int height) {
  CameraIntrinsics c = cam;
  c.width = width;
  c.height = height;
  return c;
}

struct View {
  Pose pose;
  Image image;
};

/// Training rays of a view restricted to the box; pixels whose ray misses it are dropped.
inline std::vector<radiance::TrainingRay> clipped_rays(const View& v, const CameraIntrinsics& optics, const Box& box) {
  const CameraIntrinsics cam = rescaled(optics, v.image.width, v.image.height);
  std::vector<radiance::TrainingRay> out;
  for (int py = 0; py < cam.height; ++py) {
    for (int px = 0; px < cam.width; ++px) {
      if (auto r = clip_ray(radiance::camera_ray(v.pose, cam, px, py), box)) out.push_back({*r, v.image.at(px, py)});
    }
  }
  return out;
}

/// Renders only what lies inside the box, with `samples` quadrature points per
/// clipped segment. Pixels missing the box keep the background (black).
template <radiance::Field F>
Image render_clipped(const F& field, const Pose& pose, const CameraIntrinsics& cam, const Box& box, int samples) {
  radiance::validate_view(pose, cam);
  radiance::RenderConfig cfg;
  cfg.samples_per_ray = samples;
  Image img(cam.width, cam.height);
  for (int py = 0; py < cam.height; ++py) {
    for (int px = 0; px < cam.width; ++px) {
      if (auto r = clip_ray(radiance::camera_ray(pose, cam, px, py), box)) {
        img.set(px, py, radiance::render_ray(field, *r, cfg).color);
      }
    }
  }
  return img;
}

struct FieldTraining {
  int iterations = 60;
  double lr = 32.0;  // the loss sums over rays
  int samples = 32;

  void validate() const {
    if (iterations < 0) throw InvalidArgument("field iterations must be non-negative");
    if (!(lr > 0.0)) throw InvalidArgument("field learning rate must be positive");
    if (samples < 2) throw InvalidArgument("field samples must be at least 2");
  }
};

/// Full-batch photometric descent; returns the loss before the last step (0 when idle).
inline double train_field(VoxelField& field, std::span<const radiance::TrainingRay> rays, const FieldTraining& cfg) {
  cfg.validate();
  if (rays.empty() || cfg.iterations == 0) return 0.0;
  radiance::RenderConfig rc;
  rc.samples_per_ray = cfg.samples;
  double loss = 0.0;
  for (int i = 0; i < cfg.iterations; ++i) {
    radiance::TrainStepResult r = radiance::train_step(field, rays, cfg.lr, rc);
    field = std::move(r.field);
    loss = r.loss;
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Structural-similarity discrepancy

inline constexpr int kSsimWindow = 8;
inline constexpr int kSsimStride = 4;
inline constexpr double kSsimC1 = 1e-4;
inline constexpr double kSsimC2 = 9e-4;

/// Window origins along one axis: stride 4, plus a final window flush with the edge.
inline std::vector<int> window_origins(int extent) {
  std::vector<int> o;
  if (extent <= kSsimWindow) return {0};
  for (int p = 0; p + kSsimWindow <= extent; p += kSsimStride) o.push_back(p);
  if (o.back() + kSsimWindow < extent) o.push_back(extent - kSsimWindow);
  return o;
}

struct DiscrepancyMap {
  double delta = 0.0;
  std::vector<std::uint8_t> mask;         // per pixel
  std::vector<double> window_dissimilarity;  // 1 - SSIM, row-major over windows
  std::vector<int> origins_x, origins_y;
};

/// Channel-averaged SSIM of one window.
inline double window_ssim(const Image& a, const Image& b, int x0, int y0, int w, int h) {
  double acc = 0.0;
  const double n = static_cast<double>(w * h);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double ma = 0.0, mb = 0.0;
    for (int y = y0; y < y0 + h; ++y) {
      for (int x = x0; x < x0 + w; ++x) {
        ma += a.data[a.index(x, y) + ch];
        mb += b.data[b.index(x, y) + ch];
      }
    }
    ma /= n;
    mb /= n;
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (int y = y0; y < y0 + h; ++y) {
      for (int x = x0; x < x0 + w; ++x) {
        const double da = a.data[a.index(x, y) + ch] - ma, db = b.data[b.index(x, y) + ch] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
      }
    }
    va /= n;
    vb /= n;
    cov /= n;
    acc += ((2.0 * ma * mb + kSsimC1) * (2.0 * cov + kSsimC2)) / ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
  }
  return acc / 3.0;
}

/// delta = 1 - mean window SSIM; the mask covers every window whose 1 - SSIM exceeds tau.
inline DiscrepancyMap discrepancy_map(const Image& rendered, const Image& local, double tau) {
  if (!rendered.same_shape(local)) throw InvalidArgument("discrepancy needs images of equal dimensions");
  DiscrepancyMap m;
  m.origins_x = window_origins(rendered.width);
  m.origins_y = window_origins(rendered.height);
  m.mask.assign(rendered.pixel_count(), 0);
  const int w = std::min(kSsimWindow, rendered.width), h = std::min(kSsimWindow, rendered.height);
  CompensatedSum total;
  for (int oy : m.origins_y) {
    for (int ox : m.origins_x) {
      const double d = 1.0 - window_ssim(rendered, local, ox, oy, w, h);
      m.window_dissimilarity.push_back(d);
      total.add(d);
      if (d <= tau) continue;
      for (int y = oy; y < oy + h; ++y) {
        for (int x = ox; x < ox + w; ++x) m.mask[static_cast<std::size_t>(y) * rendered.width + x] = 1;
      }
    }
  }
  m.delta = total.value() / static_cast<double>(m.window_dissimilarity.size());
  return m;
}

// ---------------------------------------------------------------------------
// Guidance wire format: "GP", version u8, pose index u16, run count u16, runs
// u16 (alternating, starting with an unmasked run), 3 x u8 residual per masked
// pixel in row-major order, CRC-32 of everything before it. The image size is
// implied by the session.

class GuidanceFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint8_t kGuidanceVersion = 1;

inline std::uint8_t quantize_residual(double r) {
  return static_cast<std::uint8_t>(std::lround((std::clamp(r, -1.0, 1.0) + 1.0) * 127.5));
}
inline double dequantize_residual(std::uint8_t q) { return q / 127.5 - 1.0; }

inline std::vector<std::uint16_t> run_lengths(std::span<const std::uint8_t> mask) {
  std::vector<std::uint16_t> runs;
  std::uint8_t cur = 0;
  std::uint32_t len = 0;
  for (std::uint8_t m : mask) {
    const std::uint8_t b = m ? 1 : 0;
    if (b != cur) {
      runs.push_back(static_cast<std::uint16_t>(len));
      cur = b;
      len = 0;
    }
    if (len == 0xFFFF) {  // split an overlong run with an empty opposite run
      runs.push_back(0xFFFF);
      runs.push_back(0);
      len = 0;
    }
    ++len;
  }
  if (len > 0) runs.push_back(static_cast<std::uint16_t>(len));
  return runs;
}

struct GuidancePacket {
  std::uint16_t pose_index = 0;
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> residual_q;  // 3 per masked pixel

  std::size_t masked() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
  friend bool operator==(const GuidancePacket&, const GuidancePacket&) = default;
};

inline std::size_t guidance_size(std::size_t runs, std::size_t masked) { return 2 + 1 + 2 + 2 + 2 * runs + 3 * masked + 4; }

inline std::vector<std::uint8_t> encode_guidance(const GuidancePacket& p) {
  if (p.residual_q.size() != 3 * p.masked()) throw InvalidArgument("one residual triple per masked pixel required");
  const auto runs = run_lengths(p.mask);
  if (runs.size() > 0xFFFF) throw InvalidArgument("too many mask runs");
  ByteWriter w;
  w.u8('G');
  w.u8('P');
  w.u8(kGuidanceVersion);
  w.u16(p.pose_index);
  w.u16(static_cast<std::uint16_t>(runs.size()));
  for (auto r : runs) w.u16(r);
  w.bytes(p.residual_q);
  w.append_crc32();
  return w.take();
}

inline GuidancePacket decode_guidance(std::span<const std::uint8_t> bytes, std::size_t pixel_count) {
  ByteReader<GuidanceFormatError> r(bytes);
  if (r.u8() != 'G' || r.u8() != 'P') throw GuidanceFormatError("bad guidance magic");
  if (r.u8() != kGuidanceVersion) throw GuidanceFormatError("unsupported guidance version");
  GuidancePacket p;
  p.pose_index = r.u16();
  const std::uint16_t n_runs = r.u16();
  std::uint8_t cur = 0;
  for (std::uint16_t i = 0; i < n_runs; ++i) {
    const std::uint16_t len = r.u16();
    if (p.mask.size() + len > pixel_count) throw GuidanceFormatError("mask runs exceed the image");
    p.mask.insert(p.mask.end(), len, cur);
    cur ^= 1;
  }
  if (p.mask.size() != pixel_count) throw GuidanceFormatError("mask runs do not cover the image");
  const std::size_t n = 3 * p.masked();
  for (std::size_t i = 0; i < n; ++i) p.residual_q.push_back(r.u8());
  const std::size_t body = r.position();
  const std::uint32_t crc = r.u32();
  if (r.remaining() != 0) throw GuidanceFormatError("trailing bytes after guidance packet");
  if (crc != crc32(bytes.first(body))) throw GuidanceFormatError("guidance checksum mismatch");
  return p;
}

/// Residual local - belief on the masked pixels.
inline GuidancePacket make_guidance(std::uint16_t pose_index, std::span<const std::uint8_t> mask, const Image& belief,
                                    const Image& local) {
  if (!belief.same_shape(local) || mask.size() != belief.pixel_count()) {
    throw InvalidArgument("guidance inputs differ in size");
  }
  GuidancePacket p;
  p.pose_index = pose_index;
  p.mask.assign(mask.begin(), mask.end());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      p.residual_q.push_back(quantize_residual(local.data[3 * i + ch] - belief.data[3 * i + ch]));
    }
  }
  return p;
}

inline generator::GuidancePayload to_payload(const GuidancePacket& p, const Image& anchor) {
  if (p.mask.size() != anchor.pixel_count()) throw InvalidArgument("packet does not match the anchor image");
  generator::GuidancePayload g;
  g.mask = p.mask;
  g.residual.assign(3 * p.mask.size(), 0.0);
  g.anchor = anchor;
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.mask.size(); ++i) {
    if (!p.mask[i]) continue;
    for (std::size_t ch = 0; ch < 3; ++ch) g.residual[3 * i + ch] = dequantize_residual(p.residual_q[k++]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Validation

struct ValidationResult {
  bool pass = false;
  double mean_psnr = 0.0;
  std::vector<double> psnr;
};

/// Mean PSNR of zone-clipped renders against the probe images.
template <radiance::Field F>
ValidationResult validate(const F& field, std::span<const View> probes, double threshold_db,
                          const CameraIntrinsics& optics, const Box& box, int samples) {
  if (probes.empty()) throw InvalidArgument("validation needs at least one probe");
  ValidationResult v;
  double sum = 0.0;
  for (const View& p : probes) {
    const Image r =
        render_clipped(field, p.pose, rescaled(optics, p.image.width, p.image.height), box, samples);
    v.psnr.push_back(radiance::psnr(r, p.image));
    sum += v.psnr.back();
  }
  v.mean_psnr = sum / static_cast<double>(probes.size());
  v.pass = v.mean_psnr >= threshold_db;
  return v;
}

// ---------------------------------------------------------------------------
// Swarm state

struct ConditioningSpec {
  std::size_t semantic_dim = 32;
  std::uint64_t seed = 0x5eed5eedULL;
  double pose_scale = 32.0;

  std::size_t size() const { return semantic_dim + generator::kPoseEncodingSize + 1; }
};

/// Projected embedding scaled to unit RMS (zero for an empty embedding) plus the pose encoding.
inline generator::Conditioning condition_on_embedding(std::span<const double> embedding, const Pose& pose,
                                                      const ConditioningSpec& spec) {
  generator::Conditioning c;
  c.semantic = generator::project_embedding(embedding, spec.semantic_dim, spec.seed);
  double ss = 0.0;
  for (double v : c.semantic) ss += v * v;
  if (ss > 0.0) {
    const double s = std::sqrt(static_cast<double>(spec.semantic_dim) / ss);
    for (double& v : c.semantic) v *= s;
  }
  c.pose = generator::pose_encoding(pose, spec.pose_scale);
  return c;
}

inline generator::Conditioning condition_on_tokens(std::span<const semantics::SemanticToken> tokens, const Pose& pose,
                                                   const radiance::GridDims& dims, const ConditioningSpec& spec) {
  return condition_on_embedding(semantics::embed_tokens(tokens, dims), pose, spec);
}

struct DroneState {
  int id = 0;
  world::Zone zone;
  std::vector<View> views;   // sensor resolution, zone-cropped
  std::vector<View> probes;  // held out for validation
  std::vector<semantics::SemanticToken> tokens;
  VoxelField field;
  bool field_trained = false;
  std::vector<generator::TrainingExample> examples;
  std::vector<std::uint64_t> example_ids;
};

struct SwarmWorld {
  world::Scene scene;
  std::vector<world::Zone> zones;
  CameraIntrinsics sensor;
  int generator_size = 16;
  int gt_samples = 48;
  std::vector<DroneState> drones;

  int downsample_factor() const { return sensor.width / generator_size; }
  CameraIntrinsics generator_camera() const { return rescaled(sensor, generator_size, generator_size); }
  std::optional<int> owner_of(int zone) const {
    for (const auto& z : zones) {
      if (z.id == zone) return z.owner;
    }
    return std::nullopt;
  }
  const world::Zone& zone(int id) const {
    for (const auto& z : zones) {
      if (z.id == id) return z;
    }
    throw InvalidArgument("unknown zone " + std::to_string(id));
  }
};

struct SwarmSpec {
  int views_per_drone = 4;
  int probes_per_drone = 1;
  CameraIntrinsics sensor;
  int generator_size = 16;
  int gt_samples = 48;
  double view_distance = 30.0;
  double view_height = 20.0;
  ConditioningSpec conditioning;

  void validate() const {
    sensor.validate();
    if (views_per_drone < 1 || probes_per_drone < 1) throw InvalidArgument("each drone needs views and a probe");
    if (generator_size < 8 || sensor.width % generator_size != 0 || sensor.height != sensor.width) {
      throw InvalidArgument("generator size must divide a square sensor and be at least 8");
    }
    if (gt_samples < 2) throw InvalidArgument("gt_samples must be at least 2");
    if (!(view_distance > 0.0)) throw InvalidArgument("view distance must be positive");
  }
};

/// Oblique views of a zone on a ring around its ground-level center. Probes sit
/// on the same ring, offset by half a step.
inline std::vector<Pose> zone_poses(const world::Zone& z, int count, double phase, double distance, double height) {
  const Vec3 c = z.center();
  const Vec3 look{c.x, c.y, std::min(c.z, 4.0)};
  std::vector<Pose> out;
  for (int k = 0; k < count; ++k) {
    const double a = 2.0 * M_PI * (k + phase) / count + 0.25 * M_PI;
    const Vec3 eye{c.x + distance * std::cos(a), c.y + distance * std::sin(a), height};
    out.push_back(Pose::look_at(eye, look));
  }
  return out;
}

/// Builds each drone's zone-cropped observations, tokens and generator examples.
inline SwarmWorld build_swarm(const world::Scene& scene, int n_drones, const SwarmSpec& spec) {
  spec.validate();
  SwarmWorld w;
  w.scene = scene;
  w.zones = world::zone_partition(scene, n_drones);
  w.sensor = spec.sensor;
  w.generator_size = spec.generator_size;
  w.gt_samples = spec.gt_samples;
  const int f = w.downsample_factor();
  for (const world::Zone& z : w.zones) {
    DroneState d;
    d.id = z.owner;
    d.zone = z;
    d.field = VoxelField(scene.dims);
    const world::Scene cropped = world::crop(scene, z.lo, z.hi);
    const radiance::ActivatedGrid grid = cropped.as_grid();
    const Box box = Box::of(z);
    std::vector<std::vector<semantics::SemanticToken>> seen;
    for (const Pose& p : zone_poses(z, spec.views_per_drone, 0.0, spec.view_distance, spec.view_height)) {
      d.views.push_back({p, render_clipped(grid, p, spec.sensor, box, spec.gt_samples)});
      const auto det = world::oracle_detect(scene, p, spec.sensor);
      seen.push_back(semantics::extract_semantics(det, z, scene.dims));
    }
    for (const Pose& p : zone_poses(z, spec.probes_per_drone, 0.5, spec.view_distance, spec.view_height)) {
      d.probes.push_back({p, render_clipped(grid, p, spec.sensor, box, spec.gt_samples)});
    }
    d.tokens = semantics::fuse(std::span<const std::vector<semantics::SemanticToken>>(seen));
    for (std::size_t k = 0; k < d.views.size(); ++k) {
      d.examples.push_back({downsample(d.views[k].image, f),
                            condition_on_tokens(d.tokens, d.views[k].pose, scene.dims, spec.conditioning)});
      d.example_ids.push_back(static_cast<std::uint64_t>(d.id) * 1000 + k);
    }
    w.drones.push_back(std::move(d));
  }
  return w;
}

/// Objects whose centroid lies in the zone, as ground-truth detections.
inline std::vector<world::Detection> zone_truth(const world::Scene& s, const world::Zone& z) {
  std::vector<world::Detection> out;
  for (const auto& o : s.objects) {
    if (z.contains(o.center)) out.push_back({o.class_id, o.center, o.bound() * 2.0, 1.0});
  }
  return out;
}

inline std::vector<radiance::TrainingRay> own_rays(const DroneState& d, const CameraIntrinsics& sensor) {
  std::vector<radiance::TrainingRay> rays;
  for (const View& v : d.views) {
    auto r = clipped_rays(v, sensor, Box::of(d.zone));
    rays.insert(rays.end(), r.begin(), r.end());
  }
  return rays;
}

/// Trains a drone's field on its own observations.
inline void prepare_field(SwarmWorld& w, int drone, const FieldTraining& cfg) {
  DroneState& d = w.drones.at(static_cast<std::size_t>(drone));
  if (d.field_trained) return;
  const auto rays = own_rays(d, w.sensor);
  train_field(d.field, rays, cfg);
  d.field_trained = true;
}

struct Models {
  generator::DenoiserParams generator;
  generator::NoiseSchedule schedule;
  semantics::Codebook codebook;
  ConditioningSpec conditioning;
};

// ---------------------------------------------------------------------------
// Protocol configuration

enum class RefinePolicy { kNever, kOnFailure, kAlways };

struct ProtocolConfig {
  double tau = 0.15;
  double epsilon = 0.05;
  int max_rounds = 4;
  double guidance_weight = 2.0;
  int belief_steps = 10;
  int refine_steps = 10;
  int hallucination_steps = 50;
  double hallucination_weight = 1.0;
  double validation_db = 20.0;
  RefinePolicy refine = RefinePolicy::kOnFailure;
  FieldTraining own_training;
  FieldTraining coop_training;
  std::uint64_t raw_multiplier = 1024;
  federation::LocalConfig fl;
  std::uint64_t seed = 1;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(tau >= 0.0)) v.push_back("tau must be non-negative");
    if (!(epsilon >= 0.0)) v.push_back("epsilon must be non-negative");
    if (max_rounds < 0) v.push_back("max_rounds must be non-negative");
    if (!(guidance_weight >= 0.0)) v.push_back("guidance weight must be non-negative");
    if (belief_steps < 1 || refine_steps < 1 || hallucination_steps < 1) v.push_back("step counts must be >= 1");
    if (raw_multiplier < 1) v.push_back("raw multiplier must be >= 1");
    for (const FieldTraining* t : {&own_training, &coop_training}) {
      try {
        t->validate();
      } catch (const InvalidArgument& e) {
        v.push_back(e.what());
      }
    }
    return v;
  }
  void validate() const {
    const auto v = violations();
    if (!v.empty()) throw InvalidArgument(v.front());
  }
};

// ---------------------------------------------------------------------------
// Request wire format: "RQ", version u8, target u16, zone count u16, zones u16, CRC-32.

inline std::vector<std::uint8_t> encode_request(int target, std::span<const int> zones) {
  ByteWriter w;
  w.u8('R');
  w.u8('Q');
  w.u8(1);
  w.u16(static_cast<std::uint16_t>(target));
  w.u16(static_cast<std::uint16_t>(zones.size()));
  for (int z : zones) w.u16(static_cast<std::uint16_t>(z));
  w.append_crc32();
  return w.take();
}

inline std::size_t raw_frame_bytes(const CameraIntrinsics& sensor) {
  return static_cast<std::size_t>(sensor.width) * static_cast<std::size_t>(sensor.height) * 3;
}

// ---------------------------------------------------------------------------
// Refinement dialogue

struct PoseTrace {
  std::size_t pose = 0;
  int owner = 0;
  std::vector<double> delta;     // accepted discrepancy, one entry per round plus the initial value
  std::vector<double> proposed;  // discrepancy of each evaluated proposal
  std::uint64_t bytes = 0;
  bool converged = false;
};

struct PoseRef {
  int owner = 0;
  int zone = 0;
  std::size_t view = 0;
  Pose pose;
};

struct RefinementState {
  int iteration = 0;
  int max_rounds = 4;
  double tau = 0.15;
  double epsilon = 0.05;
  std::uint64_t seed = 0;
  std::vector<PoseRef> poses;
  std::vector<generator::Conditioning> conditions;
  std::vector<Image> beliefs;
  std::vector<double> delta;
  std::vector<bool> active;
  std::vector<PoseTrace> traces;
  std::uint64_t handshake_bytes = 0;

  bool finished() const {
    return iteration >= max_rounds || std::none_of(active.begin(), active.end(), [](bool a) { return a; });
  }
};

/// The owner's local view at the generator resolution.
inline Image local_view(const SwarmWorld& w, const PoseRef& p) {
  return downsample(w.drones.at(static_cast<std::size_t>(p.owner)).views.at(p.view).image, w.downsample_factor());
}

/// Handshake and initial beliefs. Every participant sends its latent summary to
/// the others; beliefs are few-step samples conditioned on the sum of the
/// responders' reconstructed summaries (the embedding is linear in tokens, so
/// this approximates the fused-token conditioning), seeded by the sorted
/// summary bytes.
inline RefinementState init_refinement(CooperationSession& session, const SwarmWorld& w, const Models& m,
                                       const netsim::Topology& topo, std::span<const PoseRef> poses,
                                       const ProtocolConfig& cfg) {
  RefinementState st;
  st.max_rounds = cfg.max_rounds;
  st.tau = cfg.tau;
  st.epsilon = cfg.epsilon;
  st.poses.assign(poses.begin(), poses.end());
  std::vector<int> participants{session.target};
  participants.insert(participants.end(), session.responders.begin(), session.responders.end());
  std::vector<std::vector<std::uint8_t>> encoded;
  std::vector<double> embedding(m.codebook.dim, 0.0);
  for (int p : participants) {
    const auto s = semantics::summarize_view(w.drones.at(static_cast<std::size_t>(p)).tokens, m.codebook, w.scene.dims);
    const auto bytes = s.encode();
    for (int q : participants) {
      if (q == p) continue;
      const auto r = session.send(topo, p, q, PayloadKind::kSummary, bytes.size());
      if (!r.delivered) {
        session.fail("summary from drone " + std::to_string(p) + " to " + std::to_string(q) + " undeliverable");
        return st;
      }
      if (q == session.target || p == session.target) st.handshake_bytes += bytes.size() * r.per_link_bytes.size();
    }
    encoded.push_back(bytes);
    if (p == session.target) continue;
    const auto e = semantics::reconstruct_embedding(s, m.codebook);
    for (std::size_t j = 0; j < e.size(); ++j) embedding[j] += e[j];
  }
  session.settle();
  std::sort(encoded.begin(), encoded.end());
  std::vector<std::uint8_t> all;
  for (const auto& e : encoded) all.insert(all.end(), e.begin(), e.end());
  st.seed = hash_bytes(all, 0xbe11efULL);
  for (std::size_t i = 0; i < st.poses.size(); ++i) {
    st.conditions.push_back(condition_on_embedding(embedding, st.poses[i].pose, m.conditioning));
    Rng rng(mix64(st.seed ^ mix64(i)));
    st.beliefs.push_back(
        generator::generate_view(m.generator, st.conditions[i], m.schedule, cfg.belief_steps, 1.0, nullptr, rng));
    const double d = discrepancy_map(st.beliefs[i], local_view(w, st.poses[i]), cfg.tau).delta;
    st.delta.push_back(d);
    st.active.push_back(true);
    st.traces.push_back({i, st.poses[i].owner, {d}, {}, 0, false});
  }
  return st;
}

/// One dialogue round. Owners flag windows with 1 - SSIM > tau and, if the
/// guided second pass they can reproduce locally does not raise delta, transmit
/// the masked residuals; the target then adopts the guided sample. Poses with
/// delta < epsilon or no flagged window stop.
inline RefinementState refine_round(RefinementState st, CooperationSession& session, const SwarmWorld& w,
                                    const Models& m, const netsim::Topology& topo, const ProtocolConfig& cfg) {
  if (st.iteration >= st.max_rounds) throw InvalidArgument("refinement round budget exhausted");
  for (std::size_t i = 0; i < st.poses.size(); ++i) {
    if (!st.active[i]) continue;
    PoseTrace& tr = st.traces[i];
    const Image local = local_view(w, st.poses[i]);
    const DiscrepancyMap dm = discrepancy_map(st.beliefs[i], local, st.tau);
    const bool flagged = std::any_of(dm.mask.begin(), dm.mask.end(), [](std::uint8_t b) { return b != 0; });
    if (dm.delta < st.epsilon || !flagged) {
      st.active[i] = false;
      tr.converged = dm.delta < st.epsilon;
      continue;
    }
    const GuidancePacket pkt = make_guidance(static_cast<std::uint16_t>(i), dm.mask, st.beliefs[i], local);
    const auto bytes = encode_guidance(pkt);
    const generator::GuidancePayload g =
        to_payload(decode_guidance(bytes, st.beliefs[i].pixel_count()), st.beliefs[i]);
    Rng rng(mix64(st.seed ^ mix64(i * 0x9e37ULL + static_cast<std::uint64_t>(st.iteration + 1))));
    Image proposal =
        generator::generate_view(m.generator, st.conditions[i], m.schedule, cfg.refine_steps, cfg.guidance_weight, &g, rng);
    const double d = discrepancy_map(proposal, local, st.tau).delta;
    tr.proposed.push_back(d);
    if (d <= st.delta[i]) {
      const auto r = session.send(topo, st.poses[i].owner, session.target, PayloadKind::kGuidance, bytes.size());
      if (!r.delivered) {
        session.fail("guidance from drone " + std::to_string(st.poses[i].owner) + " undeliverable");
        ++st.iteration;
        return st;
      }
      tr.bytes += bytes.size() * r.per_link_bytes.size();
      st.beliefs[i] = std::move(proposal);
      st.delta[i] = d;
    }
    tr.delta.push_back(st.delta[i]);
  }
  session.settle();
  ++st.iteration;
  return st;
}

// ---------------------------------------------------------------------------
// Cooperation

struct CoopView {
  View view;
  int zone = 0;
};

struct CooperationOutcome {
  CooperationSession session;
  VoxelField field;
  std::vector<semantics::SemanticToken> fused;
  std::vector<CoopView> coop_views;
  std::optional<RefinementState> refinement;
  std::vector<ValidationResult> validations;
  std::optional<federation::ClientUpdate> fl_contribution;

  netsim::BandwidthLedger ledger() const { return session.ledger(); }
};

namespace detail {

/// Copies voxels whose centers lie in the zone from `src` into `dst`.
inline void merge_zone(VoxelField& dst, const VoxelField& src, const world::Zone& z) {
  if (!(dst.dims == src.dims)) throw InvalidArgument("checkpoint dims differ from the local field");
  for (int zz = z.lo[2]; zz < z.hi[2]; ++zz) {
    for (int y = z.lo[1]; y < z.hi[1]; ++y) {
      for (int x = z.lo[0]; x < z.hi[0]; ++x) {
        const std::size_t i = dst.dims.index(x, y, zz);
        dst.raw_density[i] = src.raw_density[i];
        for (std::size_t c = 0; c < 3; ++c) dst.color_logit[3 * i + c] = src.color_logit[3 * i + c];
      }
    }
  }
}

inline std::vector<radiance::TrainingRay> update_rays(const SwarmWorld& w, const DroneState& target,
                                                      std::span<const CoopView> coop) {
  auto rays = own_rays(target, w.sensor);
  for (const CoopView& cv : coop) {
    auto r = clipped_rays(cv.view, w.sensor, Box::of(w.zone(cv.zone)));
    rays.insert(rays.end(), r.begin(), r.end());
  }
  return rays;
}

}  // namespace detail

/// Algorithm-1 session for `session.target`. The target's field must be trained
/// on its own views already (prepare_field); LATENT and RAW also need the
/// responders' fields.
inline CooperationOutcome run_cooperation(CooperationSession session, const SwarmWorld& w, const Models& m,
                                          const netsim::Topology& topo, const ProtocolConfig& cfg) {
  cfg.validate();
  if (session.phase != Phase::kRequest) throw InvalidArgument("session must start in the REQUEST phase");
  session.max_rounds = cfg.max_rounds;
  const DroneState& target = w.drones.at(static_cast<std::size_t>(session.target));
  CooperationOutcome out;
  out.field = target.field;

  // REQUEST
  std::set<int> owners;
  for (int z : session.requested_zones) {
    const auto o = w.owner_of(z);
    if (!o) throw InvalidArgument("requested zone " + std::to_string(z) + " does not exist");
    if (*o != session.target) owners.insert(*o);
  }
  std::set<int> reached;
  if (!owners.empty()) {
    const auto req = encode_request(session.target, session.requested_zones);
    for (int n : topo.nodes()) {
      if (n == session.target) continue;
      const auto r = session.send(topo, session.target, n, PayloadKind::kRequest, req.size());
      if (r.delivered) reached.insert(n);
    }
    session.settle();
  }
  session.advance(Phase::kResponses);

  // RESPONSES
  for (int o : owners) {
    if (!reached.count(o) || !netsim::route(topo, o, session.target)) {
      out.session = session;
      out.session.fail("network partition: drone " + std::to_string(o) + " unreachable");
      return out;
    }
    session.responders.push_back(o);
  }
  std::vector<semantics::SemanticMessage> messages;
  std::vector<std::pair<int, VoxelField>> checkpoints;
  std::vector<CoopView> raw_views;
  for (int o : session.responders) {
    const DroneState& src = w.drones.at(static_cast<std::size_t>(o));
    semantics::SemanticMessage msg;
    msg.zone_id = static_cast<std::uint16_t>(src.zone.id);
    msg.tokens = src.tokens;
    if (session.mode != CooperationMode::kDetectionsOnly) {
      for (const View& v : src.views) msg.poses.push_back(v.pose);
    }
    const auto bytes = semantics::encode_message(msg);
    const PayloadKind kind =
        session.mode == CooperationMode::kDetectionsOnly ? PayloadKind::kDetections : PayloadKind::kSemantic;
    if (!session.send(topo, o, session.target, kind, bytes.size()).delivered) {
      out.session = session;
      out.session.fail("response from drone " + std::to_string(o) + " undeliverable");
      return out;
    }
    messages.push_back(semantics::decode_message(bytes));
    if (session.mode == CooperationMode::kLatent || session.mode == CooperationMode::kRaw) {
      const auto ckpt = radiance::encode_checkpoint(src.field);
      const PayloadKind k = session.mode == CooperationMode::kLatent ? PayloadKind::kLatent : PayloadKind::kRaw;
      if (!session.send(topo, o, session.target, k, ckpt.size()).delivered) {
        out.session = session;
        out.session.fail("checkpoint from drone " + std::to_string(o) + " undeliverable");
        return out;
      }
      checkpoints.emplace_back(src.zone.id, radiance::decode_checkpoint(ckpt));
    }
    if (session.mode == CooperationMode::kRaw) {
      const std::uint64_t frame = raw_frame_bytes(w.sensor) * cfg.raw_multiplier;
      for (const View& v : src.views) {
        if (!session.send(topo, o, session.target, PayloadKind::kRaw, frame).delivered) {
          out.session = session;
          out.session.fail("raw frame from drone " + std::to_string(o) + " undeliverable");
          return out;
        }
        raw_views.push_back({v, src.zone.id});
      }
    }
  }
  session.settle();
  out.fused = semantics::fuse(std::span<const semantics::SemanticMessage>(messages));
  session.advance(Phase::kHallucinate);

  // HALLUCINATE: only SEMANTIC synthesizes views; LATENT/RAW carry real content.
  std::vector<PoseRef> refs;
  if (session.mode == CooperationMode::kSemantic) {
    std::size_t k = 0;
    for (const auto& msg : messages) {
      const int owner = *w.owner_of(msg.zone_id);
      for (std::size_t v = 0; v < msg.poses.size(); ++v, ++k) {
        const Pose& p = msg.poses[v];
        const auto c = condition_on_tokens(out.fused, p, w.scene.dims, m.conditioning);
        Rng rng(mix64(cfg.seed ^ mix64(0x4a11ULL + k)));
        Image img = generator::generate_view(m.generator, c, m.schedule, cfg.hallucination_steps,
                                             cfg.hallucination_weight, nullptr, rng);
        out.coop_views.push_back({{p, std::move(img)}, msg.zone_id});
        refs.push_back({owner, msg.zone_id, v, p});
      }
    }
  } else if (session.mode == CooperationMode::kRaw) {
    out.coop_views = raw_views;
  }
  session.advance(Phase::kUpdate);

  // UPDATE
  for (const auto& [zone, f] : checkpoints) detail::merge_zone(out.field, f, w.zone(zone));
  if (!out.coop_views.empty()) {
    const auto rays = detail::update_rays(w, target, out.coop_views);
    train_field(out.field, rays, cfg.coop_training);
  }
  session.advance(Phase::kValidate);

  // VALIDATE, optionally REFINE -> UPDATE -> VALIDATE
  const CameraIntrinsics& sensor = w.sensor;
  const Box own_box = Box::of(target.zone);
  out.validations.push_back(validate(out.field, target.probes, cfg.validation_db, sensor, own_box, cfg.coop_training.samples));
  const bool want_refine = !refs.empty() && cfg.max_rounds > 0 &&
                           (cfg.refine == RefinePolicy::kAlways ||
                            (cfg.refine == RefinePolicy::kOnFailure && !out.validations.back().pass));
  if (want_refine) {
    session.advance(Phase::kRefine);
    RefinementState st = init_refinement(session, w, m, topo, refs, cfg);
    while (!terminal(session.phase)) {
      st = refine_round(std::move(st), session, w, m, topo, cfg);
      if (terminal(session.phase) || st.finished()) break;
      session.advance(Phase::kRefine);
    }
    if (session.phase == Phase::kFailed) {
      out.refinement = std::move(st);
      out.session = session;
      return out;
    }
    session.advance(Phase::kUpdate);
    for (std::size_t i = 0; i < st.poses.size(); ++i) out.coop_views[i].view.image = st.beliefs[i];
    out.field = target.field;
    const auto rays = detail::update_rays(w, target, out.coop_views);
    train_field(out.field, rays, cfg.coop_training);
    session.advance(Phase::kValidate);
    out.validations.push_back(
        validate(out.field, target.probes, cfg.validation_db, sensor, own_box, cfg.coop_training.samples));
    out.refinement = std::move(st);
  }
  session.advance(Phase::kDone);

  // FL contribution: one local step on the target's own examples.
  if (!target.examples.empty()) {
    federation::DenoiserLoss loss;
    loss.descriptor = m.generator.descriptor;
    loss.examples = target.examples;
    loss.ids = target.example_ids;
    loss.schedule = &m.schedule;
    Rng rng(mix64(cfg.seed ^ 0xf1f1ULL ^ static_cast<std::uint64_t>(session.target)));
    out.fl_contribution = federation::local_update(session.target, m.generator.values, target.examples.size(), loss,
                                                   cfg.fl, rng);
  }
  out.session = session;
  return out;
}

}  // namespace swarmsynth::protocol
