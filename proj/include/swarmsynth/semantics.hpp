#pragma once

// Semantic tokens, the SemanticMessage wire format, token fusion, semantic
// distortion, codebook quantization, latent summaries and goal filtering.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "swarmsynth/core.hpp"
#include "swarmsynth/world.hpp"

namespace swarmsynth::semantics {

using world::Detection;
using world::Zone;

inline constexpr double kPositionScale = 16.0;  // fixed-point steps per voxel
inline constexpr double kMergeRadius = 1.5;
inline constexpr double kMatchRadius = 2.0;
inline constexpr double kRelevanceThreshold = 0.5;

struct SemanticToken {
  std::uint16_t class_id = 0;
  std::array<std::uint16_t, 3> position_q{};
  std::array<std::uint8_t, 3> extent_q{};
  std::uint8_t confidence_q = 0;

  Vec3 position() const {
    return {position_q[0] / kPositionScale, position_q[1] / kPositionScale, position_q[2] / kPositionScale};
  }
  Vec3 extent() const { return {double(extent_q[0]), double(extent_q[1]), double(extent_q[2])}; }
  double confidence() const { return confidence_q / 255.0; }

  auto key() const { return std::tie(class_id, position_q, extent_q, confidence_q); }
  friend bool operator==(const SemanticToken& a, const SemanticToken& b) { return a.key() == b.key(); }
  friend bool operator<(const SemanticToken& a, const SemanticToken& b) { return a.key() < b.key(); }
};

/// Quantizes a detection. Positions are clamped to [0, grid extent].
inline SemanticToken quantize_detection(const Detection& d, const radiance::GridDims& dims) {
  if (d.class_id < 0 || d.class_id > 0xFFFF) throw InvalidArgument("class id does not fit 16 bits");
  SemanticToken t;
  t.class_id = static_cast<std::uint16_t>(d.class_id);
  for (int a = 0; a < 3; ++a) {
    const double hi = std::min(65535.0, dims.extent(a) * kPositionScale);
    const double q = std::clamp(std::round(d.centroid[static_cast<std::size_t>(a)] * kPositionScale), 0.0, hi);
    t.position_q[static_cast<std::size_t>(a)] = static_cast<std::uint16_t>(q);
    const double e = std::clamp(std::round(d.extent[static_cast<std::size_t>(a)]), 1.0, 255.0);
    t.extent_q[static_cast<std::size_t>(a)] = static_cast<std::uint8_t>(e);
  }
  t.confidence_q = static_cast<std::uint8_t>(std::lround(std::clamp(d.confidence, 0.0, 1.0) * 255.0));
  return t;
}

inline Detection to_detection(const SemanticToken& t) {
  return {t.class_id, t.position(), t.extent(), t.confidence()};
}

inline std::vector<Detection> to_detections(std::span<const SemanticToken> tokens) {
  std::vector<Detection> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(to_detection(t));
  return out;
}

/// One token per detection whose centroid lies in the zone, in input order.
inline std::vector<SemanticToken> extract_semantics(std::span<const Detection> detections, const Zone& zone,
                                                    const radiance::GridDims& dims) {
  std::vector<SemanticToken> out;
  for (const Detection& d : detections) {
    if (zone.contains(d.centroid)) out.push_back(quantize_detection(d, dims));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wire format

class MessageFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public MessageFormatError {
 public:
  using MessageFormatError::MessageFormatError;
};
class TruncatedMessageError : public MessageFormatError {
 public:
  using MessageFormatError::MessageFormatError;
};
class ChecksumError : public MessageFormatError {
 public:
  using MessageFormatError::MessageFormatError;
};

inline constexpr std::uint8_t kMessageVersion = 1;
inline constexpr std::size_t kTokenBytes = 12;
inline constexpr std::size_t kPoseBytes = 28;

struct SemanticMessage {
  std::uint16_t zone_id = 0;
  std::vector<SemanticToken> tokens;
  std::vector<Pose> poses;
  std::optional<std::uint16_t> goal_tag;
  std::uint8_t flags = 0;

  friend bool operator==(const SemanticMessage&, const SemanticMessage&) = default;
};

/// magic(2) version(1) flags(1) goal(2) zone(2) reserved(2) | count(2) tokens | count(2) poses | crc(4)
inline constexpr std::size_t encoded_size(std::size_t tokens, std::size_t poses) {
  return 10 + 2 + kTokenBytes * tokens + 2 + kPoseBytes * poses + 4;
}

inline std::vector<std::uint8_t> encode_message(const SemanticMessage& m) {
  if (m.tokens.size() > 0xFFFF || m.poses.size() > 0xFFFF) throw InvalidArgument("message count overflow");
  if (m.goal_tag && *m.goal_tag == 0) throw InvalidArgument("goal tag 0 is reserved for none");
  ByteWriter w;
  w.u8('S');
  w.u8('M');
  w.u8(kMessageVersion);
  w.u8(m.flags);
  w.u16(m.goal_tag.value_or(0));
  w.u16(m.zone_id);
  w.u16(0);  // reserved
  w.u16(static_cast<std::uint16_t>(m.tokens.size()));
  for (const SemanticToken& t : m.tokens) {
    w.u16(t.class_id);
    for (auto v : t.position_q) w.u16(v);
    for (auto v : t.extent_q) w.u8(v);
    w.u8(t.confidence_q);
  }
  w.u16(static_cast<std::uint16_t>(m.poses.size()));
  for (const Pose& p : m.poses) {
    for (double v : {p.position.x, p.position.y, p.position.z}) w.f32(static_cast<float>(v));
    for (double v : {p.orientation.w, p.orientation.x, p.orientation.y, p.orientation.z}) w.f32(static_cast<float>(v));
  }
  w.append_crc32();
  return w.take();
}

inline SemanticMessage decode_message(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'S' || bytes[1] != 'M') throw BadMagicError("not a semantic message");
  ByteReader<TruncatedMessageError> r(bytes);
  r.u16();
  if (r.u8() != kMessageVersion) throw BadMagicError("unsupported semantic message version");
  SemanticMessage m;
  m.flags = r.u8();
  const std::uint16_t goal = r.u16();
  if (goal != 0) m.goal_tag = goal;
  m.zone_id = r.u16();
  if (r.u16() != 0) throw MessageFormatError("reserved header field is non-zero");
  const std::uint16_t n_tokens = r.u16();
  if (r.remaining() < kTokenBytes * n_tokens) throw TruncatedMessageError("semantic message truncated");
  m.tokens.resize(n_tokens);
  for (SemanticToken& t : m.tokens) {
    t.class_id = r.u16();
    for (auto& v : t.position_q) v = r.u16();
    for (auto& v : t.extent_q) v = r.u8();
    t.confidence_q = r.u8();
  }
  const std::uint16_t n_poses = r.u16();
  if (r.remaining() < kPoseBytes * n_poses + 4) throw TruncatedMessageError("semantic message truncated");
  m.poses.resize(n_poses);
  for (Pose& p : m.poses) {
    p.position = {r.f32(), r.f32(), r.f32()};
    p.orientation = {r.f32(), r.f32(), r.f32(), r.f32()};
  }
  const std::size_t body = r.position();
  const std::uint32_t crc = r.u32();
  if (r.remaining() != 0) throw ChecksumError("trailing bytes after semantic message");
  if (crc != crc32(bytes.first(body))) throw ChecksumError("semantic message checksum mismatch");
  return m;
}

// ---------------------------------------------------------------------------
// Fusion and distortion

/// Union of all tokens; same-class tokens within kMergeRadius (single linkage)
/// collapse to their highest-confidence member. Output sorted canonically.
inline std::vector<SemanticToken> fuse(std::span<const SemanticMessage> messages, double merge_radius = kMergeRadius) {
  std::vector<SemanticToken> all;
  for (const auto& m : messages) all.insert(all.end(), m.tokens.begin(), m.tokens.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> parent(all.size());
  std::iota(parent.begin(), parent.end(), 0);
  const auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size() && all[j].class_id == all[i].class_id; ++j) {
      if (norm(all[i].position() - all[j].position()) <= merge_radius) parent[find(j)] = find(i);
    }
  }
  std::map<std::size_t, std::size_t> best;  // root -> representative index
  for (std::size_t i = 0; i < all.size(); ++i) {
    const std::size_t r = find(i);
    const auto it = best.find(r);
    // `all` is sorted, so ties on confidence keep the canonically smallest token.
    if (it == best.end() || all[i].confidence_q > all[it->second].confidence_q) best[r] = i;
  }
  std::vector<SemanticToken> out;
  for (const auto& [root, idx] : best) out.push_back(all[idx]);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<SemanticToken> fuse(std::span<const std::vector<SemanticToken>> token_sets,
                                       double merge_radius = kMergeRadius) {
  std::vector<SemanticMessage> msgs;
  for (const auto& ts : token_sets) msgs.push_back({0, ts, {}, std::nullopt, 0});
  return fuse(std::span<const SemanticMessage>(msgs), merge_radius);
}

struct MatchResult {
  std::size_t matched = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

/// Greedy matching of same-class centroids by increasing distance within `radius`.
inline MatchResult greedy_match(std::span<const Detection> a, std::span<const Detection> b, double radius) {
  struct Cand {
    double d;
    std::size_t i, j;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (a[i].class_id != b[j].class_id) continue;
      const double d = norm(a[i].centroid - b[j].centroid);
      if (d <= radius) cands.push_back({d, i, j});
    }
  }
  std::sort(cands.begin(), cands.end(),
            [](const Cand& x, const Cand& y) { return std::tie(x.d, x.i, x.j) < std::tie(y.d, y.i, y.j); });
  std::vector<bool> used_a(a.size()), used_b(b.size());
  MatchResult r;
  for (const Cand& c : cands) {
    if (used_a[c.i] || used_b[c.j]) continue;
    used_a[c.i] = used_b[c.j] = true;
    r.pairs.emplace_back(c.i, c.j);
  }
  r.matched = r.pairs.size();
  return r;
}

/// Team detection F1 of `recon` against `orig`; 1 when both are empty.
inline double detection_f1(std::span<const Detection> orig, std::span<const Detection> recon,
                           double radius = kMatchRadius) {
  if (orig.empty() && recon.empty()) return 1.0;
  const double tp = static_cast<double>(greedy_match(orig, recon, radius).matched);
  return 2.0 * tp / static_cast<double>(orig.size() + recon.size());
}

/// 1 - F1 of greedy centroid matching.
inline double semantic_distortion(std::span<const Detection> orig, std::span<const Detection> recon,
                                  double radius = kMatchRadius) {
  return 1.0 - detection_f1(orig, recon, radius);
}

// ---------------------------------------------------------------------------
// Codebook, embeddings and latent summaries

inline constexpr std::size_t kEmbeddingDim = 512;
inline constexpr int kClassBins = 8;
inline constexpr int kCoarseCells = 4;  // per axis
inline constexpr std::size_t kHistogramBins = kClassBins * kCoarseCells * kCoarseCells * kCoarseCells;

struct Codebook {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim, row-major

  std::span<const double> centroid(std::size_t i) const { return {centroids.data() + i * dim, dim}; }
  std::span<double> centroid(std::size_t i) { return {centroids.data() + i * dim, dim}; }
  void validate() const {
    if (k == 0 || dim == 0 || centroids.size() != k * dim) throw InvalidArgument("malformed codebook");
    for (double v : centroids) {
      if (!std::isfinite(v)) throw NumericError("codebook centroid is not finite");
    }
  }
  friend bool operator==(const Codebook&, const Codebook&) = default;
};

/// Nearest centroid by Euclidean distance; ties go to the lowest index.
inline std::size_t quantize(std::span<const double> embedding, const Codebook& cb) {
  if (embedding.size() != cb.dim) throw InvalidArgument("embedding dimension does not match the codebook");
  if (cb.k == 0) throw InvalidArgument("empty codebook");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cb.k; ++i) {
    const auto c = cb.centroid(i);
    double d = 0.0;
    for (std::size_t j = 0; j < cb.dim; ++j) d += (embedding[j] - c[j]) * (embedding[j] - c[j]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

/// Canonical token histogram over (class mod kClassBins) x coarse grid cells. Each
/// token spreads unit weight over neighbouring cells by trilinear weights so the
/// histogram moves continuously with position.
inline std::vector<double> token_histogram(std::span<const SemanticToken> tokens, const radiance::GridDims& dims) {
  std::vector<double> h(kHistogramBins, 0.0);
  std::vector<SemanticToken> sorted(tokens.begin(), tokens.end());
  std::sort(sorted.begin(), sorted.end());
  for (const SemanticToken& t : sorted) {
    const Vec3 p = t.position();
    std::array<int, 3> lo{};
    std::array<double, 3> f{};
    for (int a = 0; a < 3; ++a) {
      const double u = std::clamp(p[static_cast<std::size_t>(a)] / dims.extent(a) * kCoarseCells - 0.5, 0.0,
                                  static_cast<double>(kCoarseCells - 1));
      lo[static_cast<std::size_t>(a)] = std::min(static_cast<int>(std::floor(u)), kCoarseCells - 2);
      f[static_cast<std::size_t>(a)] = u - lo[static_cast<std::size_t>(a)];
    }
    const std::size_t cls = t.class_id % kClassBins;
    for (int c = 0; c < 8; ++c) {
      const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
      const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
      const std::size_t cell = static_cast<std::size_t>(lo[0] + dx) +
                               kCoarseCells * (static_cast<std::size_t>(lo[1] + dy) +
                                               kCoarseCells * static_cast<std::size_t>(lo[2] + dz));
      h[cls * kCoarseCells * kCoarseCells * kCoarseCells + cell] += w;
    }
  }
  return h;
}

inline constexpr std::uint64_t kEmbeddingSeed = 0x51a7e5eedULL;

/// Seeded Gaussian random projection shared by every drone.
class EmbeddingProjection {
 public:
  explicit EmbeddingProjection(std::uint64_t seed = kEmbeddingSeed, std::size_t dim = kEmbeddingDim)
      : dim_(dim), matrix_(dim * kHistogramBins) {
    Rng rng(mix64(seed));
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& v : matrix_) v = gaussian(rng) * scale;
  }
  std::size_t dim() const { return dim_; }
  std::vector<double> apply(std::span<const double> histogram) const {
    if (histogram.size() != kHistogramBins) throw InvalidArgument("histogram has the wrong size");
    std::vector<double> e(dim_, 0.0);
    for (std::size_t b = 0; b < kHistogramBins; ++b) {
      if (histogram[b] == 0.0) continue;
      for (std::size_t i = 0; i < dim_; ++i) e[i] += matrix_[b * dim_ + i] * histogram[b];
    }
    return e;
  }

 private:
  std::size_t dim_;
  std::vector<double> matrix_;  // bins x dim
};

inline const EmbeddingProjection& default_projection() {
  static const EmbeddingProjection p;
  return p;
}

inline std::vector<double> embed_tokens(std::span<const SemanticToken> tokens, const radiance::GridDims& dims,
                                        const EmbeddingProjection& proj = default_projection()) {
  return proj.apply(token_histogram(tokens, dims));
}

/// K centroids at the embeddings of K seeded distinct single-bin histograms.
inline Codebook init_codebook(std::size_t k, std::uint64_t seed, const EmbeddingProjection& proj = default_projection()) {
  if (k == 0 || k > kHistogramBins) throw InvalidArgument("codebook size must lie in [1, histogram bins]");
  std::vector<std::size_t> bins(kHistogramBins);
  std::iota(bins.begin(), bins.end(), 0);
  Rng rng(mix64(seed ^ 0xc0deb00cULL));
  shuffle(bins, rng);
  Codebook cb{k, proj.dim(), {}};
  cb.centroids.reserve(k * proj.dim());
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> h(kHistogramBins, 0.0);
    h[bins[i]] = 1.0;
    const auto e = proj.apply(h);
    cb.centroids.insert(cb.centroids.end(), e.begin(), e.end());
  }
  return cb;
}

inline constexpr std::size_t kSummaryStages = 16;
inline constexpr double kSummaryCoefScale = 1024.0;
inline constexpr std::size_t kSummaryBudget = 2048;

struct SummaryTerm {
  std::uint16_t index = 0;
  std::int16_t coef_q = 0;
  friend bool operator==(const SummaryTerm&, const SummaryTerm&) = default;
};

struct LatentSummary {
  std::vector<SummaryTerm> terms;

  std::vector<std::size_t> code_indices() const {
    std::vector<std::size_t> v;
    for (const auto& t : terms) v.push_back(t.index);
    return v;
  }
  std::vector<std::uint8_t> encode() const {
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(terms.size()));
    for (const auto& t : terms) {
      w.u16(t.index);
      w.i16(t.coef_q);
    }
    return w.take();
  }
  std::size_t byte_size() const { return 2 + 4 * terms.size(); }
  friend bool operator==(const LatentSummary&, const LatentSummary&) = default;
};

/// Matching pursuit of the token embedding over unit-normalized codebook
/// centroids, kSummaryStages terms with fixed-point coefficients.
inline LatentSummary summarize_embedding(std::span<const double> embedding, const Codebook& cb) {
  cb.validate();
  if (embedding.size() != cb.dim) throw InvalidArgument("embedding dimension does not match the codebook");
  if (cb.k > 0xFFFF) throw InvalidArgument("codebook too large for 16-bit indices");
  std::vector<double> unit(cb.centroids.size());
  for (std::size_t i = 0; i < cb.k; ++i) {
    const auto c = cb.centroid(i);
    double n = 0.0;
    for (double v : c) n += v * v;
    n = std::sqrt(n);
    for (std::size_t j = 0; j < cb.dim; ++j) unit[i * cb.dim + j] = n > 0.0 ? c[j] / n : 0.0;
  }
  std::vector<double> r(embedding.begin(), embedding.end());
  LatentSummary s;
  for (std::size_t stage = 0; stage < kSummaryStages; ++stage) {
    std::size_t best = 0;
    double best_abs = -1.0, best_dot = 0.0;
    for (std::size_t i = 0; i < cb.k; ++i) {
      double d = 0.0;
      for (std::size_t j = 0; j < cb.dim; ++j) d += r[j] * unit[i * cb.dim + j];
      if (std::abs(d) > best_abs) {
        best_abs = std::abs(d);
        best_dot = d;
        best = i;
      }
    }
    const double q = std::clamp(std::round(best_dot * kSummaryCoefScale), -32768.0, 32767.0);
    s.terms.push_back({static_cast<std::uint16_t>(best), static_cast<std::int16_t>(q)});
    const double coef = q / kSummaryCoefScale;
    for (std::size_t j = 0; j < cb.dim; ++j) r[j] -= coef * unit[best * cb.dim + j];
  }
  return s;
}

inline LatentSummary summarize_view(std::span<const SemanticToken> tokens, const Codebook& cb,
                                    const radiance::GridDims& dims) {
  return summarize_embedding(embed_tokens(tokens, dims), cb);
}

/// Receiver-side approximation of the summarized embedding.
inline std::vector<double> reconstruct_embedding(const LatentSummary& s, const Codebook& cb) {
  cb.validate();
  std::vector<double> e(cb.dim, 0.0);
  for (const SummaryTerm& t : s.terms) {
    if (t.index >= cb.k) throw InvalidArgument("summary references a centroid outside the codebook");
    const auto c = cb.centroid(t.index);
    double n = 0.0;
    for (double v : c) n += v * v;
    n = std::sqrt(n);
    if (n == 0.0) continue;
    const double coef = t.coef_q / kSummaryCoefScale / n;
    for (std::size_t j = 0; j < cb.dim; ++j) e[j] += coef * c[j];
  }
  return e;
}

// ---------------------------------------------------------------------------
// Goal-conditioned filtering

struct RelevanceTable {
  std::map<std::uint16_t, std::map<std::uint16_t, double>> weights;  // goal -> class -> weight

  bool knows(std::uint16_t goal) const { return weights.count(goal) > 0; }
  double weight(std::uint16_t goal, std::uint16_t cls) const {
    const auto g = weights.find(goal);
    if (g == weights.end()) return 0.0;
    const auto c = g->second.find(cls);
    return c == g->second.end() ? 0.0 : c->second;
  }
  void validate() const {
    for (const auto& [g, row] : weights) {
      for (const auto& [c, w] : row) {
        if (!(w >= 0.0 && w <= 1.0)) throw InvalidArgument("relevance weights must lie in [0,1]");
      }
    }
  }
};

struct FilterResult {
  std::vector<SemanticToken> tokens;
  bool unknown_goal = false;
};

/// Keeps tokens with relevance >= threshold, ordered by descending weight then
/// canonical order. An unknown goal passes every token through, flagged.
inline FilterResult filter_by_goal(std::span<const SemanticToken> tokens, std::uint16_t goal,
                                   const RelevanceTable& table, double threshold = kRelevanceThreshold) {
  table.validate();
  FilterResult r;
  if (!table.knows(goal)) {
    r.tokens.assign(tokens.begin(), tokens.end());
    std::sort(r.tokens.begin(), r.tokens.end());
    r.unknown_goal = true;
    return r;
  }
  for (const auto& t : tokens) {
    if (table.weight(goal, t.class_id) >= threshold) r.tokens.push_back(t);
  }
  std::sort(r.tokens.begin(), r.tokens.end(), [&](const SemanticToken& a, const SemanticToken& b) {
    const double wa = table.weight(goal, a.class_id), wb = table.weight(goal, b.class_id);
    if (wa != wb) return wa > wb;
    return a < b;
  });
  return r;
}

}  // namespace swarmsynth::semantics
