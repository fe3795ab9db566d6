#pragma once

// Empirical entropies, Slepian-Wolf region checks, a binning codec decoded with
// side information, and hyperdimensional symbol coding.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "swarmsynth/core.hpp"

namespace swarmsynth::coding {

// ---------------------------------------------------------------------------
// Histograms and entropies

struct JointHistogram {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::vector<std::uint64_t> counts;  // nx x ny, row-major in x

  JointHistogram() = default;
  JointHistogram(std::size_t x, std::size_t y) : nx(x), ny(y), counts(x * y, 0) {
    if (x == 0 || y == 0) throw InvalidArgument("alphabets must be non-empty");
  }

  std::uint64_t& at(std::size_t x, std::size_t y) { return counts[x * ny + y]; }
  std::uint64_t at(std::size_t x, std::size_t y) const { return counts[x * ny + y]; }
  void add(std::size_t x, std::size_t y, std::uint64_t n = 1) {
    if (x >= nx || y >= ny) throw InvalidArgument("symbol outside the alphabet");
    at(x, y) += n;
  }
  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  double probability(std::size_t x, std::size_t y) const {
    return static_cast<double>(at(x, y)) / static_cast<double>(total());
  }

  static JointHistogram from_samples(std::span<const int> xs, std::span<const int> ys, std::size_t nx,
                                     std::size_t ny) {
    if (xs.size() != ys.size()) throw InvalidArgument("sample sequences differ in length");
    JointHistogram h(nx, ny);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (xs[i] < 0 || ys[i] < 0) throw InvalidArgument("negative symbol");
      h.add(static_cast<std::size_t>(xs[i]), static_cast<std::size_t>(ys[i]));
    }
    return h;
  }

  /// Doubly symmetric binary source with crossover p, as integer counts over `scale`.
  static JointHistogram dsbs(double p, std::uint64_t scale = 1000000) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("crossover must lie in [0,1]");
    JointHistogram h(2, 2);
    const auto same = static_cast<std::uint64_t>(std::llround((1.0 - p) * 0.5 * static_cast<double>(scale)));
    const auto diff = static_cast<std::uint64_t>(std::llround(p * 0.5 * static_cast<double>(scale)));
    h.at(0, 0) = h.at(1, 1) = same;
    h.at(0, 1) = h.at(1, 0) = diff;
    return h;
  }
};

struct EntropyReport {
  double H_X = 0, H_Y = 0, H_X_given_Y = 0, H_Y_given_X = 0, H_XY = 0, I_XY = 0;
};

inline double binary_entropy(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

/// Plug-in entropies in bits, 0 log 0 = 0.
inline EntropyReport empirical_entropies(const JointHistogram& h) {
  const std::uint64_t n = h.total();
  if (n == 0) throw InvalidArgument("histogram is empty");
  const double N = static_cast<double>(n);
  std::vector<std::uint64_t> px(h.nx, 0), py(h.ny, 0);
  for (std::size_t x = 0; x < h.nx; ++x) {
    for (std::size_t y = 0; y < h.ny; ++y) {
      px[x] += h.at(x, y);
      py[y] += h.at(x, y);
    }
  }
  const auto term = [&](std::uint64_t c) {
    if (c == 0) return 0.0;
    const double p = static_cast<double>(c) / N;
    return -p * std::log2(p);
  };
  CompensatedSum hx, hy, hxy;
  for (auto c : px) hx.add(term(c));
  for (auto c : py) hy.add(term(c));
  for (auto c : h.counts) hxy.add(term(c));
  EntropyReport r;
  r.H_X = hx.value();
  r.H_Y = hy.value();
  r.H_XY = hxy.value();
  r.H_X_given_Y = std::clamp(r.H_XY - r.H_Y, 0.0, r.H_X);
  r.H_Y_given_X = std::clamp(r.H_XY - r.H_X, 0.0, r.H_Y);
  r.I_XY = r.H_X - r.H_X_given_Y;
  return r;
}

struct RegionCheck {
  bool inside = true;
  std::vector<std::string> violations;  // subset of "R_X", "R_Y", "R_X+R_Y"
};

inline RegionCheck in_slepian_wolf_region(double rx, double ry, const EntropyReport& e, double tol = 1e-9) {
  if (rx < 0.0 || ry < 0.0) throw InvalidArgument("rates must be non-negative");
  RegionCheck r;
  if (rx < e.H_X_given_Y - tol) r.violations.push_back("R_X");
  if (ry < e.H_Y_given_X - tol) r.violations.push_back("R_Y");
  if (rx + ry < e.H_XY - tol) r.violations.push_back("R_X+R_Y");
  r.inside = r.violations.empty();
  return r;
}

// ---------------------------------------------------------------------------
// Binning codec

enum class BinningKind {
  kIdentity,  // rate covers the whole block space: one block per bin
  kLinear,    // binary syndrome of a systematic parity-check matrix
  kHash,      // seeded multiply-shift over the packed block
};

inline constexpr int kMaxLinearBlock = 64;
inline constexpr int kExhaustiveBits = 16;

struct BinningCode {
  int alphabet = 2;
  int block_length = 0;
  double rate = 0.0;
  std::uint64_t seed = 0;
  BinningKind kind = BinningKind::kHash;
  int index_bits = 0;          // bins = 2^index_bits
  std::vector<std::uint64_t> parity;  // kLinear: row r is a bitmask over the block
  std::uint64_t hash_multiplier = 0;

  std::uint64_t bin_count() const { return std::uint64_t{1} << index_bits; }
  double block_space_bits() const { return block_length * std::log2(static_cast<double>(alphabet)); }
};

namespace detail {

inline std::uint64_t syndrome(std::uint64_t x, std::span<const std::uint64_t> rows) {
  std::uint64_t s = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) s |= static_cast<std::uint64_t>(std::popcount(x & rows[r]) & 1) << r;
  return s;
}

/// Number of coset leaders of each weight: the probability of correct
/// minimum-distance decoding on a BSC(p) is sum_w a_w p^w (1-p)^(n-w).
inline std::vector<std::uint64_t> coset_leader_profile(int n, std::span<const std::uint64_t> rows) {
  std::vector<std::uint8_t> seen(std::size_t{1} << rows.size(), 0);
  std::vector<std::uint64_t> profile(static_cast<std::size_t>(n) + 1, 0);
  std::uint64_t remaining = seen.size();
  // visit error patterns in increasing weight
  for (int w = 0; w <= n && remaining > 0; ++w) {
    if (w == 0) {
      seen[0] = 1;
      profile[0] = 1;
      --remaining;
      continue;
    }
    std::uint64_t e = (std::uint64_t{1} << w) - 1;
    const std::uint64_t limit = std::uint64_t{1} << n;
    while (e < limit) {
      const std::uint64_t s = syndrome(e, rows);
      if (!seen[s]) {
        seen[s] = 1;
        ++profile[static_cast<std::size_t>(w)];
        if (--remaining == 0) break;
      }
      const std::uint64_t c = e & (~e + 1), r = e + c;  // next pattern with the same weight
      e = (((r ^ e) >> 2) / c) | r;
    }
  }
  return profile;
}

/// Systematic parity checks [A | I_m]: full rank, so every syndrome is hit by
/// exactly 2^(n-m) blocks. Among seeded candidates keep the one with the best
/// coset-leader profile (lexicographically more low-weight leaders).
inline std::vector<std::uint64_t> design_parity(int n, int m, std::uint64_t seed, int candidates) {
  const int k = n - m;
  std::vector<std::uint64_t> best;
  std::vector<std::uint64_t> best_profile;
  Rng rng(mix64(seed ^ 0x5eed5eedULL));
  const int tries = (k == 0 || n > kExhaustiveBits) ? 1 : candidates;
  for (int c = 0; c < tries; ++c) {
    std::vector<std::uint64_t> rows(static_cast<std::size_t>(m));
    for (int r = 0; r < m; ++r) {
      const std::uint64_t a = k == 0 ? 0 : (rng() & ((std::uint64_t{1} << k) - 1));
      rows[static_cast<std::size_t>(r)] = a | (std::uint64_t{1} << (k + r));
    }
    if (tries == 1) return rows;
    const auto prof = coset_leader_profile(n, rows);
    if (best.empty() || std::lexicographical_compare(best_profile.begin(), best_profile.end(), prof.begin(),
                                                     prof.end())) {
      best = rows;
      best_profile = prof;
    }
  }
  return best;
}

inline std::uint64_t pack(std::span<const int> block, int alphabet) {
  std::uint64_t v = 0;
  for (std::size_t i = block.size(); i-- > 0;) v = v * static_cast<std::uint64_t>(alphabet) + static_cast<std::uint64_t>(block[i]);
  return v;
}

inline std::vector<int> unpack(std::uint64_t v, int alphabet, int length) {
  std::vector<int> b(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) {
    b[static_cast<std::size_t>(i)] = static_cast<int>(v % static_cast<std::uint64_t>(alphabet));
    v /= static_cast<std::uint64_t>(alphabet);
  }
  return b;
}

}  // namespace detail

inline constexpr int kCodeCandidates = 1024;

/// bins = 2^round(R L), capped at the block space. Binary alphabets use linear
/// syndrome bins; larger alphabets a seeded hash.
inline BinningCode make_binning_code(int alphabet, int block_length, double rate, std::uint64_t seed,
                                     int candidates = kCodeCandidates) {
  if (alphabet < 2) throw InvalidArgument("alphabet must have at least two symbols");
  if (block_length < 1) throw InvalidArgument("block length must be >= 1");
  if (!(rate >= 0.0) || !std::isfinite(rate)) throw InvalidArgument("rate must be finite and non-negative");
  BinningCode c;
  c.alphabet = alphabet;
  c.block_length = block_length;
  c.rate = rate;
  c.seed = seed;
  const double space = c.block_space_bits();
  if (space > 63.0) throw InvalidArgument("block space exceeds 63 bits");
  const int bits = static_cast<int>(std::lround(rate * block_length));
  const bool power_of_two = std::has_single_bit(static_cast<unsigned>(alphabet));
  if (power_of_two && bits >= static_cast<int>(std::lround(space))) {
    c.kind = BinningKind::kIdentity;
    c.index_bits = static_cast<int>(std::lround(space));
    return c;
  }
  if (!power_of_two && std::ldexp(1.0, bits) >= std::pow(alphabet, block_length)) {
    throw InvalidArgument("rate at or above the block space needs a power-of-two alphabet");
  }
  c.index_bits = bits;
  if (alphabet == 2 && block_length <= kMaxLinearBlock) {
    c.kind = BinningKind::kLinear;
    c.parity = detail::design_parity(block_length, bits, seed, candidates);
  } else {
    c.kind = BinningKind::kHash;
    c.hash_multiplier = mix64(seed) | 1;
  }
  return c;
}

inline void check_block(std::span<const int> block, const BinningCode& code) {
  if (static_cast<int>(block.size()) != code.block_length) throw InvalidArgument("block length does not match the code");
  for (int s : block) {
    if (s < 0 || s >= code.alphabet) throw InvalidArgument("symbol outside the alphabet");
  }
}

inline std::uint64_t bin_of_packed(std::uint64_t packed, const BinningCode& code) {
  switch (code.kind) {
    case BinningKind::kIdentity:
      return packed;
    case BinningKind::kLinear:
      return detail::syndrome(packed, code.parity);
    case BinningKind::kHash:
      return code.index_bits == 0 ? 0 : (mix64(packed ^ code.seed) * code.hash_multiplier) >> (64 - code.index_bits);
  }
  return 0;
}

inline std::uint64_t wz_encode(std::span<const int> block, const BinningCode& code) {
  check_block(block, code);
  return bin_of_packed(detail::pack(block, code.alphabet), code);
}

struct WzDecodeResult {
  bool ok = false;
  std::vector<int> block;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  std::uint64_t candidates = 0;
};

inline constexpr std::uint64_t kDefaultCandidateCap = std::uint64_t{1} << 20;

/// Maximum joint-likelihood block in `bin` given side information `y`.
/// Failure (ok = false) when no member of the bin reaches `log_floor`.
inline WzDecodeResult wz_decode(std::uint64_t bin, std::span<const int> y, const BinningCode& code,
                                const JointHistogram& joint,
                                double log_floor = -std::numeric_limits<double>::max(),
                                std::uint64_t candidate_cap = kDefaultCandidateCap) {
  if (static_cast<int>(y.size()) != code.block_length) throw InvalidArgument("side information length mismatch");
  if (joint.nx != static_cast<std::size_t>(code.alphabet)) throw InvalidArgument("joint law does not match the code");
  if (bin >= code.bin_count()) throw InvalidArgument("bin index out of range");
  const std::uint64_t n = joint.total();
  if (n == 0) throw InvalidArgument("joint law is empty");
  for (int v : y) {
    if (v < 0 || static_cast<std::size_t>(v) >= joint.ny) throw InvalidArgument("side information outside the alphabet");
  }
  const int L = code.block_length, A = code.alphabet;
  // ll[i][x] = log p(x, y_i)
  std::vector<double> ll(static_cast<std::size_t>(L * A));
  for (int i = 0; i < L; ++i) {
    for (int x = 0; x < A; ++x) {
      const auto c = joint.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y[static_cast<std::size_t>(i)]));
      ll[static_cast<std::size_t>(i * A + x)] =
          c == 0 ? -std::numeric_limits<double>::infinity() : std::log(static_cast<double>(c) / static_cast<double>(n));
    }
  }
  const auto score = [&](std::span<const int> b) {
    double s = 0.0;
    for (int i = 0; i < L; ++i) s += ll[static_cast<std::size_t>(i * A + b[static_cast<std::size_t>(i)])];
    return s;
  };
  WzDecodeResult best;
  const auto consider = [&](std::vector<int> b) {
    ++best.candidates;
    const double s = score(b);
    if (s >= log_floor && (!best.ok || s > best.log_likelihood)) {
      best.ok = true;
      best.log_likelihood = s;
      best.block = std::move(b);
    }
  };

  if (code.kind == BinningKind::kIdentity) {
    consider(detail::unpack(bin, A, L));
    return best;
  }
  if (code.kind == BinningKind::kLinear && L <= kExhaustiveBits) {
    // x = [u | p] with p = s xor A u, so the bin is enumerated through u.
    const int k = L - code.index_bits;
    for (std::uint64_t u = 0; u < (std::uint64_t{1} << k); ++u) {
      std::uint64_t x = u;
      for (int r = 0; r < code.index_bits; ++r) {
        const std::uint64_t bit = ((bin >> r) ^ static_cast<std::uint64_t>(std::popcount(code.parity[static_cast<std::size_t>(r)] & u))) & 1;
        x |= bit << (k + r);
      }
      consider(detail::unpack(x, 2, L));
    }
    return best;
  }
  if (code.kind == BinningKind::kHash && code.block_space_bits() <= kExhaustiveBits + 1e-9) {
    const auto space = static_cast<std::uint64_t>(std::llround(std::pow(A, L)));
    for (std::uint64_t v = 0; v < space; ++v) {
      if (bin_of_packed(v, code) == bin) consider(detail::unpack(v, A, L));
    }
    return best;
  }

  // Best-first enumeration in decreasing joint likelihood; the first block in
  // the bin is the maximum-likelihood member.
  std::vector<std::vector<int>> order(static_cast<std::size_t>(L));
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(L));
  for (int i = 0; i < L; ++i) {
    auto& o = order[static_cast<std::size_t>(i)];
    for (int x = 0; x < A; ++x) {
      if (std::isfinite(ll[static_cast<std::size_t>(i * A + x)])) o.push_back(x);
    }
    if (o.empty()) return best;  // y_i never co-occurs with any x
    std::stable_sort(o.begin(), o.end(), [&](int a, int b) {
      return ll[static_cast<std::size_t>(i * A + a)] > ll[static_cast<std::size_t>(i * A + b)];
    });
    for (int x : o) cost[static_cast<std::size_t>(i)].push_back(ll[static_cast<std::size_t>(i * A + o[0])] - ll[static_cast<std::size_t>(i * A + x)]);
  }
  double base = 0.0;
  for (int i = 0; i < L; ++i) base += ll[static_cast<std::size_t>(i * A + order[static_cast<std::size_t>(i)][0])];
  struct State {
    double cost;
    std::vector<int> rank;
    int last;
    bool operator>(const State& o) const { return cost > o.cost; }
  };
  std::priority_queue<State, std::vector<State>, std::greater<>> heap;
  heap.push({0.0, std::vector<int>(static_cast<std::size_t>(L), 0), -1});
  while (!heap.empty() && best.candidates < candidate_cap) {
    State s = heap.top();
    heap.pop();
    if (base - s.cost < log_floor) break;
    std::vector<int> b(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) b[static_cast<std::size_t>(i)] = order[static_cast<std::size_t>(i)][static_cast<std::size_t>(s.rank[static_cast<std::size_t>(i)])];
    ++best.candidates;
    if (wz_encode(b, code) == bin) {
      best.ok = true;
      best.log_likelihood = base - s.cost;
      best.block = std::move(b);
      return best;
    }
    // Children: bump the last changed position, or start a later one.
    const auto push = [&](int pos) {
      State c = s;
      auto& r = c.rank[static_cast<std::size_t>(pos)];
      const auto& cs = cost[static_cast<std::size_t>(pos)];
      if (static_cast<std::size_t>(r + 1) >= cs.size()) return;
      c.cost += cs[static_cast<std::size_t>(r + 1)] - cs[static_cast<std::size_t>(r)];
      ++r;
      c.last = pos;
      heap.push(std::move(c));
    };
    if (s.last >= 0) push(s.last);
    for (int j = s.last + 1; j < L; ++j) push(j);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Doubly symmetric binary source experiments

struct CorrelatedBlocks {
  std::vector<int> x, y;
};

inline CorrelatedBlocks dsbs_blocks(int length, double p, Rng& rng) {
  CorrelatedBlocks b;
  for (int i = 0; i < length; ++i) {
    const int x = static_cast<int>(rng() & 1);
    b.x.push_back(x);
    b.y.push_back(uniform01(rng) < p ? 1 - x : x);
  }
  return b;
}

struct BlockErrorStats {
  std::uint64_t trials = 0;
  std::uint64_t errors = 0;
  std::uint64_t failures = 0;  // decoder returned no candidate
  double rate() const { return trials == 0 ? 0.0 : static_cast<double>(errors) / static_cast<double>(trials); }
};

inline BlockErrorStats dsbs_block_errors(const BinningCode& code, double p, std::uint64_t trials, std::uint64_t seed) {
  const JointHistogram law = JointHistogram::dsbs(p);
  Rng rng(mix64(seed));
  BlockErrorStats st;
  for (std::uint64_t t = 0; t < trials; ++t) {
    const CorrelatedBlocks b = dsbs_blocks(code.block_length, p, rng);
    const WzDecodeResult r = wz_decode(wz_encode(b.x, code), b.y, code, law);
    ++st.trials;
    if (!r.ok) ++st.failures;
    if (!r.ok || r.block != b.x) ++st.errors;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Hyperdimensional coding

inline constexpr std::size_t kDefaultHdDimension = 10000;

class HdDictionary {
 public:
  /// Vectors depend only on (seed, symbol). Throws if two symbols correlate
  /// beyond 5 / sqrt(D).
  HdDictionary(std::size_t symbols, std::size_t dim = kDefaultHdDimension, std::uint64_t seed = 0)
      : dim_(dim), seed_(seed) {
    if (symbols == 0) throw InvalidArgument("dictionary needs at least one symbol");
    if (dim == 0) throw InvalidArgument("dimension must be positive");
    for (std::size_t s = 0; s < symbols; ++s) vectors_.push_back(make_vector(s));
    const double bound = 5.0 / std::sqrt(static_cast<double>(dim));
    for (std::size_t a = 0; a < symbols; ++a) {
      for (std::size_t b = a + 1; b < symbols; ++b) {
        if (std::abs(correlation(vectors_[a], vectors_[b])) > bound) {
          throw NumericError("hyperdimensional vectors exceed the correlation bound");
        }
      }
    }
  }

  std::size_t size() const { return vectors_.size(); }
  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<std::int8_t>& vector(std::size_t symbol) const {
    if (symbol >= vectors_.size()) throw InvalidArgument("unknown symbol");
    return vectors_[symbol];
  }

  static double correlation(std::span<const std::int8_t> a, std::span<const std::int8_t> b) {
    std::int64_t acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return static_cast<double>(acc) / static_cast<double>(a.size());
  }

 private:
  std::vector<std::int8_t> make_vector(std::size_t symbol) const {
    Rng rng(mix64(seed_ ^ mix64(symbol + 0x9d2c5680ULL)));
    std::vector<std::int8_t> v(dim_);
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < dim_; ++i) {
      if (i % 64 == 0) bits = rng();
      v[i] = (bits >> (i % 64)) & 1 ? 1 : -1;
    }
    return v;
  }

  std::size_t dim_;
  std::uint64_t seed_;
  std::vector<std::vector<std::int8_t>> vectors_;
};

inline std::vector<std::int8_t> hd_encode(std::size_t symbol, const HdDictionary& dict) { return dict.vector(symbol); }

struct HdDecodeResult {
  std::size_t symbol = 0;
  double margin = 0.0;  // (best - runner-up) inner product / D
};

inline HdDecodeResult hd_decode(std::span<const std::int8_t> noisy, const HdDictionary& dict) {
  if (noisy.size() != dict.dim()) throw InvalidArgument("vector dimension does not match the dictionary");
  std::int64_t best = std::numeric_limits<std::int64_t>::min(), second = best;
  std::size_t arg = 0;
  for (std::size_t s = 0; s < dict.size(); ++s) {
    const auto& v = dict.vector(s);
    std::int64_t ip = 0;
    for (std::size_t i = 0; i < noisy.size(); ++i) ip += noisy[i] * v[i];
    if (ip > best) {
      second = best;
      best = ip;
      arg = s;
    } else if (ip > second) {
      second = ip;
    }
  }
  HdDecodeResult r{arg, 0.0};
  if (dict.size() > 1) r.margin = static_cast<double>(best - second) / static_cast<double>(dict.dim());
  else r.margin = static_cast<double>(best) / static_cast<double>(dict.dim());
  return r;
}

/// Binary symmetric channel: each entry flips independently with probability `fraction`.
inline std::vector<std::int8_t> flip_fraction(std::span<const std::int8_t> v, double fraction, Rng& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("flip fraction must lie in [0,1]");
  std::vector<std::int8_t> out(v.begin(), v.end());
  for (auto& e : out) {
    if (uniform01(rng) < fraction) e = static_cast<std::int8_t>(-e);
  }
  return out;
}

inline double hd_accuracy(const HdDictionary& dict, double fraction, std::uint64_t trials, std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x4d11ULL));
  std::uint64_t ok = 0;
  for (std::uint64_t t = 0; t < trials; ++t) {
    const std::size_t s = uniform_index(rng, dict.size());
    ok += hd_decode(flip_fraction(dict.vector(s), fraction, rng), dict).symbol == s;
  }
  return static_cast<double>(ok) / static_cast<double>(trials);
}

}  // namespace swarmsynth::coding
