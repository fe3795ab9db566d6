#include <gtest/gtest.h>

#include "swarmsynth/coding.hpp"

using namespace swarmsynth;
using namespace swarmsynth::coding;

namespace {

JointHistogram random_histogram(Rng& rng) {
  JointHistogram h(1 + uniform_index(rng, 5), 1 + uniform_index(rng, 5));
  for (auto& c : h.counts) c = uniform01(rng) < 0.3 ? 0 : uniform_index(rng, 1000);
  if (h.total() == 0) h.counts[0] = 1;
  return h;
}

// Wilson-Hilferty upper quantile of chi-square with k degrees of freedom.
double chi_square_critical(double k, double z) {
  const double a = 2.0 / (9.0 * k);
  return k * std::pow(1.0 - a + z * std::sqrt(a), 3);
}

double chi_square_statistic(const BinningCode& code, std::uint64_t draws, Rng& rng) {
  std::vector<double> occ(code.bin_count(), 0.0);
  std::vector<int> b(static_cast<std::size_t>(code.block_length));
  for (std::uint64_t i = 0; i < draws; ++i) {
    for (int& s : b) s = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(code.alphabet)));
    occ[wz_encode(b, code)] += 1;
  }
  const double e = static_cast<double>(draws) / static_cast<double>(occ.size());
  double chi = 0;
  for (double o : occ) chi += (o - e) * (o - e) / e;
  return chi;
}

// Maximum-likelihood bin member by scanning the whole block space.
double brute_force_best(std::uint64_t bin, std::span<const int> y, const BinningCode& code, const JointHistogram& law) {
  const auto space = static_cast<std::uint64_t>(std::llround(std::pow(code.alphabet, code.block_length)));
  double best = -std::numeric_limits<double>::infinity();
  const double n = static_cast<double>(law.total());
  for (std::uint64_t v = 0; v < space; ++v) {
    std::vector<int> x(static_cast<std::size_t>(code.block_length));
    std::uint64_t u = v;
    for (int& s : x) {
      s = static_cast<int>(u % static_cast<std::uint64_t>(code.alphabet));
      u /= static_cast<std::uint64_t>(code.alphabet);
    }
    if (wz_encode(x, code) != bin) continue;
    double ll = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto c = law.at(static_cast<std::size_t>(x[i]), static_cast<std::size_t>(y[i]));
      ll += c == 0 ? -std::numeric_limits<double>::infinity() : std::log(c / n);
    }
    best = std::max(best, ll);
  }
  return best;
}

}  // namespace

TEST(Entropy, PerfectlyCorrelatedAndIndependent) {
  JointHistogram d(2, 2);
  d.at(0, 0) = d.at(1, 1) = 50;
  const EntropyReport e = empirical_entropies(d);
  EXPECT_NEAR(e.H_X, 1.0, 1e-12);
  EXPECT_NEAR(e.H_Y, 1.0, 1e-12);
  EXPECT_NEAR(e.H_X_given_Y, 0.0, 1e-12);
  EXPECT_NEAR(e.H_XY, 1.0, 1e-12);
  EXPECT_NEAR(e.I_XY, 1.0, 1e-12);
  JointHistogram u(2, 2);
  u.counts = {7, 7, 7, 7};
  const EntropyReport f = empirical_entropies(u);
  EXPECT_NEAR(f.H_X_given_Y, 1.0, 1e-12);
  EXPECT_NEAR(f.H_XY, 2.0, 1e-12);
  EXPECT_NEAR(f.I_XY, 0.0, 1e-12);
  EXPECT_THROW(empirical_entropies(JointHistogram(2, 2)), InvalidArgument);
}

TEST(Entropy, DoublySymmetricSourceMatchesBinaryEntropy) {
  const EntropyReport e = empirical_entropies(JointHistogram::dsbs(0.11, 100000000));
  const double h = -0.11 * std::log2(0.11) - 0.89 * std::log2(0.89);
  EXPECT_NEAR(e.H_X_given_Y, h, 1e-9);
  EXPECT_NEAR(h, 0.4999, 1e-4);
}

TEST(Entropy, ChainRuleAndNonNegativeInformation) {
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const EntropyReport e = empirical_entropies(random_histogram(rng));
    EXPECT_NEAR(e.H_XY, e.H_X + e.H_Y_given_X, 1e-9);
    EXPECT_NEAR(e.H_XY, e.H_Y + e.H_X_given_Y, 1e-9);
    EXPECT_GE(e.H_X_given_Y, 0.0);
    EXPECT_LE(e.H_X_given_Y, e.H_X + 1e-12);
    EXPECT_GE(e.I_XY, -1e-12);
    EXPECT_NEAR(e.I_XY, e.H_X - e.H_X_given_Y, 1e-12);
  }
}

TEST(Entropy, FromSamples) {
  const std::vector<int> x{0, 1, 1, 2}, y{0, 0, 1, 1};
  const JointHistogram h = JointHistogram::from_samples(x, y, 3, 2);
  EXPECT_EQ(h.total(), 4u);
  EXPECT_EQ(h.at(1, 0), 1u);
  EXPECT_EQ(h.at(2, 1), 1u);
  EXPECT_THROW(JointHistogram::from_samples(x, std::vector<int>{0}, 3, 2), InvalidArgument);
  EXPECT_THROW(JointHistogram::from_samples(std::vector<int>{3}, std::vector<int>{0}, 3, 2), InvalidArgument);
}

TEST(SlepianWolf, CornersAndBoundary) {
  const EntropyReport e = empirical_entropies(JointHistogram::dsbs(0.11));
  EXPECT_TRUE(in_slepian_wolf_region(e.H_X, e.H_Y, e).inside);
  EXPECT_TRUE(in_slepian_wolf_region(e.H_X_given_Y, e.H_Y, e).inside);
  const RegionCheck below = in_slepian_wolf_region(e.H_X_given_Y - 0.01, e.H_Y, e);
  EXPECT_FALSE(below.inside);
  ASSERT_FALSE(below.violations.empty());
  EXPECT_EQ(below.violations.front(), "R_X");
  const RegionCheck sum = in_slepian_wolf_region(e.H_X_given_Y + 0.1, e.H_Y_given_X + 0.1, e);
  EXPECT_EQ(sum.violations, std::vector<std::string>{"R_X+R_Y"});
  EXPECT_THROW(in_slepian_wolf_region(-1, 0, e), InvalidArgument);
}

TEST(SlepianWolf, MatchesDirectInequalities) {
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    const EntropyReport e = empirical_entropies(random_histogram(rng));
    const double rx = uniform01(rng) * 3, ry = uniform01(rng) * 3;
    const bool expect = rx >= e.H_X_given_Y - 1e-9 && ry >= e.H_Y_given_X - 1e-9 && rx + ry >= e.H_XY - 1e-9;
    EXPECT_EQ(in_slepian_wolf_region(rx, ry, e).inside, expect);
  }
}

TEST(Binning, EncodeDeterministicAndInRange) {
  Rng rng(3);
  for (const auto& [A, L, R] : std::vector<std::tuple<int, int, double>>{{2, 16, 0.75}, {2, 8, 0.5}, {3, 10, 1.0}, {2, 30, 0.6}}) {
    const BinningCode code = make_binning_code(A, L, R, 7);
    const BinningCode again = make_binning_code(A, L, R, 7);
    EXPECT_EQ(code.bin_count(), std::uint64_t{1} << std::lround(R * L));
    for (int t = 0; t < 200; ++t) {
      std::vector<int> b(static_cast<std::size_t>(L));
      for (int& s : b) s = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(A)));
      const std::uint64_t bin = wz_encode(b, code);
      EXPECT_EQ(bin, wz_encode(b, code));
      EXPECT_EQ(bin, wz_encode(b, again));
      EXPECT_LT(bin, code.bin_count());
    }
  }
  const BinningCode code = make_binning_code(2, 4, 0.5, 1);
  EXPECT_THROW(wz_encode(std::vector<int>{0, 1}, code), InvalidArgument);
  EXPECT_THROW(wz_encode(std::vector<int>{0, 1, 2, 0}, code), InvalidArgument);
  EXPECT_THROW(make_binning_code(1, 4, 0.5, 1), InvalidArgument);
}

TEST(Binning, OccupancyIsNearUniform) {
  Rng rng(4);
  const double crit = chi_square_critical(255, 2.326);  // upper 1%
  EXPECT_LT(chi_square_statistic(make_binning_code(2, 8, 1.0, 3), 50000, rng), crit);
  // hash bins over a block space large enough that bin sizes are even
  EXPECT_LT(chi_square_statistic(make_binning_code(3, 20, 0.4, 3), 50000, rng), crit);
  EXPECT_LT(chi_square_statistic(make_binning_code(2, 12, 8.0 / 12.0, 3), 50000, rng), crit);
}

TEST(Binning, LinearBinsArePerfectlyBalanced) {
  // full-rank parity checks: every bin holds exactly 2^(L-m) blocks
  const BinningCode code = make_binning_code(2, 12, 0.5, 9);
  ASSERT_EQ(code.kind, BinningKind::kLinear);
  std::vector<int> occ(code.bin_count(), 0);
  for (std::uint64_t v = 0; v < 4096; ++v) {
    std::vector<int> b(12);
    for (int i = 0; i < 12; ++i) b[static_cast<std::size_t>(i)] = static_cast<int>((v >> i) & 1);
    ++occ[wz_encode(b, code)];
  }
  for (int o : occ) EXPECT_EQ(o, 64);
}

TEST(WynerZiv, FullRateAlwaysExact) {
  Rng rng(5);
  for (int A : {2, 4}) {
    const BinningCode code = make_binning_code(A, 8, std::log2(A), 1);
    EXPECT_EQ(code.kind, BinningKind::kIdentity);
    JointHistogram law(static_cast<std::size_t>(A), static_cast<std::size_t>(A));
    for (auto& c : law.counts) c = 1 + uniform_index(rng, 9);
    for (int t = 0; t < 200; ++t) {
      std::vector<int> x(8), y(8);
      for (int& s : x) s = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(A)));
      for (int& s : y) s = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(A)));
      const WzDecodeResult r = wz_decode(wz_encode(x, code), y, code, law);
      ASSERT_TRUE(r.ok);
      EXPECT_EQ(r.block, x);
    }
  }
}

TEST(WynerZiv, AchievabilityAndConverseOnBinarySource) {
  const BinningCode above = make_binning_code(2, 16, 0.75, 1), below = make_binning_code(2, 16, 0.25, 1);
  EXPECT_LE(dsbs_block_errors(above, 0.11, 10000, 1).rate(), 0.05);
  EXPECT_GE(dsbs_block_errors(below, 0.11, 10000, 2).rate(), 0.50);
}

TEST(WynerZiv, RateMarginGateAcrossCrossovers) {
  for (double p : {0.02, 0.05, 0.08, 0.11, 0.15, 0.2}) {
    const double rate = binary_entropy(p) + 0.25;
    const BinningCode code = make_binning_code(2, 16, rate, 11);
    EXPECT_LE(dsbs_block_errors(code, p, 10000, 3).rate(), 0.05) << p;
  }
}

TEST(WynerZiv, BestFirstSearchIsMaximumLikelihood) {
  Rng rng(6);
  // binary beyond the exhaustive cap
  const BinningCode bin = make_binning_code(2, 18, 0.6, 2);
  const JointHistogram dsbs = JointHistogram::dsbs(0.1);
  for (int t = 0; t < 4; ++t) {
    const CorrelatedBlocks b = dsbs_blocks(18, 0.1, rng);
    const std::uint64_t s = wz_encode(b.x, bin);
    const WzDecodeResult r = wz_decode(s, b.y, bin, dsbs);
    ASSERT_TRUE(r.ok);
    EXPECT_EQ(wz_encode(r.block, bin), s);
    EXPECT_NEAR(r.log_likelihood, brute_force_best(s, b.y, bin, dsbs), 1e-9);
  }
  // ternary hash bins, block space above the exhaustive cap
  const BinningCode tern = make_binning_code(3, 12, 1.0, 4);
  ASSERT_EQ(tern.kind, BinningKind::kHash);
  JointHistogram law(3, 3);
  law.counts = {80, 15, 5, 10, 80, 10, 5, 15, 80};
  for (int t = 0; t < 3; ++t) {
    std::vector<int> x(12), y(12);
    for (std::size_t i = 0; i < 12; ++i) {
      x[i] = static_cast<int>(uniform_index(rng, 3));
      y[i] = uniform01(rng) < 0.8 ? x[i] : static_cast<int>(uniform_index(rng, 3));
    }
    const std::uint64_t s = wz_encode(x, tern);
    const WzDecodeResult r = wz_decode(s, y, tern, law);
    ASSERT_TRUE(r.ok);
    EXPECT_EQ(wz_encode(r.block, tern), s);
    EXPECT_NEAR(r.log_likelihood, brute_force_best(s, y, tern, law), 1e-9);
  }
}

TEST(WynerZiv, FailureIsAValue) {
  const BinningCode code = make_binning_code(2, 8, 0.5, 1);
  const std::vector<int> x{0, 1, 1, 0, 1, 0, 0, 1};
  // floor above any attainable likelihood
  const WzDecodeResult r = wz_decode(wz_encode(x, code), x, code, JointHistogram::dsbs(0.1), 0.0);
  EXPECT_FALSE(r.ok);
  // a law in which x = 1 never occurs cannot explain a bin holding only mixed blocks
  JointHistogram law(2, 2);
  law.at(0, 0) = law.at(0, 1) = 5;
  const BinningCode big = make_binning_code(2, 20, 0.5, 1);
  std::vector<int> ones(20, 1), y(20, 0);
  EXPECT_FALSE(wz_decode(wz_encode(ones, big), y, big, law).ok);
  EXPECT_THROW(wz_decode(code.bin_count(), x, code, JointHistogram::dsbs(0.1)), InvalidArgument);
  EXPECT_THROW(wz_decode(0, std::vector<int>{0}, code, JointHistogram::dsbs(0.1)), InvalidArgument);
}

TEST(Hyperdimensional, DeterministicBipolarAndNearlyOrthogonal) {
  const HdDictionary d(26, kDefaultHdDimension, 5);
  const HdDictionary e(26, kDefaultHdDimension, 5);
  const double bound = 5.0 / std::sqrt(static_cast<double>(d.dim()));
  for (std::size_t s = 0; s < d.size(); ++s) {
    EXPECT_EQ(hd_encode(s, d), hd_encode(s, e));
    for (auto v : hd_encode(s, d)) EXPECT_TRUE(v == 1 || v == -1);
    for (std::size_t t = s + 1; t < d.size(); ++t) {
      EXPECT_LE(std::abs(HdDictionary::correlation(d.vector(s), d.vector(t))), bound);
    }
    const HdDecodeResult r = hd_decode(d.vector(s), d);
    EXPECT_EQ(r.symbol, s);
    EXPECT_GT(r.margin, 1.0 - bound);
    EXPECT_LE(r.margin, 1.0 + bound);
  }
  // a vector depends only on (seed, symbol)
  EXPECT_EQ(HdDictionary(3, 500, 5).vector(2), HdDictionary(8, 500, 5).vector(2));
  EXPECT_THROW(hd_encode(26, d), InvalidArgument);
  EXPECT_THROW(hd_decode(std::vector<std::int8_t>(10, 1), d), InvalidArgument);
}

TEST(Hyperdimensional, RobustToTwentyPercentFlips) {
  const HdDictionary d(26, kDefaultHdDimension, 6);
  EXPECT_GE(hd_accuracy(d, 0.2, 10000, 1), 0.999);
}

TEST(Hyperdimensional, HalfFlippedIsChance) {
  const HdDictionary d(26, kDefaultHdDimension, 7);
  const double n = 10000, p0 = 1.0 / 26;
  EXPECT_NEAR(hd_accuracy(d, 0.5, 10000, 2), p0, 4 * std::sqrt(p0 * (1 - p0) / n));
}

TEST(Hyperdimensional, AccuracyNonIncreasingInFlipFraction) {
  const HdDictionary d(26, 2000, 8);
  double prev = 1.0;
  for (double f : {0.0, 0.2, 0.4, 0.45, 0.48, 0.5}) {
    const double a = hd_accuracy(d, f, 2000, 3);
    EXPECT_LE(a, prev + 0.01) << f;
    prev = a;
  }
}

TEST(Hyperdimensional, FlipsAreIndependent) {
  Rng rng(9);
  const HdDictionary d(1, 100000, 1);
  const auto v = flip_fraction(d.vector(0), 0.2, rng);
  double diff = 0;
  for (std::size_t i = 0; i < v.size(); ++i) diff += v[i] != d.vector(0)[i];
  EXPECT_NEAR(diff / 100000, 0.2, 4 * std::sqrt(0.2 * 0.8 / 100000));
  EXPECT_EQ(flip_fraction(d.vector(0), 0.0, rng), d.vector(0));
}
