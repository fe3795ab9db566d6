#pragma once

// FedAvg over flat parameter vectors, non-IID client partitioning and
// federated k-means rounds for the semantic codebook.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "swarmsynth/core.hpp"
#include "swarmsynth/generator.hpp"
#include "swarmsynth/semantics.hpp"

namespace swarmsynth::federation {

using generator::LossAndGradient;

struct ClientUpdate {
  int client_id = 0;
  std::vector<double> params;
  std::size_t n_samples = 0;
};

/// Wire size of one parameter vector: float32 per entry.
inline constexpr std::size_t parameter_bytes(std::size_t count) { return 4 * count; }

struct FederationRound {
  int index = 0;
  std::vector<int> participants;
  std::vector<double> before;
  std::vector<double> after;
  std::size_t bytes = 0;  // participants x parameter bytes x 2 (down + up)
};

enum class Optimizer { kGradientDescent, kAdam };

struct LocalConfig {
  double eta = 0.01;
  int epochs = 1;
  std::size_t batch_size = 0;  // 0 = full batch
  Optimizer optimizer = Optimizer::kGradientDescent;

  void validate() const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw InvalidArgument("eta must be finite and non-negative");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  }
};

/// Runs `epochs` passes over a local dataset of `n_samples` items.
/// `loss(params, sample_indices, step_seed)` returns the mean loss over those
/// samples and its gradient. Full batch with plain descent gives exactly
/// theta - eta * grad per epoch. `adam` carries optimizer state across rounds
/// when given.
template <class LossFn>
ClientUpdate local_update(int client_id, std::vector<double> params, std::size_t n_samples, LossFn&& loss,
                          const LocalConfig& cfg, Rng& rng, generator::Adam* adam = nullptr) {
  cfg.validate();
  if (n_samples == 0) throw InvalidArgument("local dataset must be non-empty");
  generator::Adam local_adam;
  local_adam.lr = cfg.eta;
  generator::Adam* opt = adam ? adam : &local_adam;
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = cfg.batch_size == 0 ? n_samples : std::min(cfg.batch_size, n_samples);
  for (int e = 0; e < cfg.epochs; ++e) {
    if (bs < n_samples) shuffle(order, rng);
    for (std::size_t start = 0; start < n_samples; start += bs) {
      const std::size_t end = std::min(n_samples, start + bs);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      if (bs == n_samples) std::sort(batch.begin(), batch.end());
      const std::uint64_t step_seed = rng();
      const LossAndGradient lg = loss(std::span<const double>(params), std::span<const std::size_t>(batch), step_seed);
      if (lg.gradient.size() != params.size()) throw InvalidArgument("gradient length does not match params");
      for (double g : lg.gradient) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in local update");
      }
      if (cfg.optimizer == Optimizer::kAdam) {
        opt->lr = cfg.eta;
        opt->step(params, lg.gradient);
      } else {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.eta * lg.gradient[i];
      }
    }
  }
  return {client_id, std::move(params), n_samples};
}

/// Loss functor over a client's slice of denoiser examples. Sample ids are
/// global so the per-example noise draws do not depend on the partition.
struct DenoiserLoss {
  std::string descriptor;
  std::span<const generator::TrainingExample> examples;
  std::span<const std::uint64_t> ids;
  const generator::NoiseSchedule* schedule = nullptr;
  double p_uncond = generator::kDefaultUncondProbability;
  std::optional<std::uint64_t> noise_seed;  // overrides the per-step seed

  LossAndGradient operator()(std::span<const double> params, std::span<const std::size_t> batch,
                             std::uint64_t seed) const {
    std::vector<generator::TrainingExample> ex;
    std::vector<std::uint64_t> id;
    ex.reserve(batch.size());
    for (std::size_t b : batch) {
      ex.push_back(examples[b]);
      id.push_back(ids[b]);
    }
    generator::DenoiserParams p{descriptor, std::vector<double>(params.begin(), params.end())};
    return generator::batch_training_loss(p, ex, id, *schedule, noise_seed.value_or(seed), p_uncond);
  }
};

/// Weighted mean sum(n_k / n) theta_k. Updates are sorted by client id and
/// summed with compensation so the result is independent of input order.
inline std::vector<double> fedavg(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw InvalidArgument("fedavg needs at least one update");
  std::vector<const ClientUpdate*> sorted;
  for (const auto& u : updates) sorted.push_back(&u);
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  const std::size_t len = sorted.front()->params.size();
  std::size_t n = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i > 0 && sorted[i]->client_id == sorted[i - 1]->client_id) throw InvalidArgument("duplicate client id");
    if (sorted[i]->params.size() != len) throw InvalidArgument("parameter length mismatch");
    if (sorted[i]->n_samples == 0) throw InvalidArgument("client update with zero samples");
    n += sorted[i]->n_samples;
  }
  std::vector<double> out(len);
  const double total = static_cast<double>(n);
  for (std::size_t j = 0; j < len; ++j) {
    CompensatedSum acc;
    for (const ClientUpdate* u : sorted) acc.add(static_cast<double>(u->n_samples) * u->params[j]);
    out[j] = acc.value() / total;
  }
  return out;
}

inline FederationRound make_round(int index, std::span<const ClientUpdate> updates, std::vector<double> before,
                                  std::vector<double> after) {
  FederationRound r;
  r.index = index;
  for (const auto& u : updates) r.participants.push_back(u.client_id);
  std::sort(r.participants.begin(), r.participants.end());
  r.bytes = r.participants.size() * parameter_bytes(before.size()) * 2;
  r.before = std::move(before);
  r.after = std::move(after);
  return r;
}

/// One synchronous FedAvg round: every client starts from `global`.
/// `client_loss(k)` yields client k's loss functor, `client_size(k)` its n_k.
template <class LossFactory, class SizeFn>
FederationRound fedavg_round(int index, const std::vector<double>& global, std::span<const int> clients,
                             LossFactory&& client_loss, SizeFn&& client_size, const LocalConfig& cfg,
                             std::uint64_t seed, std::map<int, generator::Adam>* adam_state = nullptr) {
  std::vector<ClientUpdate> updates;
  for (int k : clients) {
    Rng rng(mix64(seed ^ mix64(static_cast<std::uint64_t>(index) * 7919 + static_cast<std::uint64_t>(k))));
    generator::Adam* adam = adam_state ? &(*adam_state)[k] : nullptr;
    updates.push_back(local_update(k, global, client_size(k), client_loss(k), cfg, rng, adam));
  }
  std::vector<double> after = fedavg(updates);
  return make_round(index, updates, global, std::move(after));
}

// ---------------------------------------------------------------------------
// Non-IID partitioning

/// Splits sample indices among clients. Each class has a dominant client
/// (class rank mod n_clients); a sample goes there with probability `skew`,
/// otherwise to the next client in a round-robin over shuffled samples.
inline std::vector<std::vector<std::size_t>> partition_noniid(std::span<const int> labels, int n_clients, double skew,
                                                              Rng& rng) {
  if (n_clients < 1) throw InvalidArgument("n_clients must be >= 1");
  if (!(skew >= 0.0 && skew <= 1.0)) throw InvalidArgument("skew must lie in [0,1]");
  if (static_cast<std::size_t>(n_clients) > labels.size()) throw InvalidArgument("more clients than samples");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::map<int, std::size_t> dominant;
  for (std::size_t i = 0; i < classes.size(); ++i) dominant[classes[i]] = i % static_cast<std::size_t>(n_clients);

  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> parts(static_cast<std::size_t>(n_clients));
  std::size_t rr = 0;
  for (std::size_t i : order) {
    const bool skewed = skew > 0.0 && (skew >= 1.0 || uniform01(rng) < skew);
    const std::size_t c = skewed ? dominant[labels[i]] : rr++ % static_cast<std::size_t>(n_clients);
    parts[c].push_back(i);
  }
  // No client may end up empty: take from the largest.
  for (auto& p : parts) {
    if (!p.empty()) continue;
    auto largest = std::max_element(parts.begin(), parts.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    p.push_back(largest->back());
    largest->pop_back();
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

inline double modal_class_fraction(std::span<const std::size_t> part, std::span<const int> labels) {
  if (part.empty()) return 0.0;
  std::map<int, std::size_t> counts;
  for (std::size_t i : part) ++counts[labels[i]];
  std::size_t best = 0;
  for (const auto& [c, n] : counts) best = std::max(best, n);
  return static_cast<double>(best) / static_cast<double>(part.size());
}

// ---------------------------------------------------------------------------
// Federated k-means for the codebook

/// What a client sends for one codebook round: per-centroid sums and counts.
struct CentroidStats {
  int client_id = 0;
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> sums;  // k x dim
  std::vector<std::uint64_t> counts;

  std::size_t wire_bytes() const { return 4 * sums.size() + 4 * counts.size(); }
};

inline CentroidStats local_centroid_stats(int client_id, const semantics::Codebook& cb,
                                          std::span<const std::vector<double>> points) {
  cb.validate();
  CentroidStats s{client_id, cb.k, cb.dim, std::vector<double>(cb.k * cb.dim, 0.0),
                  std::vector<std::uint64_t>(cb.k, 0)};
  std::vector<CompensatedSum> acc(cb.k * cb.dim);
  for (const auto& p : points) {
    if (p.size() != cb.dim) throw InvalidArgument("embedding dimension does not match the codebook");
    const std::size_t c = semantics::quantize(p, cb);
    ++s.counts[c];
    for (std::size_t j = 0; j < cb.dim; ++j) acc[c * cb.dim + j].add(p[j]);
  }
  for (std::size_t i = 0; i < acc.size(); ++i) s.sums[i] = acc[i].value();
  return s;
}

/// Server step: each centroid moves to the mean of all assigned points;
/// centroids nobody assigned to stay put.
inline semantics::Codebook aggregate_centroids(const semantics::Codebook& cb, std::span<const CentroidStats> stats) {
  std::vector<const CentroidStats*> sorted;
  for (const auto& s : stats) {
    if (s.k != cb.k || s.dim != cb.dim) throw InvalidArgument("centroid stats do not match the codebook");
    sorted.push_back(&s);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const CentroidStats* a, const CentroidStats* b) { return a->client_id < b->client_id; });
  semantics::Codebook out = cb;
  for (std::size_t c = 0; c < cb.k; ++c) {
    std::uint64_t n = 0;
    for (const auto* s : sorted) n += s->counts[c];
    if (n == 0) continue;
    for (std::size_t j = 0; j < cb.dim; ++j) {
      CompensatedSum acc;
      for (const auto* s : sorted) acc.add(s->sums[c * cb.dim + j]);
      out.centroids[c * cb.dim + j] = acc.value() / static_cast<double>(n);
    }
  }
  return out;
}

struct CodebookRound {
  semantics::Codebook codebook;
  std::size_t bytes = 0;  // codebook down to each client + stats up
};

inline CodebookRound fed_codebook_round(const semantics::Codebook& cb,
                                        std::span<const std::vector<std::vector<double>>> client_points) {
  cb.validate();
  std::vector<CentroidStats> stats;
  CodebookRound r;
  for (std::size_t k = 0; k < client_points.size(); ++k) {
    stats.push_back(local_centroid_stats(static_cast<int>(k), cb, client_points[k]));
    r.bytes += parameter_bytes(cb.centroids.size()) + stats.back().wire_bytes();
  }
  r.codebook = aggregate_centroids(cb, stats);
  return r;
}

/// Centralized Lloyd step on pooled points, the reference for the federated round.
inline semantics::Codebook centralized_kmeans_step(const semantics::Codebook& cb,
                                                   std::span<const std::vector<double>> points) {
  const CentroidStats s = local_centroid_stats(0, cb, points);
  return aggregate_centroids(cb, std::span<const CentroidStats>(&s, 1));
}

}  // namespace swarmsynth::federation
