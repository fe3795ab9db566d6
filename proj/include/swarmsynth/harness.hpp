#pragma once

// Scenario configuration, seeded end-to-end runs, metrics and reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "swarmsynth/core.hpp"
#include "swarmsynth/federation.hpp"
#include "swarmsynth/generator.hpp"
#include "swarmsynth/netsim.hpp"
#include "swarmsynth/protocol.hpp"
#include "swarmsynth/radiance.hpp"
#include "swarmsynth/semantics.hpp"
#include "swarmsynth/world.hpp"

namespace swarmsynth::harness {

using json = nlohmann::json;
using protocol::CooperationMode;
using netsim::PayloadKind;

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> v) : std::runtime_error(join(v)), violations(std::move(v)) {}
  std::vector<std::string> violations;

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "invalid scenario config:";
    for (const auto& e : v) s += "\n  - " + e;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Config

struct SessionSpec {
  int target = 0;
  std::vector<int> zones{3};
};

struct LinkSpec {
  int a = 0, b = 0;
  double capacity = netsim::kDefaultCapacity;
  double latency = netsim::kDefaultLatency;
};

struct GeneratorSpec {
  int hidden = 64;
  int blocks = 2;
  int temb = 16;
  int T = 100;
  double beta_1 = 1e-4;
  double beta_T = 0.02;
  int fl_rounds = 400;
  int local_epochs = 5;
  double lr = 1e-3;
  double p_uncond = generator::kDefaultUncondProbability;
  int aggregate_every = 1;  // sessions per FL aggregation of session contributions
  int semantic_dim = 32;
  double pose_scale = 32.0;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  // scene
  std::array<int, 3> dims{32, 32, 32};
  int objects = 6;
  int min_size = 3;
  int max_size = 7;
  // swarm
  int drones = 4;
  int views_per_drone = 4;
  int probes_per_drone = 1;
  double view_distance = 30.0;
  double view_height = 20.0;
  int sensor_size = 32;
  double fov = 1.0;
  int generator_size = 16;
  // network
  double capacity = netsim::kDefaultCapacity;
  double latency = netsim::kDefaultLatency;
  std::vector<std::pair<int, int>> obstructions{{0, 3}};
  std::optional<std::vector<LinkSpec>> links;  // explicit directed links replace the full mesh
  // cooperation
  std::optional<CooperationMode> mode = CooperationMode::kSemantic;  // nullopt = AUTO
  double reliability = 0.9;
  bool trusted = false;
  protocol::TaskPriority priority = protocol::TaskPriority::kFidelity;
  protocol::ModeThresholds thresholds;
  std::vector<SessionSpec> sessions{SessionSpec{}};
  // models
  GeneratorSpec generator;
  int codebook_size = static_cast<int>(semantics::kHistogramBins);
  // protocol
  double tau = 0.15;
  double epsilon = 0.05;
  int max_rounds = 4;
  double guidance_weight = 2.0;
  int belief_steps = 10;
  int refine_steps = 10;
  int hallucination_steps = 50;
  double validation_db = 20.0;
  protocol::RefinePolicy refine = protocol::RefinePolicy::kAlways;
  int field_iterations = 60;
  double field_lr = 32.0;
  int field_samples = 32;
  int eval_samples = 32;
  std::uint64_t raw_multiplier = 1024;
  // utility
  double w_u = 1.0;
  double w_c = 1e-6;
  std::string output_dir;
};

inline std::string refine_name(protocol::RefinePolicy p) {
  switch (p) {
    case protocol::RefinePolicy::kNever: return "never";
    case protocol::RefinePolicy::kOnFailure: return "on_failure";
    case protocol::RefinePolicy::kAlways: return "always";
  }
  return "?";
}

inline std::string mode_key(const std::optional<CooperationMode>& m) {
  if (!m) return "auto";
  switch (*m) {
    case CooperationMode::kDetectionsOnly: return "detections";
    case CooperationMode::kSemantic: return "semantic";
    case CooperationMode::kLatent: return "latent";
    case CooperationMode::kRaw: return "raw";
  }
  return "?";
}

namespace detail {

/// Reads one JSON object, recording every problem instead of stopping at the first.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(where() + " must be an object");
  }

  template <class T, class Check>
  void get(const std::string& key, T& out, Check&& check, const std::string& rule) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    const json& v = j_.at(key);
    T tmp{};
    if (!convert(v, tmp)) {
      errors_.push_back(where(key) + " has the wrong type");
      return;
    }
    if (!check(tmp)) {
      errors_.push_back(where(key) + " " + rule);
      return;
    }
    out = tmp;
  }
  template <class T>
  void get(const std::string& key, T& out) {
    get(key, out, [](const T&) { return true; }, "");
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) errors_.push_back(where(k) + " is not a recognized key");
    }
  }

  std::string where(const std::string& key = "") const {
    const std::string p = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
    return p.empty() ? "config" : "'" + p + "'";
  }

 private:
  static bool convert(const json& v, int& out) {
    if (!v.is_number_integer()) return false;
    const auto x = v.get<std::int64_t>();
    if (x < INT32_MIN || x > INT32_MAX) return false;
    out = static_cast<int>(x);
    return true;
  }
  static bool convert(const json& v, std::uint64_t& out) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) return false;
    out = v.get<std::uint64_t>();
    return true;
  }
  static bool convert(const json& v, double& out) {
    if (!v.is_number()) return false;
    out = v.get<double>();
    return std::isfinite(out);
  }
  static bool convert(const json& v, bool& out) {
    if (!v.is_boolean()) return false;
    out = v.get<bool>();
    return true;
  }
  static bool convert(const json& v, std::string& out) {
    if (!v.is_string()) return false;
    out = v.get<std::string>();
    return true;
  }

  const json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline bool positive(double x) { return x > 0.0; }
inline bool non_negative(double x) { return x >= 0.0; }

}  // namespace detail

inline json to_json(const ScenarioConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["scene"] = {{"dims", c.dims}, {"objects", c.objects}, {"min_size", c.min_size}, {"max_size", c.max_size}};
  j["swarm"] = {{"drones", c.drones},
                {"views_per_drone", c.views_per_drone},
                {"probes_per_drone", c.probes_per_drone},
                {"view_distance", c.view_distance},
                {"view_height", c.view_height},
                {"sensor_size", c.sensor_size},
                {"fov", c.fov},
                {"generator_size", c.generator_size}};
  json obs = json::array();
  for (const auto& [a, b] : c.obstructions) obs.push_back({a, b});
  j["topology"] = {{"capacity", c.capacity}, {"latency", c.latency}, {"obstructions", obs}};
  if (c.links) {
    json l = json::array();
    for (const LinkSpec& s : *c.links) l.push_back({s.a, s.b, s.capacity, s.latency});
    j["topology"]["links"] = l;
  }
  json sessions = json::array();
  for (const SessionSpec& s : c.sessions) sessions.push_back({{"target", s.target}, {"zones", s.zones}});
  j["cooperation"] = {{"mode", mode_key(c.mode)},
                      {"reliability", c.reliability},
                      {"trusted", c.trusted},
                      {"priority", c.priority == protocol::TaskPriority::kFidelity ? "fidelity" : "safety"},
                      {"high_bandwidth", c.thresholds.high_bandwidth},
                      {"low_bandwidth", c.thresholds.low_bandwidth},
                      {"min_reliability", c.thresholds.min_reliability},
                      {"sessions", sessions}};
  const GeneratorSpec& g = c.generator;
  j["generator"] = {{"hidden", g.hidden},
                    {"blocks", g.blocks},
                    {"temb", g.temb},
                    {"T", g.T},
                    {"beta_1", g.beta_1},
                    {"beta_T", g.beta_T},
                    {"fl_rounds", g.fl_rounds},
                    {"local_epochs", g.local_epochs},
                    {"lr", g.lr},
                    {"p_uncond", g.p_uncond},
                    {"aggregate_every", g.aggregate_every},
                    {"semantic_dim", g.semantic_dim},
                    {"pose_scale", g.pose_scale},
                    {"codebook_size", c.codebook_size}};
  j["protocol"] = {{"tau", c.tau},
                   {"epsilon", c.epsilon},
                   {"max_rounds", c.max_rounds},
                   {"guidance_weight", c.guidance_weight},
                   {"belief_steps", c.belief_steps},
                   {"refine_steps", c.refine_steps},
                   {"hallucination_steps", c.hallucination_steps},
                   {"validation_db", c.validation_db},
                   {"refine", refine_name(c.refine)},
                   {"field_iterations", c.field_iterations},
                   {"field_lr", c.field_lr},
                   {"field_samples", c.field_samples},
                   {"eval_samples", c.eval_samples},
                   {"raw_multiplier", c.raw_multiplier}};
  j["utility"] = {{"w_u", c.w_u}, {"w_c", c.w_c}};
  j["output_dir"] = c.output_dir;
  return j;
}

/// Stable key order (nlohmann objects are sorted), so equal configs hash equally.
/// The output location is not part of the scenario.
inline std::string canonical(const ScenarioConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return j.dump();
}

inline std::uint64_t config_hash(const ScenarioConfig& c) {
  const std::string s = canonical(c);
  return hash_bytes(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

/// Cross-field checks: ids resolve and sizes fit.
inline std::vector<std::string> semantic_violations(const ScenarioConfig& c) {
  std::vector<std::string> e;
  const auto node = [&](int id) { return id >= 0 && id < c.drones; };
  if (c.max_size + 2 > std::min({c.dims[0], c.dims[1], c.dims[2]})) e.push_back("'scene.max_size' does not fit in the grid");
  if (c.min_size > c.max_size) e.push_back("'scene.min_size' exceeds 'scene.max_size'");
  if (c.drones > c.dims[0]) e.push_back("'swarm.drones' exceeds the number of x slabs");
  if (c.generator_size > 0 && c.sensor_size % c.generator_size != 0) {
    e.push_back("'swarm.generator_size' must divide 'swarm.sensor_size'");
  }
  for (const auto& [a, b] : c.obstructions) {
    if (!node(a) || !node(b) || a == b) {
      e.push_back("obstruction [" + std::to_string(a) + "," + std::to_string(b) + "] references an unknown drone");
    }
  }
  if (c.links) {
    for (const LinkSpec& l : *c.links) {
      const std::string tag = "link [" + std::to_string(l.a) + "," + std::to_string(l.b) + "]";
      if (!node(l.a) || !node(l.b) || l.a == l.b) e.push_back(tag + " references an unknown drone");
      if (!(l.capacity > 0.0) || !(l.latency >= 0.0)) e.push_back(tag + " needs positive capacity and latency >= 0");
      if (std::find(c.obstructions.begin(), c.obstructions.end(), std::pair{std::min(l.a, l.b), std::max(l.a, l.b)}) !=
              c.obstructions.end() ||
          std::find(c.obstructions.begin(), c.obstructions.end(), std::pair{std::max(l.a, l.b), std::min(l.a, l.b)}) !=
              c.obstructions.end()) {
        e.push_back(tag + " crosses an obstruction");
      }
    }
  }
  if (c.thresholds.low_bandwidth > c.thresholds.high_bandwidth) {
    e.push_back("'cooperation.low_bandwidth' exceeds 'cooperation.high_bandwidth'");
  }
  for (std::size_t i = 0; i < c.sessions.size(); ++i) {
    const SessionSpec& s = c.sessions[i];
    const std::string tag = "session " + std::to_string(i);
    if (!node(s.target)) e.push_back(tag + " targets unknown drone " + std::to_string(s.target));
    if (s.zones.empty()) e.push_back(tag + " requests no zones");
    for (int z : s.zones) {
      if (!node(z)) e.push_back(tag + " requests unknown zone " + std::to_string(z));
    }
  }
  return e;
}

/// Parses and validates; throws ConfigError listing every violation.
inline ScenarioConfig parse_config(const json& j) {
  using detail::non_negative;
  using detail::positive;
  ScenarioConfig c;
  std::vector<std::string> err;
  detail::ObjectReader root(j, "", err);
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  const auto pos_int = [](int x) { return x > 0; };

  if (const json* s = root.child("scene")) {
    detail::ObjectReader r(*s, "scene", err);
    if (const json* d = r.child("dims")) {
      if (!d->is_array() || d->size() != 3 ||
          !std::all_of(d->begin(), d->end(), [](const json& v) { return v.is_number_integer() && v.get<int>() >= 4; })) {
        err.push_back("'scene.dims' must be three integers >= 4");
      } else {
        for (std::size_t i = 0; i < 3; ++i) c.dims[i] = (*d)[i].get<int>();
      }
    }
    r.get("objects", c.objects, [](int x) { return x >= 0; }, "must be >= 0");
    r.get("min_size", c.min_size, pos_int, "must be >= 1");
    r.get("max_size", c.max_size, pos_int, "must be >= 1");
    r.finish();
  }
  if (const json* s = root.child("swarm")) {
    detail::ObjectReader r(*s, "swarm", err);
    r.get("drones", c.drones, pos_int, "must be >= 1");
    r.get("views_per_drone", c.views_per_drone, pos_int, "must be >= 1");
    r.get("probes_per_drone", c.probes_per_drone, pos_int, "must be >= 1");
    r.get("view_distance", c.view_distance, positive, "must be positive");
    r.get("view_height", c.view_height);
    r.get("sensor_size", c.sensor_size, [](int x) { return x >= 8; }, "must be >= 8");
    r.get("fov", c.fov, [](double x) { return x > 0.0 && x < M_PI; }, "must lie in (0, pi)");
    r.get("generator_size", c.generator_size, [](int x) { return x >= 8; }, "must be >= 8");
    r.finish();
  }
  if (const json* s = root.child("topology")) {
    detail::ObjectReader r(*s, "topology", err);
    r.get("capacity", c.capacity, positive, "must be positive");
    r.get("latency", c.latency, non_negative, "must be >= 0");
    if (const json* o = r.child("obstructions")) {
      c.obstructions.clear();
      if (!o->is_array()) err.push_back("'topology.obstructions' must be a list of id pairs");
      else
        for (const json& p : *o) {
          if (p.is_array() && p.size() == 2 && p[0].is_number_integer() && p[1].is_number_integer()) {
            c.obstructions.emplace_back(p[0].get<int>(), p[1].get<int>());
          } else {
            err.push_back("'topology.obstructions' entries must be [a, b] id pairs");
          }
        }
    }
    if (const json* l = r.child("links")) {
      c.links.emplace();
      if (!l->is_array()) err.push_back("'topology.links' must be a list of [a, b, capacity, latency]");
      else
        for (const json& p : *l) {
          if (p.is_array() && p.size() == 4 && p[0].is_number_integer() && p[1].is_number_integer() &&
              p[2].is_number() && p[3].is_number()) {
            c.links->push_back({p[0].get<int>(), p[1].get<int>(), p[2].get<double>(), p[3].get<double>()});
          } else {
            err.push_back("'topology.links' entries must be [a, b, capacity, latency]");
          }
        }
    }
    r.finish();
  }
  if (const json* s = root.child("cooperation")) {
    detail::ObjectReader r(*s, "cooperation", err);
    std::string mode = mode_key(c.mode), prio = "fidelity";
    r.get("mode", mode, [](const std::string& m) { return m == "auto" || protocol::parse_mode(m).has_value(); },
          "must be one of auto, raw, latent, semantic, detections");
    c.mode = mode == "auto" ? std::nullopt : protocol::parse_mode(mode);
    r.get("reliability", c.reliability, [](double x) { return x >= 0.0 && x <= 1.0; }, "must lie in [0, 1]");
    r.get("trusted", c.trusted);
    r.get("priority", prio, [](const std::string& p) { return p == "fidelity" || p == "safety"; },
          "must be fidelity or safety");
    c.priority = prio == "safety" ? protocol::TaskPriority::kSafety : protocol::TaskPriority::kFidelity;
    r.get("high_bandwidth", c.thresholds.high_bandwidth, non_negative, "must be >= 0");
    r.get("low_bandwidth", c.thresholds.low_bandwidth, non_negative, "must be >= 0");
    r.get("min_reliability", c.thresholds.min_reliability, [](double x) { return x >= 0.0 && x <= 1.0; },
          "must lie in [0, 1]");
    if (const json* ss = r.child("sessions")) {
      c.sessions.clear();
      if (!ss->is_array()) err.push_back("'cooperation.sessions' must be a list");
      else
        for (std::size_t i = 0; i < ss->size(); ++i) {
          detail::ObjectReader sr((*ss)[i], "cooperation.sessions[" + std::to_string(i) + "]", err);
          SessionSpec spec;
          sr.get("target", spec.target);
          if (const json* z = sr.child("zones")) {
            spec.zones.clear();
            if (!z->is_array() || !std::all_of(z->begin(), z->end(), [](const json& v) { return v.is_number_integer(); }))
              err.push_back(sr.where("zones") + " must be a list of zone ids");
            else
              for (const json& v : *z) spec.zones.push_back(v.get<int>());
          }
          sr.finish();
          c.sessions.push_back(spec);
        }
    }
    r.finish();
  }
  if (const json* s = root.child("generator")) {
    detail::ObjectReader r(*s, "generator", err);
    GeneratorSpec& g = c.generator;
    r.get("hidden", g.hidden, pos_int, "must be >= 1");
    r.get("blocks", g.blocks, [](int x) { return x >= 0; }, "must be >= 0");
    r.get("temb", g.temb, [](int x) { return x >= 2 && x % 2 == 0; }, "must be even and >= 2");
    r.get("T", g.T, pos_int, "must be >= 1");
    r.get("beta_1", g.beta_1, [](double x) { return x > 0.0 && x < 1.0; }, "must lie in (0, 1)");
    r.get("beta_T", g.beta_T, [](double x) { return x > 0.0 && x < 1.0; }, "must lie in (0, 1)");
    r.get("fl_rounds", g.fl_rounds, [](int x) { return x >= 0; }, "must be >= 0");
    r.get("local_epochs", g.local_epochs, pos_int, "must be >= 1");
    r.get("lr", g.lr, positive, "must be positive");
    r.get("p_uncond", g.p_uncond, [](double x) { return x >= 0.0 && x <= 1.0; }, "must lie in [0, 1]");
    r.get("aggregate_every", g.aggregate_every, pos_int, "must be >= 1");
    r.get("semantic_dim", g.semantic_dim, pos_int, "must be >= 1");
    r.get("pose_scale", g.pose_scale, positive, "must be positive");
    r.get("codebook_size", c.codebook_size,
          [](int x) { return x >= 1 && x <= static_cast<int>(semantics::kHistogramBins); },
          "must lie in [1, " + std::to_string(semantics::kHistogramBins) + "]");
    if (g.beta_1 > g.beta_T) err.push_back("'generator.beta_1' exceeds 'generator.beta_T'");
    r.finish();
  }
  if (const json* s = root.child("protocol")) {
    detail::ObjectReader r(*s, "protocol", err);
    std::string refine = refine_name(c.refine);
    r.get("tau", c.tau, non_negative, "must be >= 0");
    r.get("epsilon", c.epsilon, non_negative, "must be >= 0");
    r.get("max_rounds", c.max_rounds, [](int x) { return x >= 0; }, "must be >= 0");
    r.get("guidance_weight", c.guidance_weight, non_negative, "must be >= 0");
    r.get("belief_steps", c.belief_steps, pos_int, "must be >= 1");
    r.get("refine_steps", c.refine_steps, pos_int, "must be >= 1");
    r.get("hallucination_steps", c.hallucination_steps, pos_int, "must be >= 1");
    r.get("validation_db", c.validation_db);
    r.get("refine", refine, [](const std::string& p) { return p == "never" || p == "on_failure" || p == "always"; },
          "must be never, on_failure or always");
    c.refine = refine == "never" ? protocol::RefinePolicy::kNever
               : refine == "always" ? protocol::RefinePolicy::kAlways
                                    : protocol::RefinePolicy::kOnFailure;
    r.get("field_iterations", c.field_iterations, [](int x) { return x >= 0; }, "must be >= 0");
    r.get("field_lr", c.field_lr, positive, "must be positive");
    r.get("field_samples", c.field_samples, [](int x) { return x >= 2; }, "must be >= 2");
    r.get("eval_samples", c.eval_samples, [](int x) { return x >= 2; }, "must be >= 2");
    r.get("raw_multiplier", c.raw_multiplier, [](std::uint64_t x) { return x >= 1; }, "must be >= 1");
    r.finish();
  }
  if (const json* s = root.child("utility")) {
    detail::ObjectReader r(*s, "utility", err);
    r.get("w_u", c.w_u, non_negative, "must be >= 0");
    r.get("w_c", c.w_c, non_negative, "must be >= 0");
    r.finish();
  }
  root.finish();
  // defaults tied to the default 4-drone layout do not apply to smaller swarms
  if (!j.is_object() || !j.contains("topology") || !j["topology"].contains("obstructions")) {
    if (c.drones < 4) c.obstructions.clear();
  }
  if (!j.is_object() || !j.contains("cooperation") || !j["cooperation"].contains("sessions")) {
    c.sessions = {SessionSpec{0, {c.drones - 1}}};
  }
  if (err.empty()) {
    const auto more = semantic_violations(c);
    err.insert(err.end(), more.begin(), more.end());
  }
  if (!err.empty()) throw ConfigError(std::move(err));
  return c;
}

inline ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file " + path});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Metrics

/// Bandwidth class of total bytes per exchange (decimal MB).
inline std::string bandwidth_band(std::uint64_t bytes) {
  if (bytes > 10'000'000) return "High";
  if (bytes >= 1'000'000 && bytes <= 5'000'000) return "Medium";
  if (bytes < 1'000'000) return "Low";
  return "Unbanded";
}

inline double communication_utility(double before, double after, std::uint64_t bytes, double w_u, double w_c) {
  if (!(before >= 0.0 && before <= 1.0 && after >= 0.0 && after <= 1.0)) {
    throw InvalidArgument("detection scores must lie in [0, 1]");
  }
  if (!(w_u >= 0.0 && w_c >= 0.0)) throw InvalidArgument("utility weights must be non-negative");
  return w_u * (after - before) - w_c * static_cast<double>(bytes);
}

struct ExchangeMetrics {
  std::uint64_t seed = 0;
  int index = 0;
  int target = 0;
  std::vector<int> zones;
  std::vector<int> responders;
  std::string mode;
  std::string phase;
  std::string failure;
  std::map<std::string, std::uint64_t> bytes_by_kind;
  std::uint64_t cooperation_bytes = 0;  // everything charged by the session
  std::uint64_t max_message_bytes = 0;
  std::uint64_t messages = 0;
  std::string band;
  double psnr_before = 0.0;
  double psnr_after = 0.0;
  double f1_before = 0.0;
  double f1_after = 0.0;
  double distortion_before = 1.0;
  double distortion_after = 1.0;
  double utility = 0.0;
  std::vector<std::vector<double>> delta_traces;
  std::vector<std::vector<double>> proposed_traces;
  int refinement_rounds = 0;
  std::uint64_t refinement_bytes = 0;  // GUIDANCE + SUMMARY
  std::uint64_t full_frame_bytes = 0;  // the refined poses' sensor frames, charged along the same routes
  std::uint64_t full_generator_frame_bytes = 0;
  std::vector<double> validation_psnr;
  bool validation_pass = false;
  std::string field_digest;
};

struct RunMetrics {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string mode;
  int drones = 0;
  std::vector<ExchangeMetrics> exchanges;
  std::vector<double> fl_losses;
  std::map<std::string, std::uint64_t> bytes_by_kind;  // whole-run ledger
  std::uint64_t total_bytes = 0;
  std::uint64_t fl_bytes = 0;
  double data_mean = 0.0;
  double data_std = 1.0;
  std::map<std::string, double> timing;  // seconds; written apart from the metrics

  // artifacts for dumps, not serialized
  std::vector<netsim::DeliveryReport> reports;
  std::vector<radiance::VoxelField> fields;
  std::vector<std::vector<std::pair<std::string, Image>>> images;
};

namespace detail {

inline json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }
inline double number_or_inf(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

}  // namespace detail

inline json to_json(const ExchangeMetrics& e) {
  json j;
  j["type"] = "exchange";
  j["seed"] = e.seed;
  j["index"] = e.index;
  j["target"] = e.target;
  j["zones"] = e.zones;
  j["responders"] = e.responders;
  j["mode"] = e.mode;
  j["phase"] = e.phase;
  j["failure"] = e.failure;
  j["bytes_by_kind"] = e.bytes_by_kind;
  j["cooperation_bytes"] = e.cooperation_bytes;
  j["max_message_bytes"] = e.max_message_bytes;
  j["messages"] = e.messages;
  j["band"] = e.band;
  j["psnr_before"] = detail::finite_or_null(e.psnr_before);
  j["psnr_after"] = detail::finite_or_null(e.psnr_after);
  j["f1_before"] = e.f1_before;
  j["f1_after"] = e.f1_after;
  j["distortion_before"] = e.distortion_before;
  j["distortion_after"] = e.distortion_after;
  j["utility"] = e.utility;
  j["delta_traces"] = e.delta_traces;
  j["proposed_traces"] = e.proposed_traces;
  j["refinement_rounds"] = e.refinement_rounds;
  j["refinement_bytes"] = e.refinement_bytes;
  j["full_frame_bytes"] = e.full_frame_bytes;
  j["full_generator_frame_bytes"] = e.full_generator_frame_bytes;
  json v = json::array();
  for (double p : e.validation_psnr) v.push_back(detail::finite_or_null(p));
  j["validation_psnr"] = v;
  j["validation_pass"] = e.validation_pass;
  j["field_digest"] = e.field_digest;
  return j;
}

inline ExchangeMetrics exchange_from_json(const json& j) {
  ExchangeMetrics e;
  e.seed = j.at("seed").get<std::uint64_t>();
  e.index = j.at("index").get<int>();
  e.target = j.at("target").get<int>();
  e.zones = j.at("zones").get<std::vector<int>>();
  e.responders = j.at("responders").get<std::vector<int>>();
  e.mode = j.at("mode").get<std::string>();
  e.phase = j.at("phase").get<std::string>();
  e.failure = j.at("failure").get<std::string>();
  e.bytes_by_kind = j.at("bytes_by_kind").get<std::map<std::string, std::uint64_t>>();
  e.cooperation_bytes = j.at("cooperation_bytes").get<std::uint64_t>();
  e.max_message_bytes = j.at("max_message_bytes").get<std::uint64_t>();
  e.messages = j.at("messages").get<std::uint64_t>();
  e.band = j.at("band").get<std::string>();
  e.psnr_before = detail::number_or_inf(j.at("psnr_before"));
  e.psnr_after = detail::number_or_inf(j.at("psnr_after"));
  e.f1_before = j.at("f1_before").get<double>();
  e.f1_after = j.at("f1_after").get<double>();
  e.distortion_before = j.at("distortion_before").get<double>();
  e.distortion_after = j.at("distortion_after").get<double>();
  e.utility = j.at("utility").get<double>();
  e.delta_traces = j.at("delta_traces").get<std::vector<std::vector<double>>>();
  e.proposed_traces = j.at("proposed_traces").get<std::vector<std::vector<double>>>();
  e.refinement_rounds = j.at("refinement_rounds").get<int>();
  e.refinement_bytes = j.at("refinement_bytes").get<std::uint64_t>();
  e.full_frame_bytes = j.at("full_frame_bytes").get<std::uint64_t>();
  e.full_generator_frame_bytes = j.at("full_generator_frame_bytes").get<std::uint64_t>();
  for (const json& v : j.at("validation_psnr")) e.validation_psnr.push_back(detail::number_or_inf(v));
  e.validation_pass = j.at("validation_pass").get<bool>();
  e.field_digest = j.at("field_digest").get<std::string>();
  return e;
}

inline json run_summary_json(const RunMetrics& m) {
  json j;
  j["type"] = "run";
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  j["mode"] = m.mode;
  j["drones"] = m.drones;
  j["exchanges"] = m.exchanges.size();
  j["fl_losses"] = m.fl_losses;
  j["bytes_by_kind"] = m.bytes_by_kind;
  j["total_bytes"] = m.total_bytes;
  j["fl_bytes"] = m.fl_bytes;
  j["data_mean"] = m.data_mean;
  j["data_std"] = m.data_std;
  return j;
}

// ---------------------------------------------------------------------------
// Scenario execution

struct World {
  world::Scene scene;
  protocol::SwarmWorld swarm;
  protocol::Models models;
  netsim::Topology topo;
};

inline netsim::Topology build_topology(const ScenarioConfig& c) {
  std::vector<netsim::NodePair> obs(c.obstructions.begin(), c.obstructions.end());
  if (!c.links) return netsim::Topology::fully_connected(c.drones, {c.capacity, c.latency}, obs);
  netsim::Topology t;
  for (int i = 0; i < c.drones; ++i) t.add_node(i);
  for (const auto& [a, b] : obs) t.obstruct(a, b);
  for (const LinkSpec& l : *c.links) t.add_link(l.a, l.b, {l.capacity, l.latency});
  return t;
}

inline protocol::ProtocolConfig protocol_config(const ScenarioConfig& c) {
  protocol::ProtocolConfig p;
  p.tau = c.tau;
  p.epsilon = c.epsilon;
  p.max_rounds = c.max_rounds;
  p.guidance_weight = c.guidance_weight;
  p.belief_steps = c.belief_steps;
  p.refine_steps = c.refine_steps;
  p.hallucination_steps = c.hallucination_steps;
  p.validation_db = c.validation_db;
  p.refine = c.refine;
  p.own_training = {c.field_iterations, c.field_lr, c.field_samples};
  p.coop_training = p.own_training;
  p.raw_multiplier = c.raw_multiplier;
  p.fl.eta = c.generator.lr;
  p.fl.epochs = 1;
  p.fl.optimizer = federation::Optimizer::kAdam;
  p.seed = mix64(c.seed ^ 0x9a7e11ULL);
  return p;
}

/// Mean zone-clipped PSNR over every pose the zones' owners hold (views and probes).
template <radiance::Field F>
double zone_psnr(const F& field, const protocol::SwarmWorld& w, std::span<const int> zones, int samples) {
  double sum = 0.0;
  int n = 0;
  for (int z : zones) {
    const auto owner = w.owner_of(z);
    if (!owner) continue;
    const protocol::DroneState& d = w.drones.at(static_cast<std::size_t>(*owner));
    const protocol::Box box = protocol::Box::of(w.zone(z));
    for (const auto* set : {&d.views, &d.probes}) {
      for (const protocol::View& v : *set) {
        sum += radiance::psnr(protocol::render_clipped(field, v.pose, w.sensor, box, samples), v.image);
        ++n;
      }
    }
  }
  return n ? sum / n : 0.0;
}

/// Detection F1 of what the target knows about the zones against their ground truth.
inline double zone_f1(std::span<const semantics::SemanticToken> known, const protocol::SwarmWorld& w,
                      std::span<const int> zones) {
  std::vector<world::Detection> truth, pred;
  for (int z : zones) {
    const world::Zone& zone = w.zone(z);
    const auto t = protocol::zone_truth(w.scene, zone);
    truth.insert(truth.end(), t.begin(), t.end());
    for (const auto& tok : known) {
      if (zone.contains(tok.position())) pred.push_back(semantics::to_detection(tok));
    }
  }
  return semantics::detection_f1(truth, pred);
}

namespace detail {

struct Clock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - t0).count();
    t0 = now;
    return s;
  }
};

inline std::map<std::string, std::uint64_t> kind_map(const netsim::BandwidthLedger& l) {
  std::map<std::string, std::uint64_t> out;
  for (PayloadKind k : netsim::kAllKinds) out[std::string(netsim::kind_name(k))] = l.of(k);
  return out;
}

/// One FL parameter transfer per non-aggregator participant, up and down.
inline void charge_fl(std::vector<netsim::DeliveryReport>& reports, const netsim::Topology& topo,
                      std::span<const int> participants, int aggregator, std::uint64_t bytes, double& clock,
                      std::uint64_t& seq) {
  double latest = clock;
  for (int p : participants) {
    if (p == aggregator) continue;
    for (auto [src, dst] : {std::pair{p, aggregator}, std::pair{aggregator, p}}) {
      reports.push_back(netsim::transmit(topo, {src, dst, PayloadKind::kFlParams, bytes, seq++}, clock));
      if (reports.back().delivered) latest = std::max(latest, reports.back().arrival_time);
    }
  }
  clock = latest;
}

}  // namespace detail

/// Builds the world, observations and federated models. FL traffic is appended to `reports`.
inline World prepare_world(const ScenarioConfig& c, RunMetrics& m, std::vector<netsim::DeliveryReport>& reports) {
  detail::Clock clk;
  World w;
  world::SceneSpec ss;
  ss.dims = {c.dims[0], c.dims[1], c.dims[2]};
  ss.object_count = c.objects;
  ss.min_size = c.min_size;
  ss.max_size = c.max_size;
  w.scene = world::build_scene(ss, c.seed);
  protocol::SwarmSpec sp;
  sp.views_per_drone = c.views_per_drone;
  sp.probes_per_drone = c.probes_per_drone;
  sp.sensor.width = sp.sensor.height = c.sensor_size;
  sp.sensor.fov = c.fov;
  sp.generator_size = c.generator_size;
  sp.view_distance = c.view_distance;
  sp.view_height = c.view_height;
  sp.conditioning.semantic_dim = static_cast<std::size_t>(c.generator.semantic_dim);
  sp.conditioning.pose_scale = c.generator.pose_scale;
  w.swarm = protocol::build_swarm(w.scene, c.drones, sp);
  w.topo = build_topology(c);
  m.timing["world"] = clk.lap();

  std::vector<int> clients;
  for (const auto& d : w.swarm.drones) {
    if (!d.examples.empty()) clients.push_back(d.id);
  }
  const int aggregator = clients.empty() ? 0 : clients.front();
  double clock = 0.0;
  std::uint64_t seq = 1u << 20;

  // Federated pixel statistics: each drone reports (sum, sum of squares, count).
  double s1 = 0.0, s2 = 0.0, n = 0.0;
  for (const auto& d : w.swarm.drones) {
    for (const auto& e : d.examples) {
      for (double v : e.image.data) {
        const double x = 2.0 * v - 1.0;
        s1 += x;
        s2 += x * x;
        n += 1.0;
      }
    }
  }
  if (n > 0) {
    m.data_mean = s1 / n;
    m.data_std = std::sqrt(std::max(s2 / n - m.data_mean * m.data_mean, 1e-6));
  }
  detail::charge_fl(reports, w.topo, clients, aggregator, federation::parameter_bytes(3), clock, seq);

  generator::Architecture ar;
  ar.width = ar.height = c.generator_size;
  ar.cond = static_cast<int>(sp.conditioning.size());
  ar.temb = c.generator.temb;
  ar.hidden = c.generator.hidden;
  ar.blocks = c.generator.blocks;
  ar.data_mean_milli = static_cast<int>(std::lround(std::clamp(m.data_mean, -1.0, 1.0) * 1000));
  ar.data_std_milli = std::max(1, static_cast<int>(std::lround(m.data_std * 1000)));
  w.models.conditioning = sp.conditioning;
  w.models.schedule = generator::NoiseSchedule::linear(c.generator.T, c.generator.beta_1, c.generator.beta_T);
  w.models.codebook = semantics::init_codebook(static_cast<std::size_t>(c.codebook_size), mix64(c.seed ^ 0xc0deULL));
  w.models.generator = generator::init_denoiser(ar, mix64(c.seed ^ 0x6e6ULL));

  federation::LocalConfig lc;
  lc.eta = c.generator.lr;
  lc.epochs = c.generator.local_epochs;
  lc.optimizer = federation::Optimizer::kAdam;
  std::map<int, generator::Adam> adam;
  const auto loss_for = [&](int k) {
    const auto& d = w.swarm.drones.at(static_cast<std::size_t>(k));
    federation::DenoiserLoss l;
    l.descriptor = w.models.generator.descriptor;
    l.examples = d.examples;
    l.ids = d.example_ids;
    l.schedule = &w.models.schedule;
    l.p_uncond = c.generator.p_uncond;
    return l;
  };
  std::vector<generator::TrainingExample> all;
  std::vector<std::uint64_t> all_ids;
  for (const auto& d : w.swarm.drones) {
    all.insert(all.end(), d.examples.begin(), d.examples.end());
    all_ids.insert(all_ids.end(), d.example_ids.begin(), d.example_ids.end());
  }
  const std::uint64_t pbytes = federation::parameter_bytes(w.models.generator.values.size());
  for (int r = 0; r < c.generator.fl_rounds && !clients.empty(); ++r) {
    const auto round = federation::fedavg_round(
        r, w.models.generator.values, clients, loss_for,
        [&](int k) { return w.swarm.drones.at(static_cast<std::size_t>(k)).examples.size(); }, lc,
        mix64(c.seed ^ 0xfedULL), &adam);
    w.models.generator.values = round.after;
    detail::charge_fl(reports, w.topo, clients, aggregator, pbytes, clock, seq);
    if (r % 10 == 9 || r + 1 == c.generator.fl_rounds) {
      m.fl_losses.push_back(generator::batch_training_loss(w.models.generator, all, all_ids, w.models.schedule,
                                                           mix64(c.seed ^ 0x1055ULL), c.generator.p_uncond)
                                .loss);
    }
  }
  m.timing["federation"] = clk.lap();
  return w;
}

/// Bottleneck capacity along the route, 0 when unreachable.
inline double route_bandwidth(const netsim::Topology& topo, int src, int dst) {
  const auto path = netsim::route(topo, src, dst);
  if (!path) return 0.0;
  if (path->size() < 2) return std::numeric_limits<double>::infinity();
  double bw = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < path->size(); ++i) bw = std::min(bw, topo.link((*path)[i], (*path)[i + 1]).capacity);
  return bw;
}

inline CooperationMode resolve_mode(const ScenarioConfig& c, const World& w, const SessionSpec& s) {
  if (c.mode) return *c.mode;
  double bw = std::numeric_limits<double>::infinity();
  for (int z : s.zones) {
    const auto owner = w.swarm.owner_of(z);
    if (owner && *owner != s.target) bw = std::min(bw, route_bandwidth(w.topo, *owner, s.target));
  }
  if (!std::isfinite(bw)) bw = c.thresholds.high_bandwidth;
  return protocol::select_mode({bw, c.reliability}, c.trusted, c.priority, c.thresholds);
}

/// Executes the scenario; writes outputs when `output_dir` is set.
inline RunMetrics run_scenario(const ScenarioConfig& cfg);

inline void emit_report(std::span<const RunMetrics> runs, const std::string& dir);

inline RunMetrics run_scenario(const ScenarioConfig& cfg) {
  {
    auto v = semantic_violations(cfg);
    if (!v.empty()) throw ConfigError(std::move(v));
  }
  detail::Clock total;
  RunMetrics m;
  m.seed = cfg.seed;
  m.config_hash = detail::hex64(config_hash(cfg));
  m.mode = mode_key(cfg.mode);
  m.drones = cfg.drones;
  std::vector<netsim::DeliveryReport> fl_reports;
  World w = prepare_world(cfg, m, fl_reports);
  const protocol::ProtocolConfig pc = protocol_config(cfg);
  detail::Clock clk;

  std::vector<CooperationMode> modes;
  for (const SessionSpec& s : cfg.sessions) modes.push_back(resolve_mode(cfg, w, s));
  std::set<int> need_field;
  for (std::size_t i = 0; i < cfg.sessions.size(); ++i) {
    need_field.insert(cfg.sessions[i].target);
    if (modes[i] == CooperationMode::kLatent || modes[i] == CooperationMode::kRaw) {
      for (int z : cfg.sessions[i].zones) need_field.insert(*w.swarm.owner_of(z));
    }
  }
  for (int d : need_field) protocol::prepare_field(w.swarm, d, pc.own_training);
  m.timing["fields"] = clk.lap();

  std::vector<federation::ClientUpdate> pending;
  double fl_clock = 0.0;
  std::uint64_t fl_seq = 1u << 30;
  const std::uint64_t pbytes = federation::parameter_bytes(w.models.generator.values.size());
  for (std::size_t i = 0; i < cfg.sessions.size(); ++i) {
    const SessionSpec& spec = cfg.sessions[i];
    const protocol::DroneState& target = w.swarm.drones.at(static_cast<std::size_t>(spec.target));
    ExchangeMetrics e;
    e.seed = cfg.seed;
    e.index = static_cast<int>(i);
    e.target = spec.target;
    e.zones = spec.zones;
    e.mode = std::string(protocol::mode_name(modes[i]));
    e.psnr_before = zone_psnr(target.field, w.swarm, spec.zones, cfg.eval_samples);
    e.f1_before = zone_f1(target.tokens, w.swarm, spec.zones);

    protocol::CooperationSession s;
    s.target = spec.target;
    s.requested_zones = spec.zones;
    s.mode = modes[i];
    s.clock = fl_clock;
    s.next_sequence = static_cast<std::uint64_t>(i) << 16;
    protocol::CooperationOutcome out = protocol::run_cooperation(s, w.swarm, w.models, w.topo, pc);

    e.responders = out.session.responders;
    e.phase = std::string(protocol::phase_name(out.session.phase));
    e.failure = out.session.failure;
    const netsim::BandwidthLedger l = out.ledger();
    e.bytes_by_kind = detail::kind_map(l);
    e.cooperation_bytes = l.total();
    for (const auto& r : out.session.reports) {
      if (!r.delivered) continue;
      ++e.messages;
      e.max_message_bytes = std::max(e.max_message_bytes, r.payload_bytes);
    }
    e.band = bandwidth_band(e.cooperation_bytes);
    e.psnr_after = zone_psnr(out.field, w.swarm, spec.zones, cfg.eval_samples);
    std::vector<semantics::SemanticToken> known = target.tokens;
    known.insert(known.end(), out.fused.begin(), out.fused.end());
    e.f1_after = zone_f1(known, w.swarm, spec.zones);
    e.distortion_before = 1.0 - e.f1_before;
    e.distortion_after = 1.0 - e.f1_after;
    e.utility = communication_utility(e.f1_before, e.f1_after, e.cooperation_bytes, cfg.w_u, cfg.w_c);
    for (const auto& v : out.validations) e.validation_psnr.push_back(v.mean_psnr);
    e.validation_pass = !out.validations.empty() && out.validations.back().pass;

    std::vector<std::pair<std::string, Image>> imgs;
    for (std::size_t k = 0; k < out.coop_views.size(); ++k) {
      imgs.emplace_back("coop" + std::to_string(k) + "_zone" + std::to_string(out.coop_views[k].zone),
                        out.coop_views[k].view.image);
    }
    if (out.refinement) {
      const protocol::RefinementState& st = *out.refinement;
      e.refinement_rounds = st.iteration;
      e.refinement_bytes = l.of(PayloadKind::kGuidance) + l.of(PayloadKind::kSummary);
      for (std::size_t k = 0; k < st.traces.size(); ++k) {
        e.delta_traces.push_back(st.traces[k].delta);
        e.proposed_traces.push_back(st.traces[k].proposed);
        const auto path = netsim::route(w.topo, st.poses[k].owner, spec.target);
        const std::uint64_t hops = path ? path->size() - 1 : 0;
        e.full_frame_bytes += protocol::raw_frame_bytes(w.swarm.sensor) * hops;
        e.full_generator_frame_bytes +=
            static_cast<std::uint64_t>(w.swarm.generator_size) * w.swarm.generator_size * 3 * hops;
        imgs.emplace_back("belief" + std::to_string(k), st.beliefs[k]);
      }
    }
    for (int z : spec.zones) {
      const auto owner = w.swarm.owner_of(z);
      if (!owner || w.swarm.drones.at(static_cast<std::size_t>(*owner)).views.empty()) continue;
      const protocol::View& v = w.swarm.drones.at(static_cast<std::size_t>(*owner)).views.front();
      const protocol::Box box = protocol::Box::of(w.swarm.zone(z));
      imgs.emplace_back("zone" + std::to_string(z) + "_truth", v.image);
      imgs.emplace_back("zone" + std::to_string(z) + "_before",
                        protocol::render_clipped(target.field, v.pose, w.swarm.sensor, box, cfg.eval_samples));
      imgs.emplace_back("zone" + std::to_string(z) + "_after",
                        protocol::render_clipped(out.field, v.pose, w.swarm.sensor, box, cfg.eval_samples));
    }
    const auto ckpt = radiance::encode_checkpoint(out.field);
    e.field_digest = detail::hex64(hash_bytes(ckpt));
    m.fields.push_back(std::move(out.field));
    m.images.push_back(std::move(imgs));
    m.reports.insert(m.reports.end(), out.session.reports.begin(), out.session.reports.end());
    for (const auto& r : out.session.reports) {
      if (r.delivered) fl_clock = std::max(fl_clock, r.arrival_time);
    }
    m.exchanges.push_back(std::move(e));

    // FL contributions aggregate every k sessions into the shared generator
    if (out.fl_contribution) pending.push_back(*out.fl_contribution);
    if (!pending.empty() && (static_cast<int>(i) + 1) % cfg.generator.aggregate_every == 0) {
      std::vector<int> who;
      for (const auto& u : pending) who.push_back(u.client_id);
      w.models.generator.values = federation::fedavg(pending);
      const int aggregator = w.swarm.drones.front().id;
      std::vector<int> all_who = who;
      all_who.push_back(aggregator);
      detail::charge_fl(fl_reports, w.topo, who, aggregator, pbytes, fl_clock, fl_seq);
      pending.clear();
    }
  }
  m.timing["sessions"] = clk.lap();

  m.reports.insert(m.reports.end(), fl_reports.begin(), fl_reports.end());
  const netsim::BandwidthLedger all = netsim::bandwidth_ledger(m.reports);
  m.bytes_by_kind = detail::kind_map(all);
  m.total_bytes = all.total();
  m.fl_bytes = all.of(PayloadKind::kFlParams);
  m.timing["total"] = total.lap();
  if (!cfg.output_dir.empty()) emit_report(std::span(&m, 1), cfg.output_dir);
  return m;
}

/// Runs scenarios on up to `threads` workers; results keep the input order.
inline std::vector<RunMetrics> run_many(const std::vector<ScenarioConfig>& cfgs, int threads) {
  std::vector<RunMetrics> out(cfgs.size());
  std::vector<std::exception_ptr> errors(cfgs.size());
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(cfgs.size())));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cfgs.size(); i = next++) {
      try {
        out[i] = run_scenario(cfgs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

/// Worker cap from SWARMSYNTH_THREADS (unset or invalid: hardware concurrency).
inline int thread_cap() {
  const int hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SWARMSYNTH_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) return std::min(v, hw);
    } catch (...) {
    }
  }
  return hw;
}

// ---------------------------------------------------------------------------
// Reports

struct ModeRow {
  std::string mode;
  std::size_t exchanges = 0;
  double mean_bytes = 0.0;
  std::uint64_t max_bytes = 0;
  std::string band;
  double psnr_before = 0.0;
  double psnr_after = 0.0;
  double distortion_before = 0.0;
  double distortion_after = 0.0;
  double utility = 0.0;
};

inline std::vector<ModeRow> comparison_table(std::span<const ExchangeMetrics> ex) {
  std::vector<ModeRow> rows;
  for (CooperationMode mode : protocol::kAllModes) {
    ModeRow r;
    r.mode = std::string(protocol::mode_name(mode));
    for (const ExchangeMetrics& e : ex) {
      if (e.mode != r.mode) continue;
      ++r.exchanges;
      r.mean_bytes += static_cast<double>(e.cooperation_bytes);
      r.max_bytes = std::max(r.max_bytes, e.cooperation_bytes);
      r.psnr_before += e.psnr_before;
      r.psnr_after += e.psnr_after;
      r.distortion_before += e.distortion_before;
      r.distortion_after += e.distortion_after;
      r.utility += e.utility;
    }
    if (r.exchanges == 0) continue;
    const double n = static_cast<double>(r.exchanges);
    r.mean_bytes /= n;
    r.psnr_before /= n;
    r.psnr_after /= n;
    r.distortion_before /= n;
    r.distortion_after /= n;
    r.utility /= n;
    r.band = bandwidth_band(static_cast<std::uint64_t>(std::llround(r.mean_bytes)));
    rows.push_back(r);
  }
  return rows;
}

inline std::string table_csv(std::span<const ModeRow> rows) {
  std::ostringstream s;
  s.precision(10);
  s << "mode,exchanges,mean_bytes,max_bytes,band,psnr_before,psnr_after,distortion_before,distortion_after,utility\n";
  for (const ModeRow& r : rows) {
    s << r.mode << ',' << r.exchanges << ',' << r.mean_bytes << ',' << r.max_bytes << ',' << r.band << ','
      << r.psnr_before << ',' << r.psnr_after << ',' << r.distortion_before << ',' << r.distortion_after << ','
      << r.utility << '\n';
  }
  return s.str();
}

namespace detail {

inline void write_file(const std::filesystem::path& p, std::string_view bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

inline void make_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec || !std::filesystem::is_directory(p)) throw std::runtime_error("cannot create directory " + p.string());
}

}  // namespace detail

inline std::string metrics_jsonl(std::span<const RunMetrics> runs) {
  std::string s;
  for (const RunMetrics& m : runs) {
    s += run_summary_json(m).dump() + "\n";
    for (const ExchangeMetrics& e : m.exchanges) s += to_json(e).dump() + "\n";
  }
  return s;
}

/// metrics.jsonl, report.csv, timing.json, per-exchange field checkpoints and PPM dumps.
inline void emit_report(std::span<const RunMetrics> runs, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  detail::make_dir(root);
  detail::write_file(root / "metrics.jsonl", metrics_jsonl(runs));
  std::vector<ExchangeMetrics> ex;
  json timing = json::array();
  for (const RunMetrics& m : runs) {
    ex.insert(ex.end(), m.exchanges.begin(), m.exchanges.end());
    timing.push_back({{"seed", m.seed}, {"seconds", m.timing}});
  }
  detail::write_file(root / "report.csv", table_csv(comparison_table(ex)));
  detail::write_file(root / "timing.json", timing.dump(2) + "\n");
  for (const RunMetrics& m : runs) {
    for (std::size_t i = 0; i < m.fields.size(); ++i) {
      const std::string tag = "seed" + std::to_string(m.seed) + "_ex" + std::to_string(i);
      const auto ck = radiance::encode_checkpoint(m.fields[i]);
      detail::write_file(root / (tag + "_field.ckpt"), {reinterpret_cast<const char*>(ck.data()), ck.size()});
      if (i >= m.images.size()) continue;
      const fs::path img_dir = root / "images";
      detail::make_dir(img_dir);
      for (const auto& [name, img] : m.images[i]) {
        const auto ppm = encode_ppm(img);
        detail::write_file(img_dir / (tag + "_" + name + ".ppm"), {reinterpret_cast<const char*>(ppm.data()), ppm.size()});
      }
    }
  }
}

/// Reads exchange lines back from metrics.jsonl files.
inline std::vector<ExchangeMetrics> read_exchanges(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<ExchangeMetrics> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    if (j.value("type", "") == "exchange") out.push_back(exchange_from_json(j));
  }
  return out;
}

}  // namespace swarmsynth::harness
