#include <gtest/gtest.h>

#include <filesystem>

#include "swarmsynth/harness.hpp"

using namespace swarmsynth;
using namespace swarmsynth::harness;

namespace {

// Small enough to run a full scenario in about a second.
json tiny_json() {
  return json{{"seed", 3},
              {"scene", {{"dims", {16, 16, 16}}, {"objects", 3}, {"min_size", 2}, {"max_size", 4}}},
              {"swarm",
               {{"drones", 4},
                {"views_per_drone", 2},
                {"sensor_size", 16},
                {"generator_size", 8},
                {"view_distance", 18.0},
                {"view_height", 10.0}}},
              {"generator", {{"hidden", 8}, {"blocks", 1}, {"fl_rounds", 3}, {"local_epochs", 1}, {"codebook_size", 64}}},
              {"protocol",
               {{"field_iterations", 3},
                {"field_samples", 8},
                {"eval_samples", 8},
                {"hallucination_steps", 3},
                {"belief_steps", 2},
                {"refine_steps", 2}}}};
}

ScenarioConfig tiny() { return parse_config(tiny_json()); }

std::vector<std::string> violations_of(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.violations;
  }
  return {};
}

bool mentions(const std::vector<std::string>& v, const std::string& needle) {
  return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("swarmsynth_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, EmptyObjectIsTheDefaultScenario) {
  const ScenarioConfig c = parse_config(json::object());
  EXPECT_EQ(canonical(c), canonical(ScenarioConfig{}));
  EXPECT_EQ(c.drones, 4);
  ASSERT_EQ(c.sessions.size(), 1u);
  EXPECT_EQ(c.sessions[0].target, 0);
  EXPECT_EQ(c.sessions[0].zones, std::vector<int>{3});
  EXPECT_EQ(c.obstructions, (std::vector<std::pair<int, int>>{{0, 3}}));
}

TEST(Config, CanonicalFormIsAFixedPointAndOrderFree) {
  const ScenarioConfig c = tiny();
  const ScenarioConfig again = parse_config(to_json(c));
  EXPECT_EQ(canonical(again), canonical(c));
  EXPECT_EQ(config_hash(again), config_hash(c));
  // same content, keys inserted in the opposite order
  json rev = json::object();
  const json j = tiny_json();
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) rev[*it] = j[*it];
  EXPECT_EQ(config_hash(parse_config(rev)), config_hash(c));
  ScenarioConfig other = c;
  other.seed += 1;
  EXPECT_NE(config_hash(other), config_hash(c));
  other = c;
  other.output_dir = "/somewhere/else";
  EXPECT_EQ(config_hash(other), config_hash(c));
}

TEST(Config, EveryViolationIsReported) {
  json j = tiny_json();
  j["swarm"]["drones"] = 0;
  j["protocol"]["tau"] = -1.0;
  j["cooperation"] = {{"mode", "telepathy"}, {"reliability", 2.0}};
  j["generator"]["lr"] = "fast";
  j["bogus"] = 1;
  j["scene"]["colour"] = "red";
  const auto v = violations_of(j);
  EXPECT_EQ(v.size(), 7u);
  EXPECT_TRUE(mentions(v, "'swarm.drones'"));
  EXPECT_TRUE(mentions(v, "'protocol.tau'"));
  EXPECT_TRUE(mentions(v, "'cooperation.mode'"));
  EXPECT_TRUE(mentions(v, "'cooperation.reliability'"));
  EXPECT_TRUE(mentions(v, "'generator.lr' has the wrong type"));
  EXPECT_TRUE(mentions(v, "'bogus' is not a recognized key"));
  EXPECT_TRUE(mentions(v, "'scene.colour' is not a recognized key"));
}

TEST(Config, CrossFieldChecks) {
  json j = tiny_json();
  j["cooperation"] = {{"sessions", {{{"target", 9}, {"zones", {1, 7}}}, {{"target", 0}, {"zones", json::array()}}}}};
  j["topology"] = {{"obstructions", {{0, 0}}}, {"links", {{0, 1, -5.0, 0.1}}}};
  j["swarm"]["generator_size"] = 12;
  const auto v = violations_of(j);
  EXPECT_TRUE(mentions(v, "session 0 targets unknown drone 9"));
  EXPECT_TRUE(mentions(v, "session 0 requests unknown zone 7"));
  EXPECT_TRUE(mentions(v, "session 1 requests no zones"));
  EXPECT_TRUE(mentions(v, "obstruction [0,0]"));
  EXPECT_TRUE(mentions(v, "link [0,1] needs positive capacity"));
  EXPECT_TRUE(mentions(v, "must divide"));
  EXPECT_EQ(v.size(), 6u);
}

TEST(Config, NotAnObjectAndBadFile) {
  EXPECT_FALSE(violations_of(json::array()).empty());
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
  const auto p = scratch_dir("badjson");
  std::filesystem::create_directories(p);
  std::ofstream(p / "c.json") << "{ not json";
  EXPECT_THROW(load_config((p / "c.json").string()), ConfigError);
}

TEST(Config, ExplicitLinksReplaceTheMesh) {
  json j = tiny_json();
  j["topology"] = {{"obstructions", json::array()}, {"links", {{0, 1, 100.0, 0.0}, {1, 0, 100.0, 0.0}}}};
  const ScenarioConfig c = parse_config(j);
  const netsim::Topology t = build_topology(c);
  EXPECT_TRUE(t.has_link(0, 1));
  EXPECT_FALSE(t.has_link(0, 2));
  j["topology"]["obstructions"] = {{0, 1}};
  EXPECT_TRUE(mentions(violations_of(j), "crosses an obstruction"));
}

TEST(Bands, Boundaries) {
  EXPECT_EQ(bandwidth_band(0), "Low");
  EXPECT_EQ(bandwidth_band(999'999), "Low");
  EXPECT_EQ(bandwidth_band(1'000'000), "Medium");
  EXPECT_EQ(bandwidth_band(5'000'000), "Medium");
  EXPECT_EQ(bandwidth_band(5'000'001), "Unbanded");
  EXPECT_EQ(bandwidth_band(10'000'000), "Unbanded");
  EXPECT_EQ(bandwidth_band(10'000'001), "High");
}

TEST(Utility, FormulaAndDomain) {
  EXPECT_DOUBLE_EQ(communication_utility(0.2, 0.7, 100000, 1.0, 1e-6), 0.5 - 0.1);
  EXPECT_DOUBLE_EQ(communication_utility(0.5, 0.5, 0, 1.0, 1e-6), 0.0);
  EXPECT_DOUBLE_EQ(communication_utility(0.0, 1.0, 10, 2.0, 0.0), 2.0);
  EXPECT_NEAR(communication_utility(0.3, 0.5, 10000, 1.0, 1e-5), 0.1, 1e-12);
  double last = communication_utility(0.3, 0.5, 0, 1.0, 1e-6);
  for (std::uint64_t b = 1; b < 1u << 24; b *= 4) {
    const double u = communication_utility(0.3, 0.5, b, 1.0, 1e-6);
    EXPECT_LT(u, last);
    last = u;
  }
  EXPECT_THROW(communication_utility(1.1, 0.5, 0, 1, 1), InvalidArgument);
  EXPECT_THROW(communication_utility(0.1, 0.5, 0, -1, 1), InvalidArgument);
}

TEST(Report, EmptyInputGivesHeaderOnly) {
  const std::vector<ExchangeMetrics> none;
  const std::string csv = table_csv(comparison_table(none));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
  const auto dir = scratch_dir("empty");
  emit_report(std::span<const RunMetrics>{}, dir.string());
  EXPECT_TRUE(std::filesystem::exists(dir / "report.csv"));
  EXPECT_EQ(std::filesystem::file_size(dir / "metrics.jsonl"), 0u);
}

TEST(Report, TableAggregatesPerModeInModeOrder) {
  std::vector<ExchangeMetrics> ex(3);
  ex[0].mode = "RAW";
  ex[0].cooperation_bytes = 20'000'000;
  ex[1].mode = "SEMANTIC";
  ex[1].cooperation_bytes = 1000;
  ex[1].psnr_after = 20;
  ex[2].mode = "SEMANTIC";
  ex[2].cooperation_bytes = 3000;
  ex[2].psnr_after = 30;
  const auto rows = comparison_table(ex);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].mode, "SEMANTIC");
  EXPECT_EQ(rows[0].exchanges, 2u);
  EXPECT_DOUBLE_EQ(rows[0].mean_bytes, 2000.0);
  EXPECT_EQ(rows[0].max_bytes, 3000u);
  EXPECT_DOUBLE_EQ(rows[0].psnr_after, 25.0);
  EXPECT_EQ(rows[0].band, "Low");
  EXPECT_EQ(rows[1].band, "High");
}

TEST(Metrics, ExchangeJsonRoundtrip) {
  ExchangeMetrics e;
  e.seed = 9;
  e.zones = {1, 2};
  e.responders = {1};
  e.mode = "LATENT";
  e.bytes_by_kind = {{"LATENT", 5}, {"REQUEST", 3}};
  e.psnr_after = std::numeric_limits<double>::infinity();
  e.delta_traces = {{0.5, 0.25}};
  e.validation_psnr = {12.5};
  e.field_digest = "00ff";
  const ExchangeMetrics back = exchange_from_json(json::parse(to_json(e).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(e).dump());
  EXPECT_TRUE(std::isinf(back.psnr_after));
}

TEST(Scenario, SingleDroneHasNoTrafficAndNoChange) {
  json j = tiny_json();
  j["swarm"]["drones"] = 1;
  const RunMetrics m = run_scenario(parse_config(j));
  ASSERT_EQ(m.exchanges.size(), 1u);
  const ExchangeMetrics& e = m.exchanges[0];
  EXPECT_EQ(e.cooperation_bytes, 0u);
  EXPECT_EQ(e.messages, 0u);
  EXPECT_TRUE(e.responders.empty());
  EXPECT_EQ(e.psnr_after, e.psnr_before);
  EXPECT_EQ(m.fl_bytes, 0u);
  EXPECT_EQ(m.total_bytes, 0u);
}

TEST(Scenario, LedgerReconcilesExactly) {
  const RunMetrics m = run_scenario(tiny());
  ASSERT_EQ(m.exchanges.size(), 1u);
  std::uint64_t coop = 0;
  std::map<std::string, std::uint64_t> kinds;
  for (const auto& e : m.exchanges) {
    coop += e.cooperation_bytes;
    std::uint64_t sum = 0;
    for (const auto& [k, v] : e.bytes_by_kind) {
      sum += v;
      kinds[k] += v;
    }
    EXPECT_EQ(sum, e.cooperation_bytes);
  }
  EXPECT_EQ(coop + m.fl_bytes, m.total_bytes);
  kinds["FL_PARAMS"] += m.fl_bytes;
  EXPECT_EQ(kinds, m.bytes_by_kind);
  EXPECT_EQ(netsim::bandwidth_ledger(m.reports).total(), m.total_bytes);
  const auto& e = m.exchanges[0];
  EXPECT_EQ(e.phase, "DONE");
  EXPECT_EQ(e.responders, std::vector<int>{3});
  EXPECT_GT(e.bytes_by_kind.at("SEMANTIC"), 0u);
  EXPECT_GT(e.bytes_by_kind.at("REQUEST"), 0u);
  EXPECT_EQ(e.band, "Low");
  EXPECT_FALSE(m.fl_losses.empty());
}

TEST(Scenario, DeterministicOutputs) {
  ScenarioConfig c = tiny();
  const auto a_dir = scratch_dir("det_a"), b_dir = scratch_dir("det_b");
  c.output_dir = a_dir.string();
  run_scenario(c);
  c.output_dir = b_dir.string();
  run_scenario(c);
  const auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(a_dir / "metrics.jsonl"), slurp(b_dir / "metrics.jsonl"));
  EXPECT_EQ(read_exchanges((a_dir / "metrics.jsonl").string()).size(), 1u);
  EXPECT_EQ(slurp(a_dir / "report.csv"), slurp(b_dir / "report.csv"));
  EXPECT_EQ(slurp(a_dir / "seed3_ex0_field.ckpt"), slurp(b_dir / "seed3_ex0_field.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(a_dir / "timing.json"));
  EXPECT_TRUE(std::filesystem::exists(a_dir / "images" / "seed3_ex0_zone3_after.ppm"));
}

TEST(Scenario, MetricsFileIsByteIdenticalAcrossRuns) {
  const ScenarioConfig c = tiny();
  const RunMetrics a = run_scenario(c), b = run_scenario(c);
  EXPECT_EQ(metrics_jsonl(std::span(&a, 1)), metrics_jsonl(std::span(&b, 1)));
  ASSERT_EQ(a.fields.size(), b.fields.size());
  for (std::size_t i = 0; i < a.fields.size(); ++i) {
    EXPECT_EQ(radiance::encode_checkpoint(a.fields[i]), radiance::encode_checkpoint(b.fields[i]));
  }
}

TEST(Scenario, WorkerPoolMatchesSequential) {
  std::vector<ScenarioConfig> cfgs;
  for (std::uint64_t s : {4, 5}) {
    ScenarioConfig c = tiny();
    c.seed = s;
    cfgs.push_back(c);
  }
  const auto par = run_many(cfgs, 2);
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    const RunMetrics seq = run_scenario(cfgs[i]);
    EXPECT_EQ(metrics_jsonl(std::span(&par[i], 1)), metrics_jsonl(std::span(&seq, 1)));
  }
}

TEST(Scenario, AutoModeFollowsRouteBandwidth) {
  ScenarioConfig c = tiny();
  c.mode.reset();
  std::vector<netsim::DeliveryReport> reps;
  RunMetrics m;
  c.capacity = 1e9;
  World w = prepare_world(c, m, reps);
  // 0 -> 3 relays through 1; every hop has the mesh capacity
  EXPECT_DOUBLE_EQ(route_bandwidth(w.topo, 3, 0), 1e9);
  EXPECT_EQ(resolve_mode(c, w, c.sessions[0]), CooperationMode::kSemantic);  // untrusted
  c.trusted = true;
  EXPECT_EQ(resolve_mode(c, w, c.sessions[0]), CooperationMode::kLatent);
  c.priority = protocol::TaskPriority::kSafety;
  EXPECT_EQ(resolve_mode(c, w, c.sessions[0]), CooperationMode::kRaw);
  c.trusted = false;
  w.topo = netsim::Topology::fully_connected(4, {5e4, 0.01}, std::vector<netsim::NodePair>{{0, 3}});
  EXPECT_EQ(resolve_mode(c, w, c.sessions[0]), CooperationMode::kDetectionsOnly);
  w.topo = netsim::Topology::fully_connected(4, {1e6, 0.01}, std::vector<netsim::NodePair>{{0, 3}});
  EXPECT_EQ(resolve_mode(c, w, c.sessions[0]), CooperationMode::kSemantic);
}

TEST(Scenario, ModeOrderingOnTinyScenario) {
  std::map<CooperationMode, std::uint64_t> bytes;
  for (CooperationMode mode : protocol::kAllModes) {
    ScenarioConfig c = tiny();
    c.mode = mode;
    const RunMetrics m = run_scenario(c);
    bytes[mode] = m.exchanges.at(0).cooperation_bytes;
  }
  EXPECT_LT(bytes[CooperationMode::kDetectionsOnly], bytes[CooperationMode::kSemantic]);
  EXPECT_LT(bytes[CooperationMode::kSemantic], bytes[CooperationMode::kLatent]);
  EXPECT_LT(bytes[CooperationMode::kLatent], bytes[CooperationMode::kRaw]);
}

TEST(Scenario, RefusesInvalidConfig) {
  ScenarioConfig c = tiny();
  c.sessions = {SessionSpec{7, {0}}};
  EXPECT_THROW(run_scenario(c), ConfigError);
}
