// swarmsynth command line: run scenarios, benchmark the binning codec, merge reports.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "swarmsynth/coding.hpp"
#include "swarmsynth/harness.hpp"

using namespace swarmsynth;

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

int cmd_run(const std::string& config, const std::vector<std::uint64_t>& seeds, const std::string& mode,
            const std::string& out) {
  harness::ScenarioConfig base = harness::load_config(config);
  if (mode == "auto") {
    base.mode.reset();
  } else if (!mode.empty()) {
    const auto m = protocol::parse_mode(mode);
    if (!m) throw harness::ConfigError({"unknown mode '" + mode + "'"});
    base.mode = m;
  }
  std::vector<harness::ScenarioConfig> cfgs;
  const std::vector<std::uint64_t> run_seeds = seeds.empty() ? std::vector<std::uint64_t>{base.seed} : seeds;
  for (std::uint64_t s : run_seeds) {
    harness::ScenarioConfig c = base;
    c.seed = s;
    // one directory per run so workers never share files
    c.output_dir = run_seeds.size() == 1 ? out : (std::filesystem::path(out) / ("seed_" + std::to_string(s))).string();
    cfgs.push_back(c);
  }
  const auto runs = harness::run_many(cfgs, harness::thread_cap());
  for (const auto& m : runs) {
    for (const auto& e : m.exchanges) {
      std::printf("seed %llu exchange %d %s %s bytes %llu psnr %.2f -> %.2f f1 %.2f -> %.2f\n",
                  static_cast<unsigned long long>(m.seed), e.index, e.mode.c_str(), e.phase.c_str(),
                  static_cast<unsigned long long>(e.cooperation_bytes), e.psnr_before, e.psnr_after, e.f1_before,
                  e.f1_after);
    }
  }
  return 0;
}

int cmd_bench(const std::string& source, double p, double rate, unsigned block, std::uint64_t trials,
              std::uint64_t seed, const std::string& out) {
  if (source != "dsbs") throw harness::ConfigError({"unsupported source '" + source + "' (only dsbs)"});
  if (!(p >= 0.0 && p <= 0.5)) throw harness::ConfigError({"--p must lie in [0, 0.5]"});
  if (block < 1 || block > static_cast<unsigned>(coding::kMaxLinearBlock)) {
    throw harness::ConfigError({"--block must lie in [1, " + std::to_string(coding::kMaxLinearBlock) + "]"});
  }
  if (trials == 0) throw harness::ConfigError({"--trials must be >= 1"});
  const coding::BinningCode code = coding::make_binning_code(2, static_cast<int>(block), rate, seed);
  const coding::BlockErrorStats st = coding::dsbs_block_errors(code, p, trials, seed);
  const double h = coding::binary_entropy(p);
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  f.precision(10);
  f << "source,p,rate,effective_rate,block,trials,h_x_given_y,block_errors,decoder_failures,block_error_rate\n";
  f << source << ',' << p << ',' << rate << ',' << static_cast<double>(code.index_bits) / block << ',' << block << ','
    << trials << ',' << h << ',' << st.errors << ',' << st.failures << ',' << st.rate() << '\n';
  std::printf("block error rate %.4f (%llu/%llu), H(X|Y) = %.4f\n", st.rate(), static_cast<unsigned long long>(st.errors),
              static_cast<unsigned long long>(st.trials), h);
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<harness::ExchangeMetrics> ex;
  for (const std::string& d : dirs) {
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_regular_file(d)) {
      files.push_back(d);
    } else if (std::filesystem::is_directory(d)) {
      for (const auto& ent : std::filesystem::recursive_directory_iterator(d)) {
        if (ent.is_regular_file() && ent.path().filename() == "metrics.jsonl") files.push_back(ent.path());
      }
      std::sort(files.begin(), files.end());
    } else {
      throw std::runtime_error("no such input " + d);
    }
    for (const auto& p : files) {
      const auto part = harness::read_exchanges(p.string());
      ex.insert(ex.end(), part.begin(), part.end());
    }
  }
  const std::string csv = harness::table_csv(harness::comparison_table(ex));
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  f << csv;
  std::cout << csv;
  return 0;
}

int cmd_validate(const std::string& config) {
  const harness::ScenarioConfig c = harness::load_config(config);
  std::printf("ok %016llx\n", static_cast<unsigned long long>(harness::config_hash(c)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"swarmsynth: cooperative drone perception simulator"};
  app.require_subcommand(1);

  std::string config, mode, out, source = "dsbs", in_out;
  std::vector<std::uint64_t> seeds;
  double p = 0.11, rate = 0.75;
  unsigned block = 16;
  std::uint64_t trials = 10000, bench_seed = 1;
  std::vector<std::string> inputs;

  CLI::App* run = app.add_subcommand("run", "run a scenario and write metrics, report and dumps");
  run->add_option("--config", config, "scenario JSON")->required();
  run->add_option("--seed", seeds, "seed override; repeat for several runs");
  run->add_option("--mode", mode, "auto|raw|latent|semantic|detections (default: from config)");
  run->add_option("--out", out, "output directory")->required();

  CLI::App* bench = app.add_subcommand("bench-coding", "Monte Carlo block errors of the binning codec");
  bench->add_option("--source", source, "correlation model")->default_val("dsbs");
  bench->add_option("--p", p, "crossover probability")->required();
  bench->add_option("--rate", rate, "bits per symbol")->required();
  bench->add_option("--block", block, "block length")->required();
  bench->add_option("--trials", trials, "blocks")->required();
  bench->add_option("--seed", bench_seed, "code and sampling seed");
  bench->add_option("--out", out, "CSV output")->required();

  CLI::App* report = app.add_subcommand("report", "merge metrics into a mode comparison table");
  report->add_option("--in", inputs, "run directories or metrics.jsonl files")->required();
  report->add_option("--out", in_out, "CSV output")->required();

  CLI::App* validate = app.add_subcommand("validate-config", "check a scenario config");
  validate->add_option("--config", config, "scenario JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (run->parsed()) return cmd_run(config, seeds, mode, out);
    if (bench->parsed()) return cmd_bench(source, p, rate, block, trials, bench_seed, out);
    if (report->parsed()) return cmd_report(inputs, in_out);
    if (validate->parsed()) return cmd_validate(config);
  } catch (const harness::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kRuntimeError;
}
