#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "barcodemamba/experiment.hpp"

namespace fs = std::filesystem;
using namespace bm;

namespace {

struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string precision;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "experiment config (key = value lines)");
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--set", overrides, "override a config key (key=value)");
  }

  ExperimentConfig resolve() const {
    auto cfg = config.empty() ? ExperimentConfig{} : ExperimentConfig::load(config);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + o);
      set_config_value(cfg, o.substr(0, eq), o.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (!out.empty()) cfg.out = out;
    if (!precision.empty()) cfg.precision = parse_precision(precision);
    cfg.validate();
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DNA barcode language models with selective state-space backbones"};
  app.require_subcommand(1);

  SynthSpec synth;
  std::string synth_out = "synth.tsv";
  auto* c_synth = app.add_subcommand("synth", "generate a labeled synthetic barcode corpus (TSV)");
  c_synth->add_option("--genera", synth.genera);
  c_synth->add_option("--species-per-genus", synth.species_per_genus);
  c_synth->add_option("--per-species", synth.per_species);
  c_synth->add_option("--noise", synth.noise);
  c_synth->add_option("--length", synth.length);
  c_synth->add_option("--seed", synth.seed);
  c_synth->add_option("--out", synth_out, "output TSV path");

  RunFlags flags;
  std::vector<std::pair<std::string, CLI::App*>> stages;
  for (const auto& [name, help] :
       std::vector<std::pair<std::string, std::string>>{{"prepare", "build and persist the dataset splits"},
                                                        {"pretrain", "self-supervised pretraining"},
                                                        {"finetune", "species fine-tuning from the pretrained checkpoint"},
                                                        {"probe", "linear and 1-NN probes on frozen embeddings"},
                                                        {"run", "prepare, pretrain, finetune and probe in one go"},
                                                        {"config", "print the resolved config"}}) {
    auto* cmd = app.add_subcommand(name, help);
    flags.attach(cmd);
    stages.emplace_back(name, cmd);
  }

  RunFlags sweep_flags;
  std::string sweep_kind = "ablation";
  int workers = 1;
  bool resume = false;
  auto* c_sweep = app.add_subcommand("sweep", "run the ablation or scaling grid");
  sweep_flags.attach(c_sweep);
  c_sweep->add_option("--kind", sweep_kind)->check(CLI::IsMember({"ablation", "scaling"}));
  c_sweep->add_option("--workers", workers, "concurrent cells");
  c_sweep->add_flag("--resume", resume, "skip cells already in the ledger");

  std::string report_in, report_out;
  auto* c_report = app.add_subcommand("report", "scaling series, charts and summary from results");
  c_report->add_option("--in", report_in, "results directory")->required();
  c_report->add_option("--out", report_out, "report directory (default: <in>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (c_synth->parsed()) {
      synth.validate();
      const auto records = synthesize(synth);
      write_records(synth_out, records);
      std::cout << nlohmann::json{{"records", records.size()}, {"out", synth_out}, {"spec", synth.to_json()}}.dump(2)
                << "\n";
      return 0;
    }
    for (const auto& [name, cmd] : stages) {
      if (!cmd->parsed()) continue;
      const auto cfg = flags.resolve();
      nlohmann::json result;
      if (name == "config") {
        std::cout << cfg.to_text();
        return 0;
      } else if (name == "prepare") {
        const auto b = prepare_data(cfg);
        result = nlohmann::json::object();
        for (auto part : kPartitionNames) result[std::string(part)] = partition(b, part).size();
        result["hash"] = hex64(bundle_hash(b));
      } else if (name == "pretrain") {
        result = run_pretrain(cfg);
      } else if (name == "finetune") {
        result = run_finetune(cfg);
      } else if (name == "probe") {
        result = run_probe(cfg);
        collect_metrics(cfg);
      } else {
        result = run_pipeline(cfg).to_json();
      }
      std::cout << result.dump(2) << "\n";
      return 0;
    }
    if (c_sweep->parsed()) {
      auto base = sweep_flags.resolve();
      const fs::path dir = sweep_flags.out.empty() ? base.out : fs::path(sweep_flags.out);
      SweepOptions opts;
      opts.workers = workers;
      opts.resume = resume;
      opts.on_cell_start = [](const SweepCell& c) { std::cerr << "cell " << c.id << "\n"; };
      const auto res = run_sweep(dir, parse_sweep_kind(sweep_kind), base, opts);
      std::cout << results_csv(res.rows);
      std::cerr << "executed " << res.executed << ", skipped " << res.skipped << "\n";
      return res.complete ? 0 : 1;
    }
    if (c_report->parsed()) {
      const fs::path out = report_out.empty() ? fs::path(report_in) / "report" : fs::path(report_out);
      std::cout << write_report(report_in, out).dump(2) << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
