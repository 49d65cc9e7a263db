// mmfm: command-line driver for the data, training, adaptation and
// evaluation stages.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration or argument
// error, 3 missing prerequisite artifact, 4 numerical failure, 5 file format
// or I/O error.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mmfm/config.hpp"
#include "mmfm/error.hpp"
#include "mmfm/pipeline.hpp"

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kPrerequisite = 3, kNumerical = 4, kFormat = 5 };

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool config_required) {
  auto* c = cmd->add_option("-c,--config", opts.config, "JSON run configuration");
  if (config_required) c->required();
  cmd->add_option("--set", opts.overrides, "Override a config key, e.g. train.learning_rate=1e-3")
      ->take_all();
  cmd->add_option("--seed", opts.seed, "Replace the configured top-level seed");
}

mmfm::RunConfig resolve(const CommonOptions& opts) {
  return mmfm::load_config(opts.config, opts.overrides, opts.seed);
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "mmfm: " << kind << ": " << e.what() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-aware massive-MIMO precoding model: data, training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", mmfm::build_version());

  CommonOptions opts;
  int iterations = 16;
  int n_tx = 0;
  int n_users = 0;

  struct Stage {
    const char* name;
    const char* help;
  };
  const Stage stages[] = {
      {"gen-data", "Generate the channel pool of every configured environment"},
      {"pretrain", "Anchor WMMSE rates and run max-sum-rate pre-training"},
      {"train", "Run multi-objective training from the pre-trained checkpoint"},
      {"adapt", "Train the default head and the deployment heads"},
      {"eval", "Max-sum-rate evaluation on training and deployment sites"},
      {"sweep", "Rate-requirement sweeps with energy/accuracy summaries"},
  };
  for (const Stage& s : stages) add_common(app.add_subcommand(s.name, s.help), opts, true);

  CLI::App* flops = app.add_subcommand("flops", "Per-decision FLOP counts of ZF, WMMSE and the model");
  add_common(flops, opts, false);
  flops->add_option("--iterations", iterations, "WMMSE iterations")->check(CLI::PositiveNumber);
  flops->add_option("--n-tx", n_tx, "Override the antenna count")->check(CLI::PositiveNumber);
  flops->add_option("--n-users", n_users, "Override the user count")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();

    if (name == "flops") {
      mmfm::RunConfig cfg;
      if (!opts.config.empty()) {
        cfg = resolve(opts);
      } else {
        mmfm::EnvironmentEntry e;
        e.spec.env_id = "default";
        cfg.channel.push_back(e);
      }
      if (n_tx > 0) cfg.system.n_tx = n_tx;
      if (n_users > 0) cfg.system.n_users = n_users;
      mmfm::Pipeline p(cfg);
      const auto r = p.flops(iterations);
      std::cout << r.metrics.dump(2) << '\n';
      return kOk;
    }

    mmfm::Pipeline p(resolve(opts));
    mmfm::StageResult r;
    if (name == "gen-data") {
      r = p.gen_data();
    } else if (name == "pretrain") {
      r = p.pretrain();
    } else if (name == "train") {
      r = p.train();
    } else if (name == "adapt") {
      r = p.adapt();
    } else if (name == "eval") {
      r = p.eval();
    } else if (name == "sweep") {
      r = p.sweep();
    }
    for (const auto& out : r.outputs) std::cout << out.string() << '\n';
    return kOk;
  } catch (const mmfm::ConfigError& e) {
    return report("configuration error", e, kConfig);
  } catch (const mmfm::InvalidArgument& e) {
    return report("invalid input", e, kConfig);
  } catch (const mmfm::PrerequisiteError& e) {
    return report("missing prerequisite", e, kPrerequisite);
  } catch (const mmfm::NumericalError& e) {
    return report("numerical failure", e, kNumerical);
  } catch (const mmfm::SingularMatrixError& e) {
    return report("numerical failure", e, kNumerical);
  } catch (const mmfm::FormatError& e) {
    return report("file error", e, kFormat);
  } catch (const std::filesystem::filesystem_error& e) {
    return report("file error", e, kFormat);
  } catch (const std::exception& e) {
    return report("error", e, kOther);
  }
}
