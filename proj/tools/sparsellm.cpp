// sparsellm: prune, evaluate and generate toy models from the command line.
//
//   sparsellm fixture --fixture seed=1,depth=3,dim=64,kind=mixed --out toy
//   sparsellm prune --model toy/model --calib toy/calib --sparsity 0.8 --out run
//   sparsellm eval --model run/model --calib run/calib --report run/report.json

#include <sparsellm/cli.hpp>

#include <CLI11.hpp>

#include <exception>
#include <iostream>
#include <string>

namespace {

using sparsellm::cli::json;

struct Flags {
  std::string config;
  double alpha = 0, beta = 0, sparsity = 0, layer_fraction = 0, damp = 0;
  int epochs = 0, samples = 0, tokens = 0, threads = 0;
  std::uint64_t seed = 0;
  std::string nm, criterion, omega, output_update, model, fixture, calib, out, report;
  std::vector<std::string> omega_block;

  std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> setters;

  template <class T>
  void add(CLI::App* app, const std::string& name, T& var, const std::string& key,
           const std::string& help) {
    CLI::Option* opt = app->add_option(name, var, help);
    setters.emplace_back(opt, [&var, key](json& j) { j[key] = var; });
  }

  void attach(CLI::App* app, bool pruning) {
    app->add_option("--config", config, "JSON config file; flags override its values");
    add(app, "--model", model, "model", "model container directory");
    add(app, "--fixture", fixture, "fixture", "toy model: seed=<u64>,depth=<n>,dim=<n>,kind=<relu|gated|mixed>");
    add(app, "--calib", calib, "calib", "calibration container directory");
    add(app, "--samples", samples, "samples", "number of synthesized calibration samples");
    add(app, "--tokens", tokens, "tokens", "positions per synthesized calibration sample");
    add(app, "--out", out, "out", "output directory");
    add(app, "--seed", seed, "seed", "run seed (fixture and synthesized calibration)");
    if (!pruning) {
      add(app, "--report", report, "report", "report.json to verify against");
      return;
    }
    add(app, "--sparsity", sparsity, "sparsity", "unstructured sparsity fraction in [0, 1]");
    add(app, "--nm", nm, "nm", "semi-structured n:m pattern (n kept per m)");
    add(app, "--alpha", alpha, "alpha", "weight of the linear-layer penalties");
    add(app, "--beta", beta, "beta", "weight of the activation penalty");
    add(app, "--epochs", epochs, "epochs", "alternating epochs per FFN block");
    add(app, "--criterion", criterion, "criterion", "magnitude|wanda");
    add(app, "--omega", omega, "omega", "global|local");
    app->add_option("--omega-block", omega_block, "per-block override <index>=<global|local>");
    add(app, "--layer-fraction", layer_fraction, "layer_fraction", "leading fraction of blocks to prune");
    add(app, "--damp", damp, "damp", "reconstruction damping");
    add(app, "--output-update", output_update, "output_update", "exact|paper");
    add(app, "--threads", threads, "threads", "block-level worker threads");
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [opt, set] : setters)
      if (opt->count() > 0) set(j);
    if (!omega_block.empty()) {
      json ov = json::object();
      for (const auto& item : omega_block) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
          throw sparsellm::ConfigError("omega_overrides", "expected <index>=<mode>, got '" + item + "'");
        }
        ov[item.substr(0, eq)] = item.substr(eq + 1);
      }
      j["omega_overrides"] = ov;
    }
    return j;
  }
};

void print_nested(const std::exception& e, int depth = 0) {
  std::cerr << (depth == 0 ? "sparsellm: error: " : "  caused by: ") << e.what() << "\n";
  try {
    std::rethrow_if_nested(e);
  } catch (const std::exception& inner) {
    print_nested(inner, depth + 1);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SparseLLM-style global pruning of FFN blocks"};
  app.require_subcommand(1);

  Flags prune_flags, eval_flags, fixture_flags;
  CLI::App* prune = app.add_subcommand("prune", "prune a model and write model, report and trace");
  CLI::App* eval = app.add_subcommand("eval", "recompute metrics and audit a pruned model");
  CLI::App* fixture = app.add_subcommand("fixture", "generate a toy model and calibration set");
  prune_flags.attach(prune, true);
  eval_flags.attach(eval, false);
  fixture_flags.attach(fixture, false);

  CLI11_PARSE(app, argc, argv);

  namespace cli = sparsellm::cli;
  const cli::Log log(cli::log_level_from_env());
  try {
    Flags& flags = prune->parsed() ? prune_flags : eval->parsed() ? eval_flags : fixture_flags;
    const json file = flags.config.empty() ? json::object() : cli::read_config_file(flags.config);
    const cli::RunConfig rc = cli::resolve_config(file, flags.to_json());
    if (prune->parsed()) return cli::run_prune(rc, log);
    if (eval->parsed()) return cli::run_eval(rc, log);
    return cli::run_fixture(rc, log);
  } catch (const sparsellm::ConfigError& e) {
    print_nested(e);
    return 2;
  } catch (const sparsellm::AuditError& e) {
    print_nested(e);
    return 3;
  } catch (const std::exception& e) {
    print_nested(e);
    return 1;
  }
}
