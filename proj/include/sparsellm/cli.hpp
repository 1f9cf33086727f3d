#pragma once

// Run configuration and the prune / eval / fixture commands behind the
// command-line tool. Argument parsing itself lives in tools/.

#include <sparsellm/error.hpp>
#include <sparsellm/evalkit.hpp>
#include <sparsellm/global_prune.hpp>
#include <sparsellm/model_io.hpp>
#include <sparsellm/netmodel.hpp>

#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace sparsellm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kDefaultSamples = 64;

enum class LogLevel { Quiet, Info, Debug };

/// Reads SPARSELLM_LOG: quiet|0, info|1 (default), debug|2.
inline LogLevel log_level_from_env() {
  const char* v = std::getenv("SPARSELLM_LOG");
  if (v == nullptr) return LogLevel::Info;
  const std::string s(v);
  if (s == "quiet" || s == "0" || s == "off") return LogLevel::Quiet;
  if (s == "debug" || s == "2") return LogLevel::Debug;
  return LogLevel::Info;
}

class Log {
public:
  explicit Log(LogLevel level, std::ostream& out = std::cerr) : level_(level), out_(&out) {}

  void info(const std::string& msg) const {
    if (level_ != LogLevel::Quiet) *out_ << "sparsellm: " << msg << "\n";
  }
  void debug(const std::string& msg) const {
    if (level_ == LogLevel::Debug) *out_ << "sparsellm: " << msg << "\n";
  }

private:
  LogLevel level_;
  std::ostream* out_;
};

struct RunConfig {
  PruneConfig prune;
  std::optional<std::string> model;
  std::optional<FixtureSpec> fixture;
  std::optional<std::string> calib;
  std::optional<int> samples;
  int tokens = FixtureSpec{}.tokens;
  std::string out = "sparsellm-out";
  std::optional<std::string> report;

  /// Fully resolved settings, suitable for echoing.
  json to_json() const;
};

// ---------------------------------------------------------------------------
// Parsing helpers

inline FixtureMix parse_fixture_mix(const std::string& s) {
  if (s == "relu") return FixtureMix::ReLU;
  if (s == "gated") return FixtureMix::Gated;
  if (s == "mixed") return FixtureMix::Mixed;
  throw ConfigError("fixture.kind", "expected relu, gated or mixed, got '" + s + "'");
}

inline Criterion parse_criterion(const std::string& s) {
  if (s == "magnitude") return Criterion::Magnitude;
  if (s == "wanda") return Criterion::Wanda;
  throw ConfigError("criterion", "expected magnitude or wanda, got '" + s + "'");
}

inline OmegaMode parse_omega(const std::string& s, const std::string& field = "omega") {
  if (s == "global") return OmegaMode::Global;
  if (s == "local") return OmegaMode::Local;
  throw ConfigError(field, "expected global or local, got '" + s + "'");
}

inline OutputUpdateMode parse_output_update(const std::string& s) {
  if (s == "exact") return OutputUpdateMode::ExactBranch;
  if (s == "paper") return OutputUpdateMode::PaperIfThen;
  throw ConfigError("output_update", "expected exact or paper, got '" + s + "'");
}

/// "2:4" -> {2, 4}
inline SemiStructured parse_nm(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ConfigError("nm", "expected n:m, got '" + s + "'");
  try {
    std::size_t pn = 0, pm = 0;
    const int n = std::stoi(s.substr(0, colon), &pn);
    const int m = std::stoi(s.substr(colon + 1), &pm);
    if (pn != colon || pm != s.size() - colon - 1) throw std::invalid_argument(s);
    SemiStructured nm{n, m};
    validate_pattern(nm);
    return nm;
  } catch (const std::logic_error&) {
    throw ConfigError("nm", "expected n:m, got '" + s + "'");
  }
}

/// "seed=3,depth=3,dim=64,kind=relu" to the equivalent JSON object.
inline json parse_fixture_string(const std::string& s) {
  json j = json::object();
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("fixture", "expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq);
    const std::string value = item.substr(eq + 1);
    if (key == "kind") {
      j[key] = value;
      continue;
    }
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      j[key] = v;
    } catch (const std::logic_error&) {
      throw ConfigError("fixture." + key, "expected a non-negative integer, got '" + value + "'");
    }
  }
  return j;
}

namespace detail {

template <class T>
T get_as(const json& j, const std::string& field) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(field, "wrong type: " + j.dump());
  }
}

inline double get_number(const json& j, const std::string& field) {
  if (!j.is_number()) throw ConfigError(field, "expected a number, got " + j.dump());
  return j.get<double>();
}

inline long long get_integer(const json& j, const std::string& field) {
  if (!j.is_number_integer()) throw ConfigError(field, "expected an integer, got " + j.dump());
  return j.get<long long>();
}

inline int get_int_in(const json& j, const std::string& field, long long lo, long long hi) {
  const long long v = get_integer(j, field);
  if (v < lo || v > hi) {
    throw ConfigError(field, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return static_cast<int>(v);
}

inline std::uint64_t get_u64(const json& j, const std::string& field) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
    throw ConfigError(field, "expected a non-negative integer, got " + j.dump());
  }
  return j.get<std::uint64_t>();
}

inline FixtureSpec fixture_from_json(const json& j, std::uint64_t default_seed) {
  const json obj = j.is_string() ? parse_fixture_string(j.get<std::string>()) : j;
  if (!obj.is_object()) throw ConfigError("fixture", "expected an object or key=value list");
  static const std::set<std::string> keys{"seed", "depth", "dim", "kind", "expansion"};
  FixtureSpec f;
  f.seed = default_seed;
  for (const auto& [k, v] : obj.items()) {
    if (!keys.count(k)) throw ConfigError("fixture." + k, "unknown key");
  }
  if (obj.contains("seed")) f.seed = get_u64(obj.at("seed"), "fixture.seed");
  if (obj.contains("depth")) f.depth = get_int_in(obj.at("depth"), "fixture.depth", 1, 4096);
  if (obj.contains("dim")) f.dim = get_int_in(obj.at("dim"), "fixture.dim", 1, 1 << 16);
  if (obj.contains("expansion")) {
    f.expansion = get_int_in(obj.at("expansion"), "fixture.expansion", 1, 64);
  }
  if (obj.contains("kind")) {
    f.kind = parse_fixture_mix(get_as<std::string>(obj.at("kind"), "fixture.kind"));
  }
  return f;
}

}  // namespace detail

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "alpha",  "beta",    "epochs", "sparsity", "nm",      "criterion", "omega",
      "omega_overrides",   "layer_fraction",     "damp",    "output_update",
      "seed",   "threads", "model",  "fixture",  "calib",   "samples",   "tokens",
      "out",    "report"};
  return keys;
}

/// Merges a config file object with command-line values (flags win) and
/// validates the result. A flag that picks one side of an exclusive pair
/// (model/fixture, calib/samples, sparsity/nm) replaces the file's choice.
inline RunConfig resolve_config(const json& file, const json& flags) {
  for (const json* src : {&file, &flags}) {
    if (!src->is_object()) throw ConfigError("config", "expected a JSON object");
    for (const auto& [k, v] : src->items()) {
      if (!known_keys().count(k)) throw ConfigError(k, "unknown key");
    }
  }

  json merged = file;
  const std::vector<std::pair<std::string, std::string>> exclusive{
      {"model", "fixture"}, {"calib", "samples"}, {"sparsity", "nm"}};
  for (const auto& [a, b] : exclusive) {
    if (flags.contains(a)) merged.erase(b);
    if (flags.contains(b)) merged.erase(a);
  }
  for (const auto& [k, v] : flags.items()) merged[k] = v;
  for (const auto& [a, b] : exclusive) {
    if (merged.contains(a) && merged.contains(b)) {
      throw ConfigError(b, "conflicts with '" + a + "'; give exactly one");
    }
  }

  RunConfig rc;
  PruneConfig& p = rc.prune;
  using namespace detail;
  if (merged.contains("alpha")) p.alpha = get_number(merged["alpha"], "alpha");
  if (merged.contains("beta")) p.beta = get_number(merged["beta"], "beta");
  if (merged.contains("epochs")) p.epochs = get_int_in(merged["epochs"], "epochs", 1, 100000);
  if (merged.contains("sparsity")) {
    const double f = get_number(merged["sparsity"], "sparsity");
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("sparsity", "must lie in [0, 1]");
    p.pattern = Unstructured{f};
  }
  if (merged.contains("nm")) p.pattern = parse_nm(get_as<std::string>(merged["nm"], "nm"));
  if (merged.contains("criterion")) {
    p.criterion = parse_criterion(get_as<std::string>(merged["criterion"], "criterion"));
  }
  if (merged.contains("omega")) p.omega = parse_omega(get_as<std::string>(merged["omega"], "omega"));
  if (merged.contains("omega_overrides")) {
    const json& ov = merged["omega_overrides"];
    if (!ov.is_object()) throw ConfigError("omega_overrides", "expected an object of index: mode");
    for (const auto& [k, v] : ov.items()) {
      const std::string field = "omega_overrides." + k;
      std::size_t idx = 0;
      try {
        std::size_t pos = 0;
        idx = std::stoul(k, &pos);
        if (pos != k.size()) throw std::invalid_argument(k);
      } catch (const std::logic_error&) {
        throw ConfigError(field, "block index must be a non-negative integer");
      }
      p.omega_overrides[idx] = parse_omega(get_as<std::string>(v, field), field);
    }
  }
  if (merged.contains("layer_fraction")) {
    p.layer_fraction = get_number(merged["layer_fraction"], "layer_fraction");
  }
  if (merged.contains("damp")) p.damp = get_number(merged["damp"], "damp");
  if (merged.contains("output_update")) {
    p.output_update =
        parse_output_update(get_as<std::string>(merged["output_update"], "output_update"));
  }
  if (merged.contains("seed")) p.seed = get_u64(merged["seed"], "seed");
  if (merged.contains("threads")) p.threads = get_int_in(merged["threads"], "threads", 1, 1024);

  if (merged.contains("model")) rc.model = get_as<std::string>(merged["model"], "model");
  if (merged.contains("fixture")) rc.fixture = fixture_from_json(merged["fixture"], p.seed);
  if (merged.contains("calib")) rc.calib = get_as<std::string>(merged["calib"], "calib");
  if (merged.contains("samples")) rc.samples = get_int_in(merged["samples"], "samples", 1, 1 << 24);
  if (merged.contains("tokens")) rc.tokens = get_int_in(merged["tokens"], "tokens", 1, 1 << 20);
  if (merged.contains("out")) rc.out = get_as<std::string>(merged["out"], "out");
  if (merged.contains("report")) rc.report = get_as<std::string>(merged["report"], "report");

  if (!rc.model && !rc.fixture) {
    rc.fixture = FixtureSpec{};
    rc.fixture->seed = p.seed;
  }
  if (!rc.calib && !rc.samples) rc.samples = kDefaultSamples;
  if (rc.fixture) {
    rc.fixture->tokens = rc.tokens;
    if (rc.samples) rc.fixture->samples = *rc.samples;
  }
  p.validate();
  return rc;
}

inline json read_config_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config", path.string() + ": " + e.what());
  }
}

inline json RunConfig::to_json() const {
  json j = prune.to_json();
  j["threads"] = prune.threads;
  if (model) j["model"] = *model;
  if (fixture) {
    j["fixture"] = {{"seed", fixture->seed},
                    {"depth", fixture->depth},
                    {"dim", fixture->dim},
                    {"kind", std::string(to_string(fixture->kind))},
                    {"expansion", fixture->expansion}};
  }
  if (calib) j["calib"] = *calib;
  if (samples) j["samples"] = *samples;
  j["tokens"] = tokens;
  j["out"] = out;
  return j;
}

// ---------------------------------------------------------------------------
// Inputs

struct Inputs {
  NetworkSpec net;
  CalibrationSet calib;
};

/// Loads or synthesizes the model, then loads or synthesizes calibration.
/// Synthesized calibration for a loaded model uses Gaussian inputs from `seed`.
inline Inputs load_inputs(const RunConfig& rc) {
  Inputs in;
  if (rc.fixture) {
    auto [net, calib] = synthesize_fixture(*rc.fixture);
    in.net = std::move(net);
    in.calib = std::move(calib);
  } else {
    in.net = io::load_model(*rc.model);
  }
  if (rc.calib) {
    in.calib = io::load_calibration(*rc.calib);
    if (in.calib.x.rows() != in.net.input_dim) {
      throw ShapeError("calibration X has " + std::to_string(in.calib.x.rows()) +
                       " rows but the model takes " + std::to_string(in.net.input_dim));
    }
  } else if (!rc.fixture) {
    const Index cols = static_cast<Index>(*rc.samples) * rc.tokens;
    in.calib = make_calibration(in.net, synthesize_inputs(rc.prune.seed, in.net.input_dim, cols));
  }
  return in;
}

inline io::MaskTensors mask_tensors(const NetworkSpec& net,
                                    const std::vector<std::vector<Mask>>& masks) {
  io::MaskTensors out;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto names = BlockSpec::layer_names(net.blocks[i].kind);
    for (std::size_t l = 0; l < masks[i].size(); ++l) {
      out[io::tensor_name(i, names[l], "mask")] = masks[i][l].as_matrix();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline int run_fixture(const RunConfig& rc, const Log& log) {
  if (!rc.fixture) throw ConfigError("fixture", "the fixture command needs a fixture spec");
  auto [net, calib] = synthesize_fixture(*rc.fixture);
  const fs::path out(rc.out);
  io::save_model(net, out / "model");
  io::save_calibration(calib, out / "calib");
  log.info("wrote " + (out / "model").string() + " and " + (out / "calib").string());
  return 0;
}

/// Writes out/model (pruned weights and masks), out/calib, out/report.json
/// and out/trace.csv.
inline int run_prune(const RunConfig& rc, const Log& log) {
  const Inputs in = load_inputs(rc);
  log.debug("config " + rc.to_json().dump());
  log.info("pruning " + std::to_string(in.net.blocks.size()) + " blocks on " +
           std::to_string(in.calib.x.cols()) + " calibration columns");

  const PruneResult res = prune_network(in.net, in.calib, rc.prune);
  for (const auto& b : res.report.blocks) {
    std::string line = "block " + std::to_string(b.index) + " " + b.kind + " " + b.mode;
    if (!b.trace.empty()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6g", b.trace.back());
      line += " objective " + std::string(buf);
    }
    log.debug(line);
  }

  const fs::path out(rc.out);
  io::save_model(res.net, out / "model", mask_tensors(res.net, res.masks));
  io::save_calibration(in.calib, out / "calib");
  write_report(res.report, out / "report.json");
  write_trace_csv(res.report, out / "trace.csv");

  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", res.report.global_mse);
  log.info("global mse " + std::string(buf) + ", report in " + (out / "report.json").string());
  return 0;
}

/// Metrics recomputed from artifacts on disk.
struct EvalResult {
  double global_mse = 0;
  double total_nonzero_fraction = 1;
  std::vector<std::string> discrepancies;
  json to_json() const {
    return {{"global_mse", global_mse},
            {"total_nonzero_fraction", total_nonzero_fraction},
            {"discrepancies", discrepancies}};
  }
};

inline SparsityPattern pattern_from_config_echo(const json& config) {
  const json& sp = config.at("sparsity");
  if (sp.at("type") == "nm") return SemiStructured{sp.at("n").get<int>(), sp.at("m").get<int>()};
  return Unstructured{sp.at("fraction").get<double>()};
}

inline KeepMatrix keep_from_tensor(const Matrix& m, const std::string& name,
                                   std::vector<std::string>& issues) {
  KeepMatrix k(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (m(i, j) != 0.0 && m(i, j) != 1.0) {
        issues.push_back(name + ": mask entry (" + std::to_string(i) + ", " + std::to_string(j) +
                         ") is neither 0 nor 1");
        return k.setZero();
      }
      k(i, j) = m(i, j) != 0.0 ? 1 : 0;
    }
  }
  return k;
}

/// Recomputes global MSE and the sparsity audit of a pruned model and, when
/// a report is given, compares every recomputed value with the stored one.
inline EvalResult evaluate(const NetworkSpec& net, const io::MaskTensors& masks,
                           const CalibrationSet& calib, const PruneReport* report) {
  EvalResult r;
  auto& issues = r.discrepancies;
  r.global_mse = global_output_error(calib.y_dense, forward(net, calib.x));

  Index total = 0, nonzero = 0;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const auto names = BlockSpec::layer_names(net.blocks[i].kind);
    const BlockReport* br = nullptr;
    if (report) {
      if (i >= report->blocks.size() || report->blocks[i].kind != to_string(net.blocks[i].kind)) {
        issues.push_back("blocks." + std::to_string(i) + ": not described by the report");
      } else {
        br = &report->blocks[i];
      }
    }
    for (std::size_t l = 0; l < names.size(); ++l) {
      const std::string wname = io::tensor_name(i, names[l], "weight");
      const Matrix& w = net.blocks[i].layers[l].weight;
      total += w.size();
      nonzero += (w.array() != 0.0).count();

      const LayerReport* lr = nullptr;
      if (br && l < br->layers.size() && br->layers[l].name == names[l]) lr = &br->layers[l];
      else if (br) issues.push_back(wname + ": layer missing from report");

      const double wz = zero_fraction(w);
      if (lr && wz != lr->weight_zero_fraction) {
        issues.push_back(wname + ": weight zero fraction " + std::to_string(wz) + " but report says " +
                         std::to_string(lr->weight_zero_fraction));
      }

      const std::string mname = io::tensor_name(i, names[l], "mask");
      auto it = masks.find(mname);
      const bool pruned = br && br->mode != "dense";
      if (it == masks.end()) {
        if (pruned) issues.push_back(mname + ": missing for a pruned layer");
        continue;
      }
      if (it->second.rows() != w.rows() || it->second.cols() != w.cols()) {
        issues.push_back(mname + ": shape " + numkit::shape_str(it->second) + " vs weight " +
                         numkit::shape_str(w));
        continue;
      }
      const KeepMatrix keep = keep_from_tensor(it->second, mname, issues);
      Index outside = 0;
      for (Index a = 0; a < w.rows(); ++a)
        for (Index b = 0; b < w.cols(); ++b) outside += (keep(a, b) == 0 && w(a, b) != 0.0) ? 1 : 0;
      if (outside > 0) {
        issues.push_back(wname + ": " + std::to_string(outside) + " nonzero weights outside the mask");
      }
      if (lr && report) {
        const MatrixAudit audit = sparsity_audit(keep, pattern_from_config_echo(report->config));
        if (audit.zero_fraction() != lr->mask_sparsity) {
          issues.push_back(mname + ": mask sparsity " + std::to_string(audit.zero_fraction()) +
                           " but report says " + std::to_string(lr->mask_sparsity));
        }
        if (audit.pattern_valid != lr->pattern_valid) {
          issues.push_back(mname + ": pattern validity differs from report");
        }
        for (const auto& v : audit.violations) issues.push_back(mname + ": " + v);
      }
    }
  }
  r.total_nonzero_fraction =
      total == 0 ? 1.0 : static_cast<double>(nonzero) / static_cast<double>(total);

  if (report) {
    if (r.global_mse != report->global_mse) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "network.global_mse: recomputed %.17g, report %.17g", r.global_mse,
                    report->global_mse);
      issues.push_back(buf);
    }
    if (r.total_nonzero_fraction != report->total_nonzero_fraction) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "network.total_nonzero_fraction: recomputed %.17g, report %.17g",
                    r.total_nonzero_fraction, report->total_nonzero_fraction);
      issues.push_back(buf);
    }
  }
  return r;
}

/// Exit status 0 when every recomputed value agrees with the report,
/// otherwise an AuditError listing each discrepancy.
inline int run_eval(const RunConfig& rc, const Log& log, std::ostream& out = std::cout) {
  if (!rc.model) throw ConfigError("model", "eval needs --model");
  if (!rc.calib) throw ConfigError("calib", "eval needs --calib");
  io::MaskTensors masks;
  const NetworkSpec net = io::load_model(*rc.model, &masks);
  const CalibrationSet calib = io::load_calibration(*rc.calib);
  std::optional<PruneReport> report;
  if (rc.report) report = read_report(*rc.report);

  const EvalResult r = evaluate(net, masks, calib, report ? &*report : nullptr);
  out << r.to_json().dump(2) << "\n";
  if (!r.discrepancies.empty()) {
    std::string msg = "audit mismatch in " + std::to_string(r.discrepancies.size()) + " place(s):";
    for (const auto& d : r.discrepancies) msg += "\n  " + d;
    throw AuditError(msg);
  }
  log.info(report ? "eval matches report" : "eval done (no report to compare)");
  return 0;
}

}  // namespace sparsellm::cli
