#pragma once

// Pruning quality metrics and the structured run report.

#include <sparsellm/error.hpp>
#include <sparsellm/localprune.hpp>
#include <sparsellm/numkit.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace sparsellm {

/// Mean squared difference over all entries.
inline double global_output_error(const Matrix& dense_out, const Matrix& pruned_out) {
  if (dense_out.rows() != pruned_out.rows() || dense_out.cols() != pruned_out.cols()) {
    throw ShapeError("global_output_error: " + numkit::shape_str(dense_out) + " vs " +
                     numkit::shape_str(pruned_out));
  }
  if (dense_out.size() == 0) return 0.0;
  return (dense_out - pruned_out).squaredNorm() / static_cast<double>(dense_out.size());
}

/// exp of the mean negative log-softmax probability of each column's target.
/// `logits` is vocab x positions.
inline double perplexity(const Matrix& logits, std::span<const Index> targets) {
  if (targets.empty()) throw ConfigError("targets", "perplexity needs at least one target");
  if (static_cast<Index>(targets.size()) != logits.cols()) {
    throw ShapeError("perplexity: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.cols()) + " positions");
  }
  double nll = 0;
  for (Index t = 0; t < logits.cols(); ++t) {
    const Index y = targets[static_cast<std::size_t>(t)];
    if (y < 0 || y >= logits.rows()) throw ShapeError("perplexity: target out of vocabulary");
    const double mx = logits.col(t).maxCoeff();
    const double lse = mx + std::log((logits.col(t).array() - mx).exp().sum());
    nll += lse - logits(y, t);
  }
  return std::exp(nll / static_cast<double>(logits.cols()));
}

// ---------------------------------------------------------------------------
// Sparsity audit

struct MatrixAudit {
  Index numel = 0;
  Index zeros = 0;
  bool pattern_valid = true;
  std::vector<std::string> violations;

  double zero_fraction() const {
    return numel == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(numel);
  }
};

/// Counts pruned entries and checks them against the declared pattern.
/// Violations are listed, never thrown.
inline MatrixAudit sparsity_audit(const KeepMatrix& keep, const SparsityPattern& pattern) {
  MatrixAudit a;
  a.numel = keep.size();
  for (Index i = 0; i < keep.rows(); ++i)
    for (Index j = 0; j < keep.cols(); ++j) a.zeros += keep(i, j) == 0 ? 1 : 0;

  if (const auto* u = std::get_if<Unstructured>(&pattern)) {
    const Index expected = unstructured_zero_count(u->fraction, a.numel);
    if (a.zeros != expected) {
      a.pattern_valid = false;
      a.violations.push_back("expected " + std::to_string(expected) + " zeros, found " +
                             std::to_string(a.zeros));
    }
    return a;
  }
  const auto& nm = std::get<SemiStructured>(pattern);
  if (nm.m < 1 || keep.cols() % nm.m != 0) {
    a.pattern_valid = false;
    a.violations.push_back("columns not divisible by m");
    return a;
  }
  for (Index i = 0; i < keep.rows(); ++i) {
    for (Index g = 0; g < keep.cols(); g += nm.m) {
      int kept = 0;
      for (int k = 0; k < nm.m; ++k) kept += keep(i, g + k) != 0 ? 1 : 0;
      if (kept != nm.n) {
        a.pattern_valid = false;
        a.violations.push_back("row " + std::to_string(i) + " group at column " +
                               std::to_string(g) + " keeps " + std::to_string(kept));
      }
    }
  }
  return a;
}

inline MatrixAudit sparsity_audit(const Mask& mask) { return sparsity_audit(mask.keep, mask.pattern); }

/// Fraction of exactly-zero weights.
inline double zero_fraction(const Matrix& w) {
  if (w.size() == 0) return 0.0;
  return static_cast<double>((w.array() == 0.0).count()) / static_cast<double>(w.size());
}

// ---------------------------------------------------------------------------
// Report

inline constexpr int kReportVersion = 1;

struct LayerReport {
  std::string name;
  double error = 0;  // ||W_dense a_pre - W_pruned a_pre||^2 on recorded inputs
  double mask_sparsity = 0;
  double weight_zero_fraction = 0;
  bool pattern_valid = true;

  bool operator==(const LayerReport&) const = default;
};

struct BlockReport {
  std::size_t index = 0;
  std::string kind;
  std::string mode;  // "global", "local" or "dense"
  std::vector<LayerReport> layers;
  std::vector<double> trace;  // block objective after each epoch (global mode)
  double wall_time_s = 0;

  bool operator==(const BlockReport&) const = default;
};

struct PruneReport {
  int format_version = kReportVersion;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<BlockReport> blocks;
  double global_mse = 0;
  double total_nonzero_fraction = 1;
  double total_wall_time_s = 0;

  bool operator==(const PruneReport&) const = default;

  /// Trace length equals the configured epoch count on every global block.
  void validate() const {
    if (format_version != kReportVersion) {
      throw ValidationError("format_version: unsupported " + std::to_string(format_version));
    }
    const long epochs = config.contains("epochs") ? config.at("epochs").get<long>() : -1;
    for (const auto& b : blocks) {
      if (b.mode == "global" && static_cast<long>(b.trace.size()) != epochs) {
        throw ValidationError("blocks[" + std::to_string(b.index) + "].trace: length " +
                              std::to_string(b.trace.size()) + " != epochs " +
                              std::to_string(epochs));
      }
      for (const auto& l : b.layers) {
        if (l.mask_sparsity < 0 || l.mask_sparsity > 1) {
          throw ValidationError("blocks[" + std::to_string(b.index) + "]." + l.name +
                                ".mask_sparsity: out of range");
        }
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const LayerReport& l) {
  j = {{"name", l.name},
       {"error", l.error},
       {"mask_sparsity", l.mask_sparsity},
       {"weight_zero_fraction", l.weight_zero_fraction},
       {"pattern_valid", l.pattern_valid}};
}

inline void from_json(const nlohmann::json& j, LayerReport& l) {
  j.at("name").get_to(l.name);
  j.at("error").get_to(l.error);
  j.at("mask_sparsity").get_to(l.mask_sparsity);
  j.at("weight_zero_fraction").get_to(l.weight_zero_fraction);
  j.at("pattern_valid").get_to(l.pattern_valid);
}

inline void to_json(nlohmann::json& j, const BlockReport& b) {
  j = {{"index", b.index},       {"kind", b.kind},   {"mode", b.mode},
       {"layers", b.layers},     {"trace", b.trace}, {"wall_time_s", b.wall_time_s}};
}

inline void from_json(const nlohmann::json& j, BlockReport& b) {
  j.at("index").get_to(b.index);
  j.at("kind").get_to(b.kind);
  j.at("mode").get_to(b.mode);
  j.at("layers").get_to(b.layers);
  j.at("trace").get_to(b.trace);
  j.at("wall_time_s").get_to(b.wall_time_s);
}

inline void to_json(nlohmann::json& j, const PruneReport& r) {
  j = {{"format_version", r.format_version},
       {"seed", r.seed},
       {"config", r.config},
       {"blocks", r.blocks},
       {"network",
        {{"global_mse", r.global_mse},
         {"total_nonzero_fraction", r.total_nonzero_fraction},
         {"total_wall_time_s", r.total_wall_time_s}}}};
}

inline void from_json(const nlohmann::json& j, PruneReport& r) {
  j.at("format_version").get_to(r.format_version);
  j.at("seed").get_to(r.seed);
  r.config = j.at("config");
  j.at("blocks").get_to(r.blocks);
  const auto& n = j.at("network");
  n.at("global_mse").get_to(r.global_mse);
  n.at("total_nonzero_fraction").get_to(r.total_nonzero_fraction);
  n.at("total_wall_time_s").get_to(r.total_wall_time_s);
}

inline std::string report_to_string(const PruneReport& r) {
  return nlohmann::json(r).dump(2) + "\n";
}

inline PruneReport report_from_string(const std::string& text) {
  PruneReport r;
  try {
    r = nlohmann::json::parse(text).get<PruneReport>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  r.validate();
  return r;
}

/// Validates, then writes `report.json`-style output to `path`.
inline void write_report(const PruneReport& r, const std::filesystem::path& path) {
  r.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write report " + path.string());
  out << report_to_string(r);
  if (!out) throw IoError("write failed for " + path.string());
}

inline PruneReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open report " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_string(ss.str());
}

inline std::string trace_to_csv(const PruneReport& r) {
  std::string out = "block,epoch,objective\n";
  char buf[64];
  for (const auto& b : r.blocks) {
    for (std::size_t e = 0; e < b.trace.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%.17g", b.trace[e]);
      out += std::to_string(b.index) + "," + std::to_string(e + 1) + "," + buf + "\n";
    }
  }
  return out;
}

inline void write_trace_csv(const PruneReport& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write trace " + path.string());
  out << trace_to_csv(r);
}

/// Copy of the report JSON with every wall-time field removed, for
/// determinism comparisons.
inline nlohmann::json without_wall_time(const PruneReport& r) {
  nlohmann::json j = r;
  j["network"].erase("total_wall_time_s");
  for (auto& b : j["blocks"]) b.erase("wall_time_s");
  return j;
}

}  // namespace sparsellm
