#pragma once

// Global pruning of FFN blocks by alternating minimization over auxiliary
// activations (a), up-projection outputs (z) and gate outputs (s), with every
// other dense layer pruned locally.
//
// For one FFN block the solver minimizes
//
//   alpha |z_out - W_down a|^2 + beta |a - phi(z, s)|^2
//     + alpha |z - W_up x|^2 (+ alpha |s - W_gate x|^2)
//
// where x and z_out are the dense model's block input and output, and
// phi(z, s) = relu(z) or silu(s) * z. Each epoch re-derives dense targets
// for every weight from the auxiliaries via pseudo-inverses, prunes them
// layer-wise, then updates a, z and s in closed form.

#include <sparsellm/error.hpp>
#include <sparsellm/evalkit.hpp>
#include <sparsellm/localprune.hpp>
#include <sparsellm/netmodel.hpp>
#include <sparsellm/numkit.hpp>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <string>
#include <thread>
#include <vector>

namespace sparsellm {

enum class OmegaMode { Global, Local };
enum class OutputUpdateMode { ExactBranch, PaperIfThen };

inline std::string_view to_string(OmegaMode m) { return m == OmegaMode::Global ? "global" : "local"; }
inline std::string_view to_string(OutputUpdateMode m) {
  return m == OutputUpdateMode::ExactBranch ? "exact" : "paper";
}
inline std::string_view to_string(Criterion c) { return c == Criterion::Magnitude ? "magnitude" : "wanda"; }

struct PruneConfig {
  double alpha = 0.1;
  double beta = 0.1;
  int epochs = 4;
  SparsityPattern pattern = Unstructured{0.5};
  Criterion criterion = Criterion::Wanda;
  double damp = 0.01;
  OmegaMode omega = OmegaMode::Global;
  std::map<std::size_t, OmegaMode> omega_overrides;  // per block index
  double layer_fraction = 1.0;
  std::uint64_t seed = 0;
  OutputUpdateMode output_update = OutputUpdateMode::ExactBranch;
  int threads = 1;  // block-level parallelism; never changes results

  LocalConfig local() const { return LocalConfig{criterion, pattern, damp}; }

  OmegaMode omega_for(std::size_t block) const {
    auto it = omega_overrides.find(block);
    return it == omega_overrides.end() ? omega : it->second;
  }

  void validate() const {
    if (!(alpha > 0) || !std::isfinite(alpha)) throw ConfigError("alpha", "must be > 0");
    if (!(beta > 0) || !std::isfinite(beta)) throw ConfigError("beta", "must be > 0");
    if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
    if (!(damp >= 0) || !std::isfinite(damp)) throw ConfigError("damp", "must be >= 0");
    if (!(layer_fraction >= 0 && layer_fraction <= 1)) {
      throw ConfigError("layer_fraction", "must lie in [0, 1]");
    }
    if (threads < 1) throw ConfigError("threads", "must be >= 1");
    validate_pattern(pattern);
  }

  /// Everything that influences results; `threads` is deliberately absent.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["alpha"] = alpha;
    j["beta"] = beta;
    j["epochs"] = epochs;
    if (const auto* u = std::get_if<Unstructured>(&pattern)) {
      j["sparsity"] = {{"type", "unstructured"}, {"fraction", u->fraction}};
    } else {
      const auto& nm = std::get<SemiStructured>(pattern);
      j["sparsity"] = {{"type", "nm"}, {"n", nm.n}, {"m", nm.m}};
    }
    j["criterion"] = std::string(to_string(criterion));
    j["damp"] = damp;
    j["omega"] = std::string(to_string(omega));
    nlohmann::json ov = nlohmann::json::object();
    for (const auto& [k, v] : omega_overrides) ov[std::to_string(k)] = std::string(to_string(v));
    j["omega_overrides"] = ov;
    j["layer_fraction"] = layer_fraction;
    j["seed"] = seed;
    j["output_update"] = std::string(to_string(output_update));
    return j;
  }
};

// ---------------------------------------------------------------------------
// Block state and objective

/// Auxiliary variables of one FFN block plus the fixed dense-model interface
/// values. Layers hold the current (pruned) weights, ordered as in BlockSpec.
struct BlockState {
  BlockKind kind = BlockKind::FFNReLU;
  Matrix a;  // hidden activation
  Matrix z;  // up-projection output
  Matrix s;  // gate-projection output (gated only)
  Matrix a_pre_in;
  Matrix z_pre_out;
  Matrix a_pre_in_pinv;
  std::vector<DenseLayer> layers;
  std::vector<Mask> masks;

  bool gated() const { return kind == BlockKind::FFNGated; }
  const DenseLayer& up() const { return layers.front(); }
  const DenseLayer& gate() const { return layers.at(1); }
  const DenseLayer& down() const { return layers.back(); }
};

/// phi(z, s): relu(z) or silu(s) * z.
inline Matrix block_activation(const BlockState& st) {
  return st.gated() ? Matrix(numkit::silu(st.s).cwiseProduct(st.z)) : numkit::relu(st.z);
}

inline BlockState init_block_state(const BlockSpec& block, const Matrix& a_pre_in,
                                   const Matrix& z_pre_out) {
  if (!block.is_ffn()) throw ConfigError("block", "global pruning applies to FFN blocks only");
  block.validate();
  if (a_pre_in.rows() != block.in_dim()) throw ShapeError("block input rows do not match W_up");
  if (z_pre_out.rows() != block.out_dim() || z_pre_out.cols() != a_pre_in.cols()) {
    throw ShapeError("block output shape does not match W_down and sample count");
  }
  BlockState st;
  st.kind = block.kind;
  st.a_pre_in = a_pre_in;
  st.z_pre_out = z_pre_out;
  st.layers = block.layers;
  for (const auto& l : block.layers) st.masks.push_back(Mask::all_ones(l.out_dim(), l.in_dim()));
  st.z = block.up().apply(a_pre_in);
  if (st.gated()) st.s = block.gate().apply(a_pre_in);
  st.a = block_activation(st);
  st.a_pre_in_pinv = numkit::pinv(a_pre_in);
  return st;
}

inline double block_objective(const BlockState& st, const PruneConfig& cfg) {
  double obj = cfg.alpha * (st.z_pre_out - st.down().apply(st.a)).squaredNorm();
  obj += cfg.beta * (st.a - block_activation(st)).squaredNorm();
  obj += cfg.alpha * (st.z - st.up().apply(st.a_pre_in)).squaredNorm();
  if (st.gated()) obj += cfg.alpha * (st.s - st.gate().apply(st.a_pre_in)).squaredNorm();
  return obj;
}

// ---------------------------------------------------------------------------
// Alternating steps

namespace detail {

inline Matrix minus_bias(Matrix m, const DenseLayer& l) {
  if (l.has_bias()) m.colwise() -= l.bias;
  return m;
}

}  // namespace detail

/// Dense weight targets from the auxiliaries, then layer-wise pruning:
/// W_up <- z x^+, W_gate <- s x^+ against x; W_down <- z_out a^+ against a.
inline void prune_weights_step(BlockState& st, const PruneConfig& cfg) {
  const LocalConfig local = cfg.local();
  auto apply = [&](std::size_t idx, const Matrix& target, const Matrix& input) {
    LocalResult r = prune_layer_local(target, input, local);
    st.layers[idx].weight = std::move(r.weight);
    st.masks[idx] = std::move(r.mask);
  };

  const Matrix up_target = detail::minus_bias(st.z, st.up()) * st.a_pre_in_pinv;
  apply(0, up_target, st.a_pre_in);
  if (st.gated()) {
    const Matrix gate_target = detail::minus_bias(st.s, st.gate()) * st.a_pre_in_pinv;
    apply(1, gate_target, st.a_pre_in);
  }
  const Matrix down_target = detail::minus_bias(st.z_pre_out, st.down()) * numkit::pinv(st.a);
  apply(st.layers.size() - 1, down_target, st.a);
}

/// a <- (alpha W^T W + beta I)^{-1} (alpha W^T z_out + beta phi(z, s)).
inline void update_activation(BlockState& st, const PruneConfig& cfg) {
  const Matrix& w = st.down().weight;
  const Matrix rhs = cfg.alpha * (w.transpose() * detail::minus_bias(st.z_pre_out, st.down())) +
                     cfg.beta * block_activation(st);
  st.a = numkit::spd_solve(w, cfg.alpha, cfg.beta, rhs);
}

/// Minimizer of beta (t - relu(z))^2 + alpha (z - c)^2 for one entry.
inline double relu_output_entry(double c, double t, double alpha, double beta, OutputUpdateMode mode) {
  const double neg = c;
  const double pos = (beta * t + alpha * c) / (alpha + beta);
  if (mode == OutputUpdateMode::PaperIfThen) return neg < 0 ? neg : pos;

  auto loss = [&](double z) {
    const double r = t - std::max(z, 0.0);
    const double d = z - c;
    return beta * r * r + alpha * d * d;
  };
  const double z1 = std::min(neg, 0.0);
  const double z2 = std::max(pos, 0.0);
  return loss(z1) < loss(z2) ? z1 : z2;
}

inline void update_output_relu(BlockState& st, const PruneConfig& cfg) {
  const Matrix c = st.up().apply(st.a_pre_in);
  for (Index j = 0; j < c.cols(); ++j)
    for (Index i = 0; i < c.rows(); ++i)
      st.z(i, j) = relu_output_entry(c(i, j), st.a(i, j), cfg.alpha, cfg.beta, cfg.output_update);
}

/// Stationary point of beta (t - g z)^2 + alpha (z - c)^2.
inline double gated_output_entry(double c, double g, double t, double alpha, double beta) {
  return (alpha * c + beta * g * t) / (alpha + beta * g * g);
}

inline void update_output_gated(BlockState& st, const PruneConfig& cfg) {
  const Matrix c = st.up().apply(st.a_pre_in);
  for (Index j = 0; j < c.cols(); ++j)
    for (Index i = 0; i < c.rows(); ++i)
      st.z(i, j) = gated_output_entry(c(i, j), numkit::silu(st.s(i, j)), st.a(i, j), cfg.alpha,
                                      cfg.beta);
}

inline constexpr double kGateTolerance = 1e-10;

/// Minimizer of beta (t - silu(s) z)^2 + alpha (s - w)^2 for one entry,
/// never worse than `current`.
inline double gate_entry(double t, double z, double w, double current, double alpha, double beta) {
  const numkit::ScalarObjective f{t, z, w, alpha, beta};
  if (z == 0.0) return w;
  // any minimizer satisfies alpha (s - w)^2 <= f(w)
  const double reach = std::sqrt(f(w) / alpha);
  const double halfwidth = std::max(8.0 + std::abs(w), reach * (1.0 + 1e-12) + kGateTolerance);
  const double s = numkit::scalar_minimize(f, halfwidth, kGateTolerance);
  return f(s) <= f(current) ? s : current;
}

inline void update_gate(BlockState& st, const PruneConfig& cfg) {
  const Matrix w = st.gate().apply(st.a_pre_in);
  for (Index j = 0; j < w.cols(); ++j)
    for (Index i = 0; i < w.rows(); ++i)
      st.s(i, j) = gate_entry(st.a(i, j), st.z(i, j), w(i, j), st.s(i, j), cfg.alpha, cfg.beta);
}

// ---------------------------------------------------------------------------
// Block solve

struct StepRecord {
  int epoch = 0;
  std::string step;
  double objective = 0;
};

struct BlockSolve {
  BlockSpec block;  // pruned weights
  std::vector<Mask> masks;
  std::vector<double> trace;      // objective after each epoch
  std::vector<StepRecord> steps;  // objective after every step
};

inline BlockSolve prune_block_global(const BlockSpec& block, const Matrix& a_pre_in,
                                     const Matrix& z_pre_out, const PruneConfig& cfg) {
  cfg.validate();
  BlockState st = init_block_state(block, a_pre_in, z_pre_out);
  BlockSolve out;

  auto record = [&](int epoch, const char* step) {
    const double obj = block_objective(st, cfg);
    if (!std::isfinite(obj)) {
      throw NumericalError("non-finite block objective at epoch " + std::to_string(epoch) +
                           " after " + step);
    }
    out.steps.push_back({epoch, step, obj});
    return obj;
  };

  record(0, "init");
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    prune_weights_step(st, cfg);
    record(epoch, "prune_weights");
    update_activation(st, cfg);
    record(epoch, "update_activation");
    if (st.gated()) {
      update_output_gated(st, cfg);
      record(epoch, "update_output");
      update_gate(st, cfg);
      out.trace.push_back(record(epoch, "update_gate"));
    } else {
      update_output_relu(st, cfg);
      out.trace.push_back(record(epoch, "update_output"));
    }
  }

  out.block.kind = block.kind;
  out.block.layers = std::move(st.layers);
  out.masks = std::move(st.masks);
  return out;
}

// ---------------------------------------------------------------------------
// Network orchestration

struct PruneResult {
  NetworkSpec net;
  std::vector<std::vector<Mask>> masks;  // per block; empty when left dense
  std::vector<BlockSolve> solves;        // per block; populated for global blocks
  PruneReport report;
};

/// Number of leading blocks selected by `layer_fraction`.
inline std::size_t pruned_block_count(double layer_fraction, std::size_t blocks) {
  return static_cast<std::size_t>(std::llround(layer_fraction * static_cast<double>(blocks)));
}

namespace detail {

struct BlockOutcome {
  BlockSpec block;
  std::vector<Mask> masks;
  BlockSolve solve;
  std::string mode;
  double seconds = 0;
};

inline BlockOutcome prune_one_block(const BlockSpec& block, const BlockRecord& rec,
                                    std::size_t index, bool selected, const PruneConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  BlockOutcome o;
  if (!selected) {
    o.block = block;
    o.mode = "dense";
  } else if (block.is_ffn() && cfg.omega_for(index) == OmegaMode::Global) {
    o.solve = prune_block_global(block, rec.input, rec.output, cfg);
    o.block = o.solve.block;
    o.masks = o.solve.masks;
    o.mode = "global";
  } else {
    const LocalConfig local = cfg.local();
    o.block = block;
    for (std::size_t l = 0; l < block.layers.size(); ++l) {
      const bool is_down = block.is_ffn() && l + 1 == block.layers.size();
      const Matrix& input = is_down ? rec.hidden : rec.input;
      LocalResult r = prune_layer_local(block.layers[l].weight, input, local);
      o.block.layers[l].weight = std::move(r.weight);
      o.masks.push_back(std::move(r.mask));
    }
    o.mode = "local";
  }
  for (auto& l : o.block.layers) l.narrow_to_storage();
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return o;
}

}  // namespace detail

/// Prunes every selected block against the dense model's recorded values.
/// FFN blocks use the global solver unless their omega mode is Local; all
/// other layers are pruned locally.
inline PruneResult prune_network(const NetworkSpec& net, const CalibrationSet& calib,
                                 const PruneConfig& cfg) {
  cfg.validate();
  net.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const ForwardResult dense = forward_record(net, calib.x);
  if (calib.y_dense.rows() != dense.output.rows() || calib.y_dense.cols() != dense.output.cols()) {
    throw ShapeError("calibration y_dense is " + numkit::shape_str(calib.y_dense) +
                     " but the network emits " + numkit::shape_str(dense.output));
  }

  const std::size_t nblocks = net.blocks.size();
  const std::size_t selected = pruned_block_count(cfg.layer_fraction, nblocks);
  std::vector<detail::BlockOutcome> outcomes(nblocks);
  std::vector<std::exception_ptr> errors(nblocks);

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < nblocks; i = next++) {
      try {
        outcomes[i] = detail::prune_one_block(net.blocks[i], dense.rec.blocks[i], i, i < selected, cfg);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto nthreads = static_cast<std::size_t>(std::min<std::size_t>(cfg.threads, nblocks));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
  }
  for (std::size_t i = 0; i < nblocks; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      std::throw_with_nested(BlockFailure(i, e.what()));
    }
  }

  PruneResult res;
  res.net.input_dim = net.input_dim;
  PruneReport& rep = res.report;
  rep.seed = cfg.seed;
  rep.config = cfg.to_json();
  Index total = 0, nonzero = 0;
  for (std::size_t i = 0; i < nblocks; ++i) {
    auto& o = outcomes[i];
    const BlockRecord& rec = dense.rec.blocks[i];
    const auto names = BlockSpec::layer_names(o.block.kind);
    BlockReport br;
    br.index = i;
    br.kind = std::string(to_string(o.block.kind));
    br.mode = o.mode;
    br.trace = o.solve.trace;
    br.wall_time_s = o.seconds;
    for (std::size_t l = 0; l < o.block.layers.size(); ++l) {
      const bool is_down = o.block.is_ffn() && l + 1 == o.block.layers.size();
      const Matrix& input = is_down ? rec.hidden : rec.input;
      const Matrix& w = o.block.layers[l].weight;
      LayerReport lr;
      lr.name = names[l];
      lr.error = layer_error(net.blocks[i].layers[l].weight, w, input);
      lr.weight_zero_fraction = zero_fraction(w);
      if (!o.masks.empty()) {
        const MatrixAudit audit = sparsity_audit(o.masks[l]);
        lr.mask_sparsity = audit.zero_fraction();
        lr.pattern_valid = audit.pattern_valid;
      }
      br.layers.push_back(lr);
      total += w.size();
      nonzero += (w.array() != 0.0).count();
    }
    rep.blocks.push_back(std::move(br));
    res.net.blocks.push_back(std::move(o.block));
    res.masks.push_back(std::move(o.masks));
    res.solves.push_back(std::move(o.solve));
  }
  rep.global_mse = global_output_error(calib.y_dense, forward(res.net, calib.x));
  rep.total_nonzero_fraction = total == 0 ? 1.0 : static_cast<double>(nonzero) / static_cast<double>(total);
  rep.total_wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace sparsellm
