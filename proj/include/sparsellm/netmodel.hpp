#pragma once

// Composite network description, recorded forward passes and the synthetic
// desk-scale fixtures used in place of pre-trained checkpoints.

#include <sparsellm/error.hpp>
#include <sparsellm/numkit.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sparsellm {

enum class BlockKind { DenseLocal, FFNReLU, FFNGated };

/// Storage precision of a tensor on disk. Computation is always double.
enum class Dtype { F32, F64 };

inline std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::DenseLocal: return "dense";
    case BlockKind::FFNReLU: return "ffn_relu";
    case BlockKind::FFNGated: return "ffn_gated";
  }
  return "?";
}

inline BlockKind parse_block_kind(std::string_view s) {
  if (s == "dense") return BlockKind::DenseLocal;
  if (s == "ffn_relu") return BlockKind::FFNReLU;
  if (s == "ffn_gated") return BlockKind::FFNGated;
  throw FormatError("unknown block kind '" + std::string(s) + "'");
}

inline std::string_view to_string(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

inline Dtype parse_dtype(std::string_view s) {
  if (s == "f32") return Dtype::F32;
  if (s == "f64") return Dtype::F64;
  throw FormatError("unsupported dtype '" + std::string(s) + "'");
}

/// y = W x + b. An empty bias means no bias.
struct DenseLayer {
  Matrix weight;
  Vector bias;
  Dtype dtype = Dtype::F64;

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
  bool has_bias() const { return bias.size() > 0; }

  Matrix apply(const Matrix& x) const {
    if (x.rows() != weight.cols()) {
      throw ShapeError("dense layer expects " + std::to_string(weight.cols()) +
                       " input rows, got " + std::to_string(x.rows()));
    }
    Matrix out = weight * x;
    if (has_bias()) out.colwise() += bias;
    return out;
  }

  /// Rounds weight and bias through the storage precision.
  void narrow_to_storage() {
    if (dtype != Dtype::F32) return;
    weight = weight.cast<float>().cast<double>();
    bias = bias.cast<float>().cast<double>();
  }
};

/// One block of the chain. Layer order: DenseLocal {w}; FFNReLU {up, down};
/// FFNGated {up, gate, down}.
struct BlockSpec {
  BlockKind kind = BlockKind::DenseLocal;
  std::vector<DenseLayer> layers;

  static std::size_t layer_count(BlockKind k) {
    switch (k) {
      case BlockKind::DenseLocal: return 1;
      case BlockKind::FFNReLU: return 2;
      case BlockKind::FFNGated: return 3;
    }
    return 0;
  }

  static std::vector<std::string> layer_names(BlockKind k) {
    switch (k) {
      case BlockKind::DenseLocal: return {"w"};
      case BlockKind::FFNReLU: return {"up", "down"};
      case BlockKind::FFNGated: return {"up", "gate", "down"};
    }
    return {};
  }

  bool is_ffn() const { return kind != BlockKind::DenseLocal; }

  const DenseLayer& up() const { return layers.at(0); }
  DenseLayer& up() { return layers.at(0); }
  const DenseLayer& gate() const { return layers.at(1); }
  DenseLayer& gate() { return layers.at(1); }
  const DenseLayer& down() const { return layers.back(); }
  DenseLayer& down() { return layers.back(); }

  Index in_dim() const { return layers.front().in_dim(); }
  Index out_dim() const { return layers.back().out_dim(); }

  void validate() const {
    if (layers.size() != layer_count(kind)) {
      throw ShapeError(std::string(to_string(kind)) + " block needs " +
                       std::to_string(layer_count(kind)) + " layers, has " +
                       std::to_string(layers.size()));
    }
    for (const auto& l : layers) {
      if (l.weight.size() == 0) throw ShapeError("empty weight matrix");
      if (l.has_bias() && l.bias.size() != l.out_dim()) {
        throw ShapeError("bias length " + std::to_string(l.bias.size()) +
                         " does not match weight rows " + std::to_string(l.out_dim()));
      }
      numkit::require_finite(l.weight, "weight");
      numkit::require_finite(l.bias, "bias");
    }
    if (kind == BlockKind::DenseLocal) return;
    if (down().in_dim() != up().out_dim()) {
      throw ShapeError("down projection expects " + std::to_string(down().in_dim()) +
                       " inputs but up projection emits " + std::to_string(up().out_dim()));
    }
    if (kind == BlockKind::FFNGated &&
        (gate().out_dim() != up().out_dim() || gate().in_dim() != up().in_dim())) {
      throw ShapeError("gate projection shape differs from up projection");
    }
  }
};

struct NetworkSpec {
  Index input_dim = 0;
  std::vector<BlockSpec> blocks;

  Index output_dim() const { return blocks.empty() ? input_dim : blocks.back().out_dim(); }

  void validate() const {
    if (blocks.empty()) throw ShapeError("network has no blocks");
    Index dim = input_dim;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].validate();
      if (blocks[i].in_dim() != dim) {
        throw ShapeError("block " + std::to_string(i) + " expects input dim " +
                         std::to_string(blocks[i].in_dim()) + ", previous emits " +
                         std::to_string(dim));
      }
      dim = blocks[i].out_dim();
    }
  }
};

/// Columns of X are token positions, grouped by calibration sample; y_dense
/// is the dense network's output on X.
struct CalibrationSet {
  Matrix x;
  Matrix y_dense;
};

/// Values observed inside one block during a dense forward pass. For
/// DenseLocal blocks only `input` and `output` are populated.
struct BlockRecord {
  Matrix input;   // a_pre entering the block
  Matrix z_up;    // up-projection output
  Matrix s_gate;  // gate-projection output (gated blocks)
  Matrix hidden;  // activation fed to the down projection
  Matrix output;  // z_pre leaving the block
};

struct Recording {
  std::vector<BlockRecord> blocks;
};

struct ForwardResult {
  Matrix output;
  Recording rec;
};

inline BlockRecord forward_block(const BlockSpec& block, const Matrix& input) {
  BlockRecord r;
  r.input = input;
  switch (block.kind) {
    case BlockKind::DenseLocal:
      r.output = block.layers[0].apply(input);
      break;
    case BlockKind::FFNReLU:
      r.z_up = block.up().apply(input);
      r.hidden = numkit::relu(r.z_up);
      r.output = block.down().apply(r.hidden);
      break;
    case BlockKind::FFNGated:
      r.z_up = block.up().apply(input);
      r.s_gate = block.gate().apply(input);
      r.hidden = numkit::silu(r.s_gate).cwiseProduct(r.z_up);
      r.output = block.down().apply(r.hidden);
      break;
  }
  return r;
}

inline ForwardResult forward_record(const NetworkSpec& net, const Matrix& x) {
  if (x.rows() != net.input_dim) {
    throw ShapeError("network expects " + std::to_string(net.input_dim) +
                     " input rows, got " + std::to_string(x.rows()));
  }
  numkit::require_finite(x, "network input");
  ForwardResult res;
  res.rec.blocks.reserve(net.blocks.size());
  const Matrix* cur = &x;
  for (const auto& b : net.blocks) {
    res.rec.blocks.push_back(forward_block(b, *cur));
    cur = &res.rec.blocks.back().output;
  }
  res.output = *cur;
  return res;
}

inline Matrix forward(const NetworkSpec& net, const Matrix& x) {
  return forward_record(net, x).output;
}

inline CalibrationSet make_calibration(const NetworkSpec& net, Matrix x) {
  CalibrationSet c;
  c.y_dense = forward(net, x);
  c.x = std::move(x);
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic fixtures

enum class FixtureMix { ReLU, Gated, Mixed };

inline std::string_view to_string(FixtureMix m) {
  switch (m) {
    case FixtureMix::ReLU: return "relu";
    case FixtureMix::Gated: return "gated";
    case FixtureMix::Mixed: return "mixed";
  }
  return "?";
}

struct FixtureSpec {
  std::uint64_t seed = 0;
  int depth = 3;
  int dim = 64;
  FixtureMix kind = FixtureMix::Mixed;
  int expansion = 4;
  int samples = 64;
  int tokens = 16;  // positions per calibration sample

  Index columns() const { return static_cast<Index>(samples) * tokens; }
};

/// Deterministic standard-normal stream: splitmix64 feeding Box-Muller, so
/// results do not depend on the standard library's distributions.
class GaussianStream {
public:
  explicit GaussianStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1], u2 in [0, 1)
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  Matrix matrix(Index rows, Index cols, double scale) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = scale * next();
    return m;
  }

private:
  std::uint64_t state_;
  double spare_ = 0;
  bool has_spare_ = false;
};

inline BlockKind fixture_block_kind(FixtureMix mix, int index) {
  switch (mix) {
    case FixtureMix::ReLU: return BlockKind::FFNReLU;
    case FixtureMix::Gated: return BlockKind::FFNGated;
    case FixtureMix::Mixed: {
      constexpr BlockKind cycle[] = {BlockKind::DenseLocal, BlockKind::FFNReLU,
                                     BlockKind::FFNGated};
      return cycle[index % 3];
    }
  }
  return BlockKind::DenseLocal;
}

inline NetworkSpec synthesize_network(const FixtureSpec& spec) {
  if (spec.depth < 1) throw ConfigError("depth", "must be >= 1");
  if (spec.dim < 1) throw ConfigError("dim", "must be >= 1");
  if (spec.expansion < 1) throw ConfigError("expansion", "must be >= 1");

  GaussianStream rng(spec.seed);
  const Index d = spec.dim;
  const Index h = static_cast<Index>(spec.dim) * spec.expansion;
  auto layer = [&rng](Index out, Index in) {
    DenseLayer l;
    l.weight = rng.matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)));
    return l;
  };

  NetworkSpec net;
  net.input_dim = d;
  for (int i = 0; i < spec.depth; ++i) {
    BlockSpec b;
    b.kind = fixture_block_kind(spec.kind, i);
    switch (b.kind) {
      case BlockKind::DenseLocal:
        b.layers.push_back(layer(d, d));
        break;
      case BlockKind::FFNReLU:
        b.layers.push_back(layer(h, d));
        b.layers.push_back(layer(d, h));
        break;
      case BlockKind::FFNGated:
        b.layers.push_back(layer(h, d));
        b.layers.push_back(layer(h, d));
        b.layers.push_back(layer(d, h));
        break;
    }
    net.blocks.push_back(std::move(b));
  }
  return net;
}

/// Gaussian calibration inputs drawn from a stream independent of the weights.
/// `columns` is samples times tokens per sample.
inline Matrix synthesize_inputs(std::uint64_t seed, Index dim, Index columns) {
  if (columns < 1) throw ConfigError("samples", "must be >= 1");
  GaussianStream rng(seed ^ 0xC0FFEE1234567890ull);
  return rng.matrix(dim, columns, 1.0);
}

inline std::pair<NetworkSpec, CalibrationSet> synthesize_fixture(const FixtureSpec& spec) {
  if (spec.samples < 1) throw ConfigError("samples", "must be >= 1");
  if (spec.tokens < 1) throw ConfigError("tokens", "must be >= 1");
  NetworkSpec net = synthesize_network(spec);
  CalibrationSet calib = make_calibration(net, synthesize_inputs(spec.seed, spec.dim, spec.columns()));
  return {std::move(net), std::move(calib)};
}

}  // namespace sparsellm
