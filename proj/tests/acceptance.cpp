// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "oracles.hpp"

#include <sparsellm/cli.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

using namespace sparsellm;
namespace fs = std::filesystem;

namespace {

// pinned tolerances
constexpr double kObjectiveTol = 1e-8;   // closed form vs numeric minimizer, per entry
constexpr double kGradientTol = 1e-6;    // finite-difference gradient at the returned point
constexpr double kDescentTol = 1e-9;     // allowed increase across an a/z/s step
constexpr double kReconTol = 1e-9;       // reconstruction vs zero-fill
constexpr double kPenroseTol = 1e-10;    // each Moore-Penrose condition, max entry
constexpr int kMinWins = 8;              // of 10 seeds
constexpr double kMinMedianGain = 0.05;  // at 90% sparsity
constexpr double kMaxConvergence = 0.5;  // epoch 3 over epoch 1
constexpr double kMaxTimeRatio = 10.0;   // doubling the hidden size

int failures = 0;

void verdict(int id, bool ok, const std::string& detail) {
  std::printf("criterion %2d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// grid search followed by golden-section refinement inside the best cell
double numeric_min(const std::function<double(double)>& f, double lo, double hi, int points) {
  const double step = (hi - lo) / (points - 1);
  int best = 0;
  double fb = f(lo);
  for (int i = 1; i < points; ++i) {
    const double v = f(lo + step * i);
    if (v < fb) {
      fb = v;
      best = i;
    }
  }
  double a = lo + step * std::max(best - 1, 0), b = lo + step * std::min(best + 1, points - 1);
  const double g = (std::sqrt(5.0) - 1) / 2;
  for (int it = 0; it < 200 && b - a > 1e-14 * std::max(1.0, std::abs(a)); ++it) {
    const double c = b - g * (b - a), d = a + g * (b - a);
    if (f(c) < f(d)) {
      b = d;
    } else {
      a = c;
    }
  }
  return std::min(fb, f(0.5 * (a + b)));
}

BlockSpec random_block(std::mt19937_64& rng, BlockKind kind, Index d, Index h) {
  BlockSpec b;
  b.kind = kind;
  const double su = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd = 1.0 / std::sqrt(static_cast<double>(h));
  b.layers.push_back({oracle::random_matrix(rng, h, d, su), {}});
  if (kind == BlockKind::FFNGated) b.layers.push_back({oracle::random_matrix(rng, h, d, su), {}});
  b.layers.push_back({oracle::random_matrix(rng, d, h, sd), {}});
  return b;
}

BlockState random_state(std::mt19937_64& rng, BlockKind kind, Index d, Index h, Index n) {
  const BlockSpec b = random_block(rng, kind, d, h);
  const Matrix x = oracle::random_matrix(rng, d, n);
  BlockState st = init_block_state(b, x, forward_block(b, x).output);
  st.a += oracle::random_matrix(rng, h, n, 0.5);
  st.z += oracle::random_matrix(rng, h, n, 0.5);
  if (st.gated()) st.s += oracle::random_matrix(rng, h, n, 0.5);
  for (auto& l : st.layers) l.weight += oracle::random_matrix(rng, l.weight.rows(), l.weight.cols(), 0.2);
  return st;
}

// ---------------------------------------------------------------------------

void subproblem_exactness() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> dim(1, 8);
  PruneConfig cfg;
  const double al = cfg.alpha, be = cfg.beta;
  double worst_obj = 0, worst_grad = 0;

  for (int inst = 0; inst < 100; ++inst) {
    const BlockKind kind = inst % 2 ? BlockKind::FFNGated : BlockKind::FFNReLU;
    BlockState st = random_state(rng, kind, dim(rng), dim(rng), dim(rng));
    const Index h = st.a.rows(), n = st.a.cols();

    // activation: per column normal equations solved by elimination
    update_activation(st, cfg);
    const Matrix& w = st.down().weight;
    const Matrix phi = block_activation(st);
    for (Index j = 0; j < n; ++j) {
      std::vector<std::vector<double>> g(static_cast<std::size_t>(h), std::vector<double>(static_cast<std::size_t>(h), 0.0));
      std::vector<double> rhs(static_cast<std::size_t>(h), 0.0);
      for (Index p = 0; p < h; ++p) {
        for (Index q = 0; q < h; ++q) {
          for (Index r = 0; r < w.rows(); ++r) g[p][q] += al * w(r, p) * w(r, q);
        }
        g[p][p] += be;
        for (Index r = 0; r < w.rows(); ++r) rhs[p] += al * w(r, p) * st.z_pre_out(r, j);
        rhs[p] += be * phi(p, j);
      }
      const auto a_star = oracle::gauss_solve(g, rhs);
      auto col_obj = [&](const std::vector<double>& a) {
        double f = 0;
        for (Index r = 0; r < w.rows(); ++r) {
          double v = st.z_pre_out(r, j);
          for (Index p = 0; p < h; ++p) v -= w(r, p) * a[static_cast<std::size_t>(p)];
          f += al * v * v;
        }
        for (Index p = 0; p < h; ++p) f += be * std::pow(a[static_cast<std::size_t>(p)] - phi(p, j), 2);
        return f;
      };
      std::vector<double> got(static_cast<std::size_t>(h));
      for (Index p = 0; p < h; ++p) got[static_cast<std::size_t>(p)] = st.a(p, j);
      worst_obj = std::max(worst_obj, std::abs(col_obj(got) - col_obj(a_star)) / static_cast<double>(h));
      for (Index p = 0; p < h; ++p) {
        auto f = [&](double v) {
          auto a = got;
          a[static_cast<std::size_t>(p)] = v;
          return col_obj(a);
        };
        worst_grad = std::max(worst_grad, std::abs(oracle::central_difference(f, got[static_cast<std::size_t>(p)])));
      }
    }

    // output and gate: one scalar problem per entry
    const Matrix c = st.up().apply(st.a_pre_in);
    const Matrix wg = st.gated() ? st.gate().apply(st.a_pre_in) : Matrix();
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < n; ++j) {
        const double t = st.a(i, j), ci = c(i, j);
        if (!st.gated()) {
          auto f = [&](double z) { return be * std::pow(t - std::max(z, 0.0), 2) + al * (z - ci) * (z - ci); };
          const double z = relu_output_entry(ci, t, al, be, OutputUpdateMode::ExactBranch);
          const double r = std::abs(ci) + std::abs(t) + 1.0;
          worst_obj = std::max(worst_obj, std::abs(f(z) - numeric_min(f, -r, r, 4001)));
          if (std::abs(z) > 1e-6) worst_grad = std::max(worst_grad, std::abs(oracle::central_difference(f, z)));
          continue;
        }
        const double g = numkit::silu(st.s(i, j));
        auto fz = [&](double z) { return be * std::pow(t - g * z, 2) + al * (z - ci) * (z - ci); };
        const double z = gated_output_entry(ci, g, t, al, be);
        const double rz = std::abs(z) + std::abs(ci) + 1.0;
        worst_obj = std::max(worst_obj, std::abs(fz(z) - numeric_min(fz, -rz, rz, 2001)));
        worst_grad = std::max(worst_grad, std::abs(oracle::central_difference(fz, z)));

        const double zz = st.z(i, j), w0 = wg(i, j);
        auto fs = [&](double s) { return be * std::pow(t - numkit::silu(s) * zz, 2) + al * (s - w0) * (s - w0); };
        const double s = gate_entry(t, zz, w0, st.s(i, j), al, be);
        const double reach = std::sqrt(fs(w0) / al) * (1 + 1e-9) + 1e-9;
        worst_obj = std::max(worst_obj, std::abs(fs(s) - numeric_min(fs, w0 - reach, w0 + reach, 20001)));
        worst_grad = std::max(worst_grad, std::abs(oracle::central_difference(fs, s)));
      }
    }
  }
  verdict(1, worst_obj <= kObjectiveTol && worst_grad <= kGradientTol,
          "max objective gap " + fmt("%.3g", worst_obj) + ", max |fd gradient| " + fmt("%.3g", worst_grad) +
              " over 100 instances");
}

void descent() {
  std::mt19937_64 rng(202);
  const std::vector<SparsityPattern> patterns{Unstructured{0.5}, Unstructured{0.7}, Unstructured{0.9},
                                              SemiStructured{2, 4}};
  double worst = -1e300;
  int violations = 0, checked = 0;
  for (int i = 0; i < 50; ++i) {
    const BlockKind kind = i % 2 ? BlockKind::FFNGated : BlockKind::FFNReLU;
    const Index d = 4 * (1 + i % 2);
    const BlockSpec b = random_block(rng, kind, d, 4 * d);
    const Matrix x = oracle::random_matrix(rng, d, 48);
    PruneConfig cfg;
    cfg.pattern = patterns[static_cast<std::size_t>(i) % patterns.size()];
    cfg.epochs = 3;
    const BlockSolve s = prune_block_global(b, x, forward_block(b, x).output, cfg);
    for (std::size_t k = 1; k < s.steps.size(); ++k) {
      if (s.steps[k].step == "prune_weights") continue;
      const double rise = s.steps[k].objective - s.steps[k - 1].objective;
      worst = std::max(worst, rise);
      ++checked;
      if (rise > kDescentTol) ++violations;
    }
  }
  verdict(2, violations == 0,
          std::to_string(checked) + " a/z/s steps in 50 solves, " + std::to_string(violations) +
              " increases, largest change " + fmt("%.3g", worst));
}

void omega_reduction() {
  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto [net, calib] = synthesize_fixture(
        {.seed = seed, .depth = 3, .dim = static_cast<int>(8 + 4 * (seed % 3)), .samples = 4, .tokens = 8});
    PruneConfig cfg;
    cfg.omega = OmegaMode::Local;
    cfg.pattern = seed % 2 ? SparsityPattern{Unstructured{0.7}} : SparsityPattern{SemiStructured{2, 4}};
    const PruneResult res = prune_network(net, calib, cfg);
    const ForwardResult dense = forward_record(net, calib.x);
    for (std::size_t i = 0; i < net.blocks.size(); ++i) {
      const auto& b = net.blocks[i];
      for (std::size_t l = 0; l < b.layers.size(); ++l) {
        const bool down = b.is_ffn() && l + 1 == b.layers.size();
        const Matrix& in = down ? dense.rec.blocks[i].hidden : dense.rec.blocks[i].input;
        const LocalResult r = prune_layer_local(b.layers[l].weight, in, cfg.local());
        DenseLayer stored = b.layers[l];
        stored.weight = r.weight;
        stored.narrow_to_storage();
        if (res.net.blocks[i].layers[l].weight != stored.weight || res.masks[i][l].keep != r.mask.keep) ++mismatches;
      }
    }
  }
  verdict(3, mismatches == 0, std::to_string(mismatches) + " layer mismatches over 20 networks");
}

void sparsity_exactness() {
  auto [net, calib] = synthesize_fixture({.seed = 4, .depth = 3, .dim = 16, .samples = 8, .tokens = 8});
  const std::vector<SparsityPattern> patterns{Unstructured{0.5}, Unstructured{0.7}, Unstructured{0.8},
                                              Unstructured{0.9}, SemiStructured{2, 4}, SemiStructured{3, 4}};
  int bad = 0, layers = 0;
  for (const auto& p : patterns) {
    PruneConfig cfg;
    cfg.pattern = p;
    cfg.epochs = 1;
    const PruneResult res = prune_network(net, calib, cfg);
    for (std::size_t i = 0; i < res.masks.size(); ++i) {
      for (std::size_t l = 0; l < res.masks[i].size(); ++l) {
        ++layers;
        const Mask& m = res.masks[i][l];
        const MatrixAudit a = sparsity_audit(m);
        bool ok = a.pattern_valid;
        if (const auto* u = std::get_if<Unstructured>(&p)) {
          ok = ok && a.zeros == unstructured_zero_count(u->fraction, m.keep.size());
        }
        const Matrix& w = res.net.blocks[i].layers[l].weight;
        ok = ok && w.cwiseProduct((1.0 - m.as_matrix().array()).matrix()).isZero(0.0);
        bad += ok ? 0 : 1;
      }
    }
  }
  verdict(4, bad == 0,
          std::to_string(layers) + " masks at 0.5/0.7/0.8/0.9, 2:4, 3:4; " + std::to_string(bad) + " invalid");
}

struct Paired {
  int wins = 0;
  double median_gain = 0;
  double median_ratio = 0;
};

Paired paired_runs(FixtureMix kind, double fraction, int seeds) {
  Paired p;
  std::vector<double> gains, ratios;
  for (int seed = 0; seed < seeds; ++seed) {
    auto [net, calib] = synthesize_fixture(
        {.seed = static_cast<std::uint64_t>(seed), .depth = 3, .dim = 64, .kind = kind});
    PruneConfig cfg;
    cfg.pattern = Unstructured{fraction};
    cfg.seed = static_cast<std::uint64_t>(seed);
    const double g = prune_network(net, calib, cfg).report.global_mse;
    cfg.omega = OmegaMode::Local;
    const double l = prune_network(net, calib, cfg).report.global_mse;
    p.wins += g <= l ? 1 : 0;
    gains.push_back(1.0 - g / l);
    ratios.push_back(g / l);
  }
  p.median_gain = median(gains);
  p.median_ratio = median(ratios);
  return p;
}

void high_sparsity() {
  const Paired p80 = paired_runs(FixtureMix::ReLU, 0.8, 10);
  const Paired p90 = paired_runs(FixtureMix::ReLU, 0.9, 10);
  const bool ok = p80.wins >= kMinWins && p90.wins >= kMinWins && p90.median_gain >= kMinMedianGain;
  verdict(5, ok,
          "relu fixture: 80% wins " + std::to_string(p80.wins) + "/10 (median gain " +
              fmt("%.1f%%", 100 * p80.median_gain) + "), 90% wins " + std::to_string(p90.wins) +
              "/10 (median gain " + fmt("%.1f%%", 100 * p90.median_gain) + ")");
  for (FixtureMix kind : {FixtureMix::Mixed, FixtureMix::Gated}) {
    const Paired q = paired_runs(kind, 0.8, 3);
    std::printf("              info: %s fixture at 80%%, global/local mse median ratio %.3f, wins %d/3\n",
                std::string(to_string(kind)).c_str(), q.median_ratio, q.wins);
  }
}

void convergence() {
  std::string detail;
  bool ok = true;
  for (double fraction : {0.8, 0.9}) {
    int relu_ok = 0, gated_ok = 0;
    double relu_worst = 0, gated_worst = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto [net, calib] = synthesize_fixture({.seed = seed});
      const ForwardResult dense = forward_record(net, calib.x);
      PruneConfig cfg;
      cfg.pattern = Unstructured{fraction};
      cfg.epochs = 3;
      for (std::size_t b = 0; b < net.blocks.size(); ++b) {
        if (!net.blocks[b].is_ffn()) continue;
        const auto& rec = dense.rec.blocks[b];
        const BlockSolve s = prune_block_global(net.blocks[b], rec.input, rec.output, cfg);
        const double ratio = s.trace[2] / s.trace[0];
        const bool pass = ratio <= kMaxConvergence;
        if (net.blocks[b].kind == BlockKind::FFNGated) {
          gated_ok += pass;
          gated_worst = std::max(gated_worst, ratio);
        } else {
          relu_ok += pass;
          relu_worst = std::max(relu_worst, ratio);
        }
      }
    }
    ok = ok && relu_ok >= kMinWins && gated_ok >= kMinWins;
    if (!detail.empty()) detail += "; ";
    detail += fmt("%.0f%%: ", 100 * fraction) + "relu " + std::to_string(relu_ok) + "/10 (worst " +
              fmt("%.2f", relu_worst) + "), gated " + std::to_string(gated_ok) + "/10 (worst " +
              fmt("%.2f", gated_worst) + ")";
  }
  verdict(6, ok, detail);
}

void reconstruction() {
  std::mt19937_64 rng(707);
  std::uniform_int_distribution<int> rows(1, 8), cols(2, 12);
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  int worse = 0;
  double worst = -1e300;
  for (int i = 0; i < 100; ++i) {
    const Index r = rows(rng), c = cols(rng);
    const Matrix w = oracle::random_matrix(rng, r, c);
    const Matrix x = oracle::random_matrix(rng, c, 3 * c);
    const Mask m = build_mask(compute_scores(w, Criterion::Wanda, x), Unstructured{frac(rng)});
    const double damp = i % 2 ? 0.0 : 0.01;
    const double e_rec = layer_error(w, reconstruct_weights(w, x, m, damp), x);
    const double e_zero = layer_error(w, w.cwiseProduct(m.as_matrix()), x);
    worst = std::max(worst, e_rec - e_zero);
    worse += e_rec > e_zero + kReconTol ? 1 : 0;
  }

  int missed = 0;
  for (int i = 0; i < 100; ++i) {
    const Matrix w = oracle::random_matrix(rng, 1, 2);
    Matrix x = oracle::random_matrix(rng, 2, 6);
    x.row(1) *= x.row(0).norm() / x.row(1).norm();
    // optimum over both single-weight masks, least squares in closed form
    double y2 = 0, best = 1e300;
    const Matrix y = w * x;
    y2 = y.squaredNorm();
    for (Index k = 0; k < 2; ++k) {
      const double dot = x.row(k).dot(y.row(0)), nn = x.row(k).squaredNorm();
      best = std::min(best, y2 - dot * dot / nn);
    }
    const LocalResult res = prune_layer_local(w, x, {Criterion::Wanda, Unstructured{0.5}, 0.0});
    missed += std::abs(res.error - best) <= kReconTol * std::max(1.0, y2) ? 0 : 1;
  }
  verdict(7, worse == 0 && missed == 0,
          std::to_string(worse) + "/100 layers worse than zero-fill (largest change " + fmt("%.3g", worst) +
              "), 1x2 enumeration misses " + std::to_string(missed) + "/100");
}

void complexity() {
  auto epoch_time = [](int dim) {
    auto [net, calib] = synthesize_fixture({.seed = 8, .depth = 1, .dim = dim, .kind = FixtureMix::ReLU});
    const BlockRecord rec = forward_block(net.blocks[0], calib.x);
    PruneConfig cfg;
    cfg.pattern = Unstructured{0.8};
    cfg.epochs = 1;
    std::vector<double> t;
    for (int rep = 0; rep < 5; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      prune_block_global(net.blocks[0], rec.input, rec.output, cfg);
      t.push_back(seconds_since(t0));
    }
    return median(t);
  };
  const double t64 = epoch_time(64), t128 = epoch_time(128);
  const double ratio = t128 / t64;
  verdict(8, ratio <= kMaxTimeRatio,
          "per-epoch median " + fmt("%.3f s", t64) + " at 64, " + fmt("%.3f s", t128) + " at 128, ratio " +
              fmt("%.2f", ratio));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void determinism() {
  const fs::path dir = fs::temp_directory_path() / ("sparsellm_accept_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  std::vector<std::string> problems;

  auto [net, calib] = synthesize_fixture({.seed = 9, .depth = 3, .dim = 16, .samples = 8, .tokens = 8});
  PruneConfig cfg;
  cfg.pattern = Unstructured{0.7};
  cfg.seed = 9;
  const PruneResult a = prune_network(net, calib, cfg);
  cfg.threads = 3;
  const PruneResult b = prune_network(net, calib, cfg);
  if (without_wall_time(a.report) != without_wall_time(b.report)) problems.push_back("same-seed reports differ");

  io::save_model(a.net, dir / "m1", cli::mask_tensors(a.net, a.masks));
  io::save_model(b.net, dir / "m2", cli::mask_tensors(b.net, b.masks));
  io::save_calibration(calib, dir / "calib");
  write_report(a.report, dir / "report.json");
  for (const auto& e : fs::directory_iterator(dir / "m1")) {
    if (slurp(e.path()) != slurp(dir / "m2" / e.path().filename())) problems.push_back("model bytes differ");
  }

  io::MaskTensors masks;
  const NetworkSpec loaded = io::load_model(dir / "m1", &masks);
  io::save_model(loaded, dir / "m3", masks);
  for (const auto& e : fs::directory_iterator(dir / "m1")) {
    if (slurp(e.path()) != slurp(dir / "m3" / e.path().filename())) problems.push_back("container round trip");
  }
  const PruneReport rep = read_report(dir / "report.json");
  if (!(rep == a.report) || report_to_string(rep) != slurp(dir / "report.json")) {
    problems.push_back("report round trip");
  }
  const cli::EvalResult ev = cli::evaluate(loaded, masks, io::load_calibration(dir / "calib"), &rep);
  for (const auto& d : ev.discrepancies) problems.push_back("eval: " + d);
  fs::remove_all(dir);

  std::string detail = problems.empty() ? "prune/eval, container, report and same-seed checks agree" : "";
  for (const auto& p : problems) detail += p + "; ";
  verdict(9, problems.empty(), detail);
}

void moore_penrose() {
  std::mt19937_64 rng(1010);
  std::uniform_int_distribution<int> size(1, 64);
  double worst = 0;
  int deficient = 0;
  for (int i = 0; i < 100; ++i) {
    const Index m = size(rng), n = size(rng);
    Matrix a;
    if (i % 3 == 0) {
      const Index r = std::max<Index>(1, std::min(m, n) / 2);
      a = oracle::matmul(oracle::random_matrix(rng, m, r), oracle::random_matrix(rng, r, n));
      ++deficient;
    } else {
      a = oracle::random_matrix(rng, m, n);
    }
    const Matrix p = numkit::pinv(a);
    const Matrix ap = oracle::matmul(a, p), pa = oracle::matmul(p, a);
    worst = std::max({worst, max_abs(oracle::matmul(ap, a) - a), max_abs(oracle::matmul(pa, p) - p),
                      max_abs(ap - ap.transpose()), max_abs(pa - pa.transpose())});
  }
  verdict(10, worst <= kPenroseTol,
          "100 matrices (" + std::to_string(deficient) + " rank-deficient), worst condition residual " +
              fmt("%.3g", worst));
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::function<void()>> checks{subproblem_exactness, descent, omega_reduction,
                                                  sparsity_exactness,   high_sparsity, convergence,
                                                  reconstruction,       complexity, determinism,
                                                  moore_penrose};
  for (std::size_t i = 0; i < checks.size(); ++i) {
    try {
      checks[i]();
    } catch (const std::exception& e) {
      verdict(static_cast<int>(i + 1), false, std::string("exception: ") + e.what());
    }
  }
  std::printf("acceptance: %d failure(s), %.1f s\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
