// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>

#include "dimekit/bench.hpp"
#include "dimekit/checkpoint.hpp"
#include "dimekit/datakit.hpp"
#include "dimekit/trainer.hpp"
#include "dimekit/uncertainty.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dimekit;
namespace t = dimekit::testing;

namespace {

// ---- pinned tolerances ----

constexpr double kForceFdStep = 1e-4;            // Angstrom
constexpr double kForceFdTol = 1e-4;             // max relative error
constexpr double kInvarianceTol = 1e-8;          // |dE| <= tol (1 + |E|)
constexpr double kEquivarianceTol = 1e-8;        // |F' - R F| <= tol (1 + max |F|)
constexpr double kNetForceTol = 1e-7;            // eV/Angstrom
constexpr double kCovIdentityTol = 1e-6;         // relative
constexpr double kBenchRatioMin = 3.0;
constexpr double kBaselineFactor = 5.0;          // mae_F <= baseline / 5
constexpr double kLossReduction = 10.0;
constexpr int kMaxTrainSteps = 20000;
constexpr double kCalibrationRhoMin = 0.3;
constexpr double kLabelFdTol = 1e-8;
constexpr double kDriftTol = 1e-4;               // eV over 1000 steps
constexpr double kOracleBasisTol = 1e-10;
constexpr double kRootTol = 1e-12;

// runtime limits in seconds
constexpr double kLimitForces = 60, kLimitSymmetry = 60, kLimitBench = 120, kLimitLearning = 1800;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
  return buf;
}

// ---- shared fixtures ----

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.hidden_dim = 64;
  cfg.out_emb_dim = 128;
  cfg.triplet_dim = 32;
  cfg.num_blocks = 2;
  return cfg;
}

ParameterStore randomized(const DimeNetPP& model, std::uint64_t seed) {
  ParameterStore p = model.init_parameters(seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& e : p.entries())
    if (e.name.ends_with("final.W"))
      for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] = n(rng);
  return p;
}

/// One snapshot per trajectory, clusters of 2-6 atoms.
std::vector<AtomicConfiguration> varied_snapshots(std::size_t n, std::uint64_t seed) {
  ToyPotentialConfig cfg;
  cfg.min_cluster = 2;
  cfg.max_cluster = 6;
  cfg.snapshots_per_trajectory = 1;
  return generate_collisions(cfg, n, seed);
}

struct ToyCorpus {
  ToyPotentialConfig cfg;
  std::vector<AtomicConfiguration> train, val, test;  // raw labels
  ReferenceEnergies refs;
  std::vector<AtomicConfiguration> train_shifted, val_shifted, test_shifted;
};

const ToyCorpus& corpus() {
  static const ToyCorpus c = [] {
    ToyCorpus c;
    c.train = generate_collisions(c.cfg, 2000, 101);
    c.val = generate_collisions(c.cfg, 200, 102);
    c.test = generate_collisions(c.cfg, 200, 103);
    c.refs = fit_reference_energies(c.train);
    c.train_shifted = shift_energies(c.train, c.refs);
    c.val_shifted = shift_energies(c.val, c.refs);
    c.test_shifted = shift_energies(c.test, c.refs);
    return c;
  }();
  return c;
}

TrainConfig learning_schedule() {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.warmup_steps = 300;
  cfg.decay_rate = 0.1;
  cfg.decay_steps = 8000;
  cfg.batch_size = 8;
  cfg.max_steps = 8000;
  cfg.eval_interval = 1000;
  cfg.seed = 5;
  return cfg;
}

ModelConfig ensemble_model() { return small_model(); }

TrainConfig ensemble_schedule() {
  TrainConfig cfg = learning_schedule();
  cfg.max_steps = 3000;
  cfg.decay_steps = 3000;
  cfg.eval_interval = 1000;
  cfg.seed = 11;
  return cfg;
}

const Ensemble& trained_ensemble() {
  static const Ensemble ens = [] {
    const auto& c = corpus();
    return ensemble_train(c.train_shifted, c.val_shifted, ensemble_model(), ensemble_schedule(), 3).ensemble;
  }();
  return ens;
}

double dataset_loss(const DimeNetPP& model, const ParameterStore& params, std::span<const AtomicConfiguration> data,
                    const TrainConfig& cfg) {
  const auto preds = predict_dataset(model, params, data, true);
  double s = 0;
  for (std::size_t i = 0; i < data.size(); ++i) s += loss(preds[i], data[i], cfg);
  return s / static_cast<double>(data.size());
}

// ---- criteria ----

Outcome criterion_forces() {
  const auto t0 = std::chrono::steady_clock::now();
  const DimeNetPP model(small_model());
  const ParameterStore params = randomized(model, 3);
  std::vector<AtomicConfiguration> configs;
  for (const auto& c : varied_snapshots(80, 7))
    if (c.size() >= 5 && c.size() <= 12 && configs.size() < 20) configs.push_back(c);
  if (configs.size() < 20) return {false, "only " + std::to_string(configs.size()) + " configurations with 5-12 atoms"};
  double worst = 0;
  for (const auto& c : configs) {
    const Prediction p = model.predict(params, c, true);
    std::vector<Vec3> fd(c.size());
    AtomicConfiguration moved = c;
    for (std::size_t a = 0; a < c.size(); ++a)
      for (int k = 0; k < 3; ++k) {
        moved.positions[a][k] = c.positions[a][k] + kForceFdStep;
        const double ep = model.energy(params, moved);
        moved.positions[a][k] = c.positions[a][k] - kForceFdStep;
        const double em = model.energy(params, moved);
        moved.positions[a][k] = c.positions[a][k];
        fd[a][k] = -(ep - em) / (2 * kForceFdStep);
      }
    worst = std::max(worst, t::force_relative_error(*p.forces, fd, 1e-12));
  }
  const double secs = elapsed(t0);
  return {worst < kForceFdTol && secs < kLimitForces,
          "max rel err " + fmt(worst) + " over 20 configs, " + fmt(secs) + " s"};
}

Outcome criterion_symmetry() {
  const auto t0 = std::chrono::steady_clock::now();
  const DimeNetPP model(small_model());
  const ParameterStore params = randomized(model, 4);
  const auto configs = varied_snapshots(200, 8);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 3.0);
  double worst_e = 0, worst_f = 0, worst_net = 0, worst_torque = 0, worst_perm = 0;
  for (const auto& c : configs) {
    const Prediction p = model.predict(params, c, true);
    const auto& f = *p.forces;
    double fmax = 0;
    for (const auto& v : f) fmax = std::max(fmax, v.cwiseAbs().maxCoeff());
    const double e_scale = 1 + std::abs(p.energy), f_scale = 1 + fmax;

    const Eigen::Matrix3d R = t::random_rotation(rng);
    const Vec3 shift(g(rng), g(rng), g(rng));
    AtomicConfiguration moved = c;
    for (auto& x : moved.positions) x = R * x + shift;
    const Prediction q = model.predict(params, moved, true);
    worst_e = std::max(worst_e, std::abs(q.energy - p.energy) / e_scale);
    for (std::size_t a = 0; a < c.size(); ++a)
      worst_f = std::max(worst_f, ((*q.forces)[a] - R * f[a]).cwiseAbs().maxCoeff() / f_scale);

    std::vector<std::size_t> perm(c.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    AtomicConfiguration permuted;
    for (std::size_t a : perm) {
      permuted.atomic_numbers.push_back(c.atomic_numbers[a]);
      permuted.positions.push_back(c.positions[a]);
    }
    const Prediction r = model.predict(params, permuted, true);
    worst_perm = std::max(worst_perm, std::abs(r.energy - p.energy) / e_scale);
    for (std::size_t a = 0; a < c.size(); ++a)
      worst_perm = std::max(worst_perm, ((*r.forces)[a] - f[perm[a]]).cwiseAbs().maxCoeff() / f_scale);

    Vec3 net = Vec3::Zero(), torque = Vec3::Zero(), centroid = Vec3::Zero();
    for (const auto& x : c.positions) centroid += x / static_cast<double>(c.size());
    for (std::size_t a = 0; a < c.size(); ++a) {
      net += f[a];
      torque += (c.positions[a] - centroid).cross(f[a]);
    }
    worst_net = std::max(worst_net, net.cwiseAbs().maxCoeff());
    worst_torque = std::max(worst_torque, torque.cwiseAbs().maxCoeff());
  }
  const double secs = elapsed(t0);
  const bool pass = worst_e <= kInvarianceTol && worst_perm <= kInvarianceTol && worst_f <= kEquivarianceTol &&
                    worst_net < kNetForceTol && worst_torque < kNetForceTol && secs < kLimitSymmetry;
  return {pass, "200 cases: dE " + fmt(worst_e) + ", dF " + fmt(worst_f) + ", perm " + fmt(worst_perm) +
                    ", net F " + fmt(worst_net) + ", net torque " + fmt(worst_torque) + ", " + fmt(secs) + " s"};
}

Outcome criterion_cov_identity() {
  const Ensemble& ens = trained_ensemble();
  const auto& test = corpus().test;
  double worst = 0;
  for (int i = 0; i < 10; ++i) {
    const auto check = cov_identity_check(ens, test[static_cast<std::size_t>(i) * 20]);
    worst = std::max(worst, check.relative);
  }
  return {worst < kCovIdentityTol, "K=3, max relative residual " + fmt(worst) + " on 10 configs"};
}

Outcome criterion_bench() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg;  // hidden 128, triplet_dim 64
  cfg.hidden_dim = 128;
  cfg.triplet_dim = 64;
  const BenchResult r = bench_interactions(cfg, 100000, 3, 1);
  const double secs = elapsed(t0);
  return {r.ratio() >= kBenchRatioMin && secs < kLimitBench,
          "bilinear " + fmt(r.bilinear.per_triplet_ns) + " ns/triplet, hadamard " + fmt(r.hadamard.per_triplet_ns) +
              " ns/triplet, ratio " + fmt(r.ratio()) + ", " + fmt(secs) + " s"};
}

Outcome criterion_learning() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& c = corpus();
  const TrainConfig cfg = learning_schedule();
  if (cfg.max_steps > kMaxTrainSteps) return {false, "schedule exceeds the step budget"};
  const DimeNetPP model(small_model());
  const ParameterStore init = model.init_parameters(cfg.seed);
  const TrainResult r = train(c.train_shifted, c.val_shifted, small_model(), cfg);
  const double loss0 = dataset_loss(model, init, c.train_shifted, cfg);
  const double loss1 = dataset_loss(model, r.params, c.train_shifted, cfg);
  const Metrics m = evaluate(model, r.params, c.val_shifted);
  double baseline = 0;
  std::size_t n = 0;
  for (const auto& x : c.val)
    for (const auto& f : *x.forces) baseline += f.cwiseAbs().sum(), n += 3;
  baseline /= static_cast<double>(n);
  const double secs = elapsed(t0);
  const bool pass = m.mae_forces * kBaselineFactor <= baseline && loss0 >= kLossReduction * loss1 &&
                    secs < kLimitLearning;
  return {pass, std::to_string(cfg.max_steps) + " steps: val mae_F " + fmt(m.mae_forces) + " vs zero-force " +
                    fmt(baseline) + " (" + fmt(baseline / m.mae_forces) + "x), train loss " + fmt(loss0) + " -> " +
                    fmt(loss1) + " (" + fmt(loss0 / loss1) + "x), " + fmt(secs) + " s"};
}

Outcome criterion_calibration() {
  const auto& c = corpus();
  const Ensemble& ens = trained_ensemble();
  const auto preds = ensemble_predict_dataset(ens, c.test_shifted);
  const auto report = calibration(preds, c.test_shifted);

  ModelConfig mve_cfg = ensemble_model();
  mve_cfg.mve_head = true;
  TrainConfig mve_train = ensemble_schedule();
  mve_train.loss = LossKind::nll;
  const TrainResult mve = train(c.train_shifted, c.val_shifted, mve_cfg, mve_train);
  const DimeNetPP mve_model(mve_cfg);
  std::vector<Prediction> mve_preds;
  bool sigma_f_absent = true;
  for (const auto& x : c.test_shifted) {
    mve_preds.push_back(mve_model.mve_forward(mve.params, x));
    sigma_f_absent = sigma_f_absent && !mve_preds.back().sigma_forces.has_value();
  }
  const auto mve_report = calibration(mve_preds, c.test_shifted);
  const bool pass = report.rho_forces && *report.rho_forces > kCalibrationRhoMin && sigma_f_absent &&
                    !mve_report.force_sigma_available;
  auto show = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("undefined"); };
  return {pass, "ensemble rho(dF, sF) " + show(report.rho_forces) + ", rho(dE, sE) " + show(report.rho_energy) +
                    "; MVE sigma_F " + (sigma_f_absent ? "absent" : "present") + ", rho(dF, sE) " +
                    show(mve_report.rho_forces_vs_energy) + " (reported only)"};
}

Outcome criterion_oracles() {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> natoms(2, 14);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = t::random_configuration(natoms(rng), rng, 5.0, 0.5);
    const auto e = build_edges(c, 2.5);
    const auto trip = build_triplets(e);
    if (t::as_atoms(e, trip) != t::brute_triplets(c, 2.5) || trip.size() != t::brute_triplets(c, 2.5).size())
      ++mismatches;
  }
  double root_residual = 0, pi_error = 0;
  for (int l = 0; l < 7; ++l) {
    const auto z = bessel_roots(l, 6);
    for (int n = 0; n < 6; ++n) {
      root_residual = std::max(root_residual, std::abs(t::oracle_j(l, z[n])));
      if (l == 0) pi_error = std::max(pi_error, std::abs(z[n] - (n + 1) * std::numbers::pi));
    }
  }
  BasisConfig cfg;
  const BasisTables tables(cfg);
  std::uniform_real_distribution<double> ud(0.2, 5.0), ua(0.0, std::numbers::pi);
  double basis_error = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const double d = ud(rng), alpha = ua(rng);
    const double env = t::oracle_envelope(d / cfg.cutoff, cfg.envelope_exponent);
    const auto rbf = radial_basis(d, cfg);
    for (int n = 0; n < cfg.num_radial; ++n) {
      const double expected = std::sqrt(2.0 / cfg.cutoff) * std::sin((n + 1) * std::numbers::pi * d / cfg.cutoff) / d * env;
      basis_error = std::max(basis_error, std::abs(rbf[n] - expected));
    }
    const auto sbf = spherical_basis(d, alpha, tables);
    for (int l = 0; l < cfg.num_spherical; ++l)
      for (int n = 0; n < cfg.num_radial; ++n) {
        const double z = tables.root(l, n);
        const double norm = std::sqrt(2.0 / std::pow(cfg.cutoff, 3)) / std::abs(t::oracle_j(l + 1, z));
        const double y = std::sqrt((2 * l + 1) / (4 * std::numbers::pi)) * t::oracle_p(l, std::cos(alpha));
        const double expected = norm * t::oracle_j(l, z * d / cfg.cutoff) * y * env;
        basis_error = std::max(basis_error, std::abs(sbf[tables.index(l, n)] - expected));
      }
  }
  const bool pass = mismatches == 0 && root_residual < kRootTol && pi_error < kRootTol && basis_error < kOracleBasisTol;
  return {pass, std::to_string(mismatches) + " triplet mismatches / 100 graphs; max |j_l(z)| " + fmt(root_residual) +
                    ", |z_0n - n pi| " + fmt(pi_error) + ", basis error " + fmt(basis_error)};
}

Outcome criterion_determinism() {
  auto run = [] {
    ToyPotentialConfig toy;
    toy.duration_fs = 60;
    const auto data = generate_collisions(toy, 60, 42, nullptr, 1);
    const auto refs = fit_reference_energies(data);
    const auto shifted = shift_energies(data, refs);
    const std::vector<AtomicConfiguration> train_set(shifted.begin(), shifted.begin() + 50);
    const std::vector<AtomicConfiguration> val_set(shifted.begin() + 50, shifted.end());
    ModelConfig model;
    model.hidden_dim = 16;
    model.out_emb_dim = 16;
    model.triplet_dim = 8;
    model.num_blocks = 2;
    TrainConfig cfg;
    cfg.max_steps = 100;
    cfg.batch_size = 4;
    cfg.warmup_steps = 10;
    cfg.eval_interval = 50;
    cfg.seed = 42;
    const TrainResult r = train(train_set, val_set, model, cfg);
    const Metrics m = evaluate(DimeNetPP(model), r.params, val_set);
    std::ostringstream bytes;
    write_extxyz(bytes, data);
    write_checkpoint(bytes, Checkpoint{model, r.params, refs});
    bytes << format_double(m.mae_energy) << format_double(m.mae_forces) << format_double(m.std_mae)
          << format_double(m.log_mae);
    for (const auto& e : r.log) bytes << format_double(e.train_loss) << format_double(e.val_mae_forces);
    return bytes.str();
  };
  const std::string a = run(), b = run();
  return {a == b, "two runs with seed 42, one thread: " + std::to_string(a.size()) + " bytes, " +
                      (a == b ? "identical" : "different")};
}

Outcome criterion_toy_consistency() {
  const auto& c = corpus();
  double worst = 0, worst_energy = 0;
  std::size_t checked = 0;
  for (const auto* split : {&c.train, &c.val, &c.test})
    for (const auto& x : *split) {
      worst = std::max(worst, t::force_relative_error(*x.forces, t::oracle_toy_forces(c.cfg, x), 1e-3));
      std::vector<std::array<long double, 3>> pos(x.size());
      for (std::size_t a = 0; a < x.size(); ++a)
        for (int k = 0; k < 3; ++k) pos[a][k] = x.positions[a][k];
      long double e = t::oracle_toy_energy(c.cfg, x.atomic_numbers, pos);
      for (int z : x.atomic_numbers) e += c.cfg.atom_energies.at(z);
      worst_energy = std::max(worst_energy, static_cast<double>(std::abs(e - *x.energy) / std::abs(e)));
      ++checked;
    }
  double drift = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto d = integrator_drift(c.cfg, seed, 1000);
    if (!d) return {false, "drift trajectory escaped"};
    drift = std::max(drift, *d);
  }
  const bool pass = worst < kLabelFdTol && worst_energy < 1e-12 && drift < kDriftTol;
  return {pass, std::to_string(checked) + " labels: max force rel err " + fmt(worst) + ", energy rel err " +
                    fmt(worst_energy) + "; drift over 1000 steps " + fmt(drift) + " eV (10 trajectories)"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"force/gradient correctness", criterion_forces},
      {"symmetry suite", criterion_symmetry},
      {"variance-gradient covariance identity", criterion_cov_identity},
      {"interaction cost hadamard vs bilinear", criterion_bench},
      {"learning capability", criterion_learning},
      {"uncertainty calibration", criterion_calibration},
      {"oracle equivalences", criterion_oracles},
      {"determinism", criterion_determinism},
      {"toy data self-consistency", criterion_toy_consistency}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("criterion %zu: %s  %s  [%s] (%.1f s)\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), elapsed(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
