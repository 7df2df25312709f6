#pragma once

// Deep-ensemble and mean-variance uncertainty: ensemble prediction, error vs
// sigma calibration correlations, and a numerical check of
// d(sigma_E^2)/dx = -2 Cov(E, F) across ensemble members.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include "dimekit/diff.hpp"
#include "dimekit/errors.hpp"
#include "dimekit/model.hpp"
#include "dimekit/trainer.hpp"

namespace dimekit {

struct Ensemble {
  ModelConfig config;
  std::vector<ParameterStore> members;
  std::vector<std::uint64_t> seeds;

  std::size_t size() const { return members.size(); }
};

namespace detail {
/// Mean and unbiased standard deviation; sd is 0 for a single sample.
inline std::pair<double, double> mean_sd(std::span<const double> v) {
  // shifted by the first sample so identical members reproduce it exactly
  double shift = 0;
  for (double x : v) shift += x - v[0];
  const double mean = v[0] + shift / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return {mean, std::sqrt(s / static_cast<double>(v.size() - 1))};
}
}  // namespace detail

/// Member mean and spread of already computed predictions.
inline Prediction combine_members(std::span<const Prediction> members) {
  expects(!members.empty(), "ensemble: needs at least one member");
  Prediction out;
  std::vector<double> e;
  for (const auto& m : members) e.push_back(m.energy);
  const auto [mu, sd] = detail::mean_sd(e);
  out.energy = mu;
  out.sigma_energy = sd;
  if (members.front().forces) {
    const std::size_t n = members.front().forces->size();
    out.forces.emplace(n);
    out.sigma_forces.emplace(n);
    std::vector<double> comp(members.size());
    for (std::size_t a = 0; a < n; ++a)
      for (int k = 0; k < 3; ++k) {
        for (std::size_t i = 0; i < members.size(); ++i) comp[i] = (*members[i].forces)[a][k];
        const auto [fm, fs] = detail::mean_sd(comp);
        (*out.forces)[a][k] = fm;
        (*out.sigma_forces)[a][k] = fs;
      }
  }
  return out;
}

inline Prediction ensemble_predict(const Ensemble& ens, const AtomicConfiguration& config, bool with_forces = true) {
  expects(ens.size() >= 1, "ensemble_predict: ensemble is empty");
  const DimeNetPP model(ens.config);
  const Graph graph = make_graph(config, ens.config.basis.cutoff);
  std::vector<Prediction> preds;
  for (const auto& p : ens.members) preds.push_back(model.predict(p, graph, with_forces)[0]);
  return combine_members(preds);
}

inline std::vector<Prediction> ensemble_predict_dataset(const Ensemble& ens, std::span<const AtomicConfiguration> data,
                                                        bool with_forces = true) {
  expects(ens.size() >= 1, "ensemble_predict: ensemble is empty");
  const DimeNetPP model(ens.config);
  std::vector<std::vector<Prediction>> per_member;
  for (const auto& p : ens.members) per_member.push_back(predict_dataset(model, p, data, with_forces));
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<Prediction> members;
    for (const auto& pm : per_member) members.push_back(pm[i]);
    out.push_back(combine_members(members));
  }
  return out;
}

/// Pearson correlation; empty when either side has zero variance.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InputError("pearson: length mismatch");
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct CalibrationReport {
  std::optional<double> rho_energy;             // rho(Delta_E, sigma_E)
  std::optional<double> rho_forces;             // rho(Delta_F, sigma_F)
  std::optional<double> rho_forces_vs_energy;   // rho(Delta_F, sigma_E)
  bool force_sigma_available = false;
  std::size_t energy_samples = 0;
  std::size_t force_samples = 0;
  std::vector<double> delta_energy, sigma_energy;  // per configuration
};

/// Correlations between absolute errors and predicted sigmas. Force errors are
/// pooled over all 3N components of every configuration.
inline CalibrationReport calibration(std::span<const Prediction> preds, std::span<const AtomicConfiguration> labels) {
  if (preds.size() != labels.size()) throw InputError("calibration: prediction and label counts differ");
  CalibrationReport r;
  bool have_sigma_e = true, have_forces = true, have_sigma_f = true;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!labels[i].energy) throw InputError("calibration: configuration without energy label");
    have_sigma_e = have_sigma_e && preds[i].sigma_energy.has_value();
    have_forces = have_forces && labels[i].forces && preds[i].forces;
    have_sigma_f = have_sigma_f && preds[i].sigma_forces.has_value();
  }
  std::vector<double> df, sf, se_per_component;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    r.delta_energy.push_back(std::abs(preds[i].energy - *labels[i].energy));
    r.sigma_energy.push_back(have_sigma_e ? *preds[i].sigma_energy : std::nan(""));
    if (!have_forces) continue;
    for (std::size_t a = 0; a < labels[i].size(); ++a)
      for (int k = 0; k < 3; ++k) {
        df.push_back(std::abs((*preds[i].forces)[a][k] - (*labels[i].forces)[a][k]));
        if (have_sigma_f) sf.push_back((*preds[i].sigma_forces)[a][k]);
        if (have_sigma_e) se_per_component.push_back(*preds[i].sigma_energy);
      }
  }
  r.energy_samples = preds.size();
  r.force_samples = df.size();
  r.force_sigma_available = have_sigma_f && have_forces;
  if (have_sigma_e) r.rho_energy = pearson(r.delta_energy, r.sigma_energy);
  if (r.force_sigma_available) r.rho_forces = pearson(df, sf);
  if (have_sigma_e && have_forces) r.rho_forces_vs_energy = pearson(df, se_per_component);
  return r;
}

struct CovarianceCheck {
  Matrix variance_gradient;  // d(sigma_E^2)/dx, N x 3
  Matrix covariance_term;    // -2 Cov(E, F), N x 3
  double max_abs = 0;
  double relative = 0;       // max_abs / max |variance_gradient|
};

using EnergyFunction = std::function<Tensor(const Tensor& positions)>;

/// Differentiates the unbiased member variance of E with respect to the
/// positions and compares with -2 Cov(E_k, F_k) over members.
inline CovarianceCheck covariance_identity_check(std::span<const EnergyFunction> members, const Matrix& positions) {
  expects(members.size() >= 2, "covariance identity: needs at least two members");
  const double K = static_cast<double>(members.size());
  const Tensor pos = diff::variable(positions);
  std::vector<Tensor> energies;
  std::vector<double> e_values;
  std::vector<Matrix> forces;
  for (const auto& f : members) {
    const Tensor e = f(pos);
    expects(e.rows() == 1 && e.cols() == 1, "covariance identity: member energy must be scalar");
    energies.push_back(e);
    e_values.push_back(e.item());
    forces.push_back(-diff::grad(e, {pos})[0].value());
  }
  Tensor mean = energies[0];
  for (std::size_t k = 1; k < energies.size(); ++k) mean = mean + energies[k];
  mean = diff::scale(mean, 1.0 / K);
  Tensor var;
  for (const auto& e : energies) {
    const Tensor d = e - mean;
    var = var.defined() ? var + d * d : d * d;
  }
  var = diff::scale(var, 1.0 / (K - 1.0));

  CovarianceCheck c;
  c.variance_gradient = diff::grad(var, {pos})[0].value();
  double e_mean = 0;
  for (double e : e_values) e_mean += e;
  e_mean /= K;
  Matrix f_mean = Matrix::Zero(positions.rows(), positions.cols());
  for (const auto& f : forces) f_mean += f;
  f_mean /= K;
  Matrix cov = Matrix::Zero(positions.rows(), positions.cols());
  for (std::size_t k = 0; k < forces.size(); ++k) cov += (e_values[k] - e_mean) * (forces[k] - f_mean);
  c.covariance_term = -2.0 * cov / (K - 1.0);
  c.max_abs = (c.variance_gradient - c.covariance_term).cwiseAbs().maxCoeff();
  const double scale = c.variance_gradient.cwiseAbs().maxCoeff();
  c.relative = scale > 0 ? c.max_abs / scale : c.max_abs;
  return c;
}

inline CovarianceCheck cov_identity_check(const Ensemble& ens, const AtomicConfiguration& config) {
  expects(ens.size() >= 2, "cov_identity_check: needs K >= 2");
  const DimeNetPP model(ens.config);
  const Graph graph = make_graph(config, ens.config.basis.cutoff);
  std::vector<BoundParameters> bound;
  for (const auto& p : ens.members) bound.emplace_back(p, false);
  std::vector<EnergyFunction> fns;
  for (const auto& b : bound)
    fns.push_back([&model, &graph, &b](const Tensor& pos) { return model.forward(b, graph, pos).energy; });
  return covariance_identity_check(fns, graph.positions);
}

struct EnsembleTrainResult {
  Ensemble ensemble;
  std::vector<TrainResult> runs;
  double seconds = 0;
};

/// K runs differing only in seed (initialization and shuffling): member k uses
/// seed + k. Members train on up to `threads` workers.
inline EnsembleTrainResult ensemble_train(std::span<const AtomicConfiguration> train_set,
                                          std::span<const AtomicConfiguration> val_set, const ModelConfig& model_cfg,
                                          const TrainConfig& cfg, int k, int threads = 1,
                                          const std::function<void(int, const LogEntry&)>& on_log = {}) {
  expects(k >= 1, "ensemble_train: K must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  EnsembleTrainResult r;
  r.ensemble.config = model_cfg;
  r.runs.resize(static_cast<std::size_t>(k));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));
  auto run_member = [&](int i) {
    try {
      TrainConfig member = cfg;
      member.seed = cfg.seed + static_cast<std::uint64_t>(i);
      LogCallback cb;
      if (on_log) cb = [&, i](const LogEntry& e) { on_log(i, e); };
      r.runs[i] = train(train_set, val_set, model_cfg, member, cb);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const int workers = std::max(1, std::min(threads, k));
  if (workers == 1) {
    for (int i = 0; i < k; ++i) run_member(i);
  } else {
    for (int base = 0; base < k; base += workers) {
      std::vector<std::thread> pool;
      for (int i = base; i < std::min(k, base + workers); ++i) pool.emplace_back(run_member, i);
      for (auto& t : pool) t.join();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (int i = 0; i < k; ++i) {
    r.ensemble.members.push_back(r.runs[i].params);
    r.ensemble.seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace dimekit
