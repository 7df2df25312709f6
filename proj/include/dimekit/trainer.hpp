#pragma once

// Energy/force training with an adaptive-moment optimizer and evaluation
// metrics (MAE per target, standardized MAE, log MAE).

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dimekit/diff.hpp"
#include "dimekit/errors.hpp"
#include "dimekit/geometry.hpp"
#include "dimekit/model.hpp"

namespace dimekit {

enum class LossKind { l1, nll };

inline std::string to_string(LossKind k) { return k == LossKind::l1 ? "l1" : "nll"; }
inline LossKind loss_from_string(const std::string& s) {
  if (s == "l1") return LossKind::l1;
  if (s == "nll") return LossKind::nll;
  throw InputError("unknown loss kind '" + s + "' (expected l1 or nll)");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  int warmup_steps = 3000;
  double decay_rate = 0.01;
  int decay_steps = 200000;
  int batch_size = 32;
  int max_steps = 10000;
  /// Weight of the force term; the energy term gets 1 - force_weight (L1 loss).
  double force_weight = 0.999;
  LossKind loss = LossKind::l1;
  std::uint64_t seed = 0;
  int eval_interval = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double max_grad_norm = 10.0;

  void validate() const {
    if (!(learning_rate > 0) || warmup_steps < 0 || !(decay_rate > 0) || decay_steps < 1 || batch_size < 1 ||
        max_steps < 0 || force_weight < 0 || force_weight > 1 || eval_interval < 1 || max_grad_norm < 0)
      throw InputError("train config: rates, step counts and batch size must be positive; force_weight in [0, 1]");
  }

  /// Linear warmup, then exponential decay.
  double rate_at(int step) const {
    const double warm = warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / warmup_steps) : 1.0;
    return learning_rate * warm * std::pow(decay_rate, static_cast<double>(step) / decay_steps);
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"learning_rate", t.learning_rate}, {"warmup_steps", t.warmup_steps}, {"decay_rate", t.decay_rate},
       {"decay_steps", t.decay_steps},     {"batch_size", t.batch_size},     {"max_steps", t.max_steps},
       {"force_weight", t.force_weight},   {"loss", to_string(t.loss)},      {"seed", t.seed},
       {"eval_interval", t.eval_interval}, {"max_grad_norm", t.max_grad_norm}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.decay_rate = j.value("decay_rate", t.decay_rate);
  t.decay_steps = j.value("decay_steps", t.decay_steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.max_steps = j.value("max_steps", t.max_steps);
  t.force_weight = j.value("force_weight", t.force_weight);
  if (j.contains("loss")) t.loss = loss_from_string(j.at("loss").get<std::string>());
  t.seed = j.value("seed", t.seed);
  t.eval_interval = j.value("eval_interval", t.eval_interval);
  t.max_grad_norm = j.value("max_grad_norm", t.max_grad_norm);
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- loss ----

namespace detail {
inline void require_labels(const AtomicConfiguration& label, bool need_forces) {
  if (!label.energy) throw InputError("loss: configuration has no energy label");
  if (need_forces && !label.forces) throw InputError("loss: configuration has no force labels");
}
}  // namespace detail

/// Loss of one prediction against its labels.
///   l1:  (1 - w) |E - E^| + w mean|F - F^|
///   nll: ln s + (E - mu)^2 / (2 s^2) + w mean|F - mu_F|
inline double loss(const Prediction& pred, const AtomicConfiguration& label, const TrainConfig& cfg) {
  const bool use_forces = cfg.force_weight > 0;
  detail::require_labels(label, use_forces);
  double force_term = 0;
  if (use_forces) {
    if (!pred.forces) throw InputError("loss: prediction has no forces");
    for (std::size_t a = 0; a < label.size(); ++a) force_term += ((*pred.forces)[a] - (*label.forces)[a]).cwiseAbs().sum();
    force_term /= 3.0 * static_cast<double>(label.size());
  }
  const double de = pred.energy - *label.energy;
  if (cfg.loss == LossKind::l1) return (1.0 - cfg.force_weight) * std::abs(de) + cfg.force_weight * force_term;
  if (!pred.sigma_energy) throw InputError("loss: NLL needs a predicted sigma");
  const double s = *pred.sigma_energy;
  return std::log(s) + de * de / (2.0 * s * s) + cfg.force_weight * force_term;
}

/// Labels of a batch arranged for the differentiable loss.
struct BatchLabels {
  Matrix energy;                   // M x 1
  Matrix forces;                   // N x 3
  Matrix inverse_components;       // M x 1, 1 / (3 N_m)
};

inline BatchLabels batch_labels(std::span<const AtomicConfiguration* const> configs, bool with_forces) {
  BatchLabels l;
  const auto M = static_cast<Eigen::Index>(configs.size());
  l.energy.resize(M, 1);
  l.inverse_components.resize(M, 1);
  Eigen::Index atoms = 0;
  for (const auto* c : configs) atoms += static_cast<Eigen::Index>(c->size());
  l.forces = Matrix::Zero(atoms, 3);
  Eigen::Index row = 0;
  for (Eigen::Index m = 0; m < M; ++m) {
    const auto& c = *configs[m];
    detail::require_labels(c, with_forces);
    l.energy(m, 0) = *c.energy;
    l.inverse_components(m, 0) = 1.0 / (3.0 * static_cast<double>(c.size()));
    for (std::size_t a = 0; a < c.size(); ++a, ++row)
      if (with_forces) l.forces.row(row) = (*c.forces)[a].transpose();
  }
  return l;
}

/// Mean over the batch of the per-configuration loss, as a differentiable scalar.
inline Tensor batch_loss(const ModelOutput& out, const Tensor& forces, const BatchLabels& labels,
                         const diff::IndexList& molecule, const TrainConfig& cfg) {
  const auto M = labels.energy.rows();
  const Tensor de = out.energy - diff::constant(labels.energy);
  Tensor total;
  if (cfg.loss == LossKind::l1) {
    total = diff::scale(diff::sum_all(diff::abs(de)), (1.0 - cfg.force_weight) / M);
  } else {
    expects(out.sigma.defined(), "batch_loss: NLL needs the mean-variance head");
    const Tensor inv = diff::reciprocal(out.sigma);
    total = diff::scale(diff::sum_all(diff::log(out.sigma) + diff::scale(diff::mul(de * de, inv * inv), 0.5)),
                        1.0 / M);
  }
  if (cfg.force_weight > 0) {
    const Tensor per_atom = diff::sum_cols(diff::abs(forces - diff::constant(labels.forces)));
    const Tensor per_molecule = diff::segment_sum(per_atom, molecule, M);
    const Tensor mean = diff::mul(per_molecule, diff::constant(labels.inverse_components));
    total = total + diff::scale(diff::sum_all(mean), cfg.force_weight / M);
  }
  return total;
}

// ---- metrics ----

struct TargetMetric {
  std::string name;
  double mae = 0;
  double label_std = 0;
  std::size_t samples = 0;
};

struct Metrics {
  double mae_energy = 0;
  double mae_forces = std::numeric_limits<double>::quiet_NaN();
  /// mean over targets of 100 * MAE / std (percent); NaN if any target has zero spread.
  double std_mae = 0;
  /// mean over targets of ln(MAE), energies in eV and forces in eV/Angstrom.
  double log_mae = 0;
  std::vector<TargetMetric> targets;
  std::size_t configurations = 0;
};

namespace detail {
inline double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size()));
}
}  // namespace detail

/// Metrics of precomputed predictions. Forces enter when both sides carry them.
inline Metrics evaluate_predictions(std::span<const Prediction> preds, std::span<const AtomicConfiguration> labels,
                                    bool include_forces = true) {
  if (labels.empty()) throw InputError("evaluate: empty dataset");
  if (preds.size() != labels.size()) throw InputError("evaluate: prediction and label counts differ");
  Metrics m;
  m.configurations = labels.size();
  std::vector<double> energies, force_components;
  double e_err = 0, f_err = 0;
  bool forces = include_forces;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i].energy) throw InputError("evaluate: configuration without energy label");
    forces = forces && labels[i].forces && preds[i].forces;
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    energies.push_back(*labels[i].energy);
    e_err += std::abs(preds[i].energy - *labels[i].energy);
    if (!forces) continue;
    for (std::size_t a = 0; a < labels[i].size(); ++a)
      for (int k = 0; k < 3; ++k) {
        force_components.push_back((*labels[i].forces)[a][k]);
        f_err += std::abs((*preds[i].forces)[a][k] - (*labels[i].forces)[a][k]);
      }
  }
  m.mae_energy = e_err / static_cast<double>(labels.size());
  m.targets.push_back({"energy", m.mae_energy, detail::population_std(energies), energies.size()});
  if (forces && !force_components.empty()) {
    m.mae_forces = f_err / static_cast<double>(force_components.size());
    m.targets.push_back({"forces", m.mae_forces, detail::population_std(force_components), force_components.size()});
  }
  double std_sum = 0, log_sum = 0;
  for (const auto& t : m.targets) {
    std_sum += t.label_std > 0 ? 100.0 * t.mae / t.label_std : std::numeric_limits<double>::quiet_NaN();
    log_sum += std::log(t.mae);
  }
  m.std_mae = std_sum / static_cast<double>(m.targets.size());
  m.log_mae = log_sum / static_cast<double>(m.targets.size());
  return m;
}

/// Predictions for a dataset, evaluated in batches.
inline std::vector<Prediction> predict_dataset(const DimeNetPP& model, const ParameterStore& params,
                                               std::span<const AtomicConfiguration> data, bool with_forces,
                                               int batch_size = 32) {
  std::vector<Prediction> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<Graph> graphs;
    for (std::size_t i = start; i < end; ++i) graphs.push_back(make_graph(data[i], model.config().basis.cutoff));
    auto preds = model.predict(params, concatenate(std::span<const Graph>(graphs)), with_forces);
    out.insert(out.end(), preds.begin(), preds.end());
  }
  return out;
}

inline Metrics evaluate(const DimeNetPP& model, const ParameterStore& params, std::span<const AtomicConfiguration> data,
                        bool include_forces = true) {
  if (data.empty()) throw InputError("evaluate: empty dataset");
  bool forces = include_forces;
  for (const auto& c : data) forces = forces && c.forces.has_value();
  const auto preds = predict_dataset(model, params, data, forces);
  return evaluate_predictions(preds, data, forces);
}

// ---- optimizer ----

/// Adam with bias correction over every tensor of a ParameterStore.
class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterStore& params, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& e : params.entries()) {
      m_.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
      v_.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
    }
  }

  /// Returns the gradient norm before clipping.
  double step(ParameterStore& params, const std::vector<Matrix>& grads, double rate) {
    ++t_;
    double sq = 0;
    for (const auto& g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.max_grad_norm > 0 && norm > cfg_.max_grad_norm) ? cfg_.max_grad_norm / norm : 1.0;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const Matrix g = grads[i] * clip;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      entries[i].value.array() -=
          rate * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.epsilon);
    }
    return norm;
  }

 private:
  TrainConfig cfg_;
  std::vector<Matrix> m_, v_;
  int t_ = 0;
};

// ---- training ----

struct LogEntry {
  int step = 0;
  double learning_rate = 0;
  double train_loss = 0;
  double val_mae_energy = 0;
  double val_mae_forces = 0;
};

struct TrainResult {
  ParameterStore params;
  std::vector<LogEntry> log;
  int best_step = 0;
  double initial_loss = 0;
  double seconds = 0;
};

/// One differentiable training objective evaluation on a batch.
struct StepResult {
  double loss = 0;
  std::vector<Matrix> grads;
};

inline StepResult loss_and_gradients(const DimeNetPP& model, const ParameterStore& params, const Graph& graph,
                                     const BatchLabels& labels, const TrainConfig& cfg) {
  const BoundParameters bound(params, true);
  const bool use_forces = cfg.force_weight > 0;
  const Tensor pos = use_forces ? diff::variable(graph.positions) : diff::constant(graph.positions);
  const GraphFeatures f = model.featurize(graph, pos);
  const ModelOutput out = model.forward(bound, f);
  Tensor forces;
  if (use_forces) forces = -diff::grad(diff::sum_all(out.energy), {pos}, true)[0];
  const Tensor l = batch_loss(out, forces, labels, f.molecule, cfg);
  StepResult r;
  r.loss = l.item();
  for (auto& g : diff::grad(l, bound.tensors())) r.grads.push_back(g.value());
  return r;
}

using LogCallback = std::function<void(const LogEntry&)>;

/// Trains from `init` (or a fresh seeded initialization) and returns the
/// parameters with the best validation score.
inline TrainResult train(std::span<const AtomicConfiguration> train_set, std::span<const AtomicConfiguration> val_set,
                         const ModelConfig& model_cfg, const TrainConfig& cfg, const LogCallback& on_log = {},
                         const ParameterStore* init = nullptr) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw InputError("train: train and validation splits must be nonempty");
  if (cfg.loss == LossKind::nll && !model_cfg.mve_head) throw InputError("train: NLL loss needs mve_head");
  const auto start = std::chrono::steady_clock::now();
  const DimeNetPP model(model_cfg);
  const bool use_forces = cfg.force_weight > 0;
  for (const auto& c : train_set) detail::require_labels(c, use_forces);
  for (const auto& c : val_set) detail::require_labels(c, false);

  std::vector<Graph> graphs;
  graphs.reserve(train_set.size());
  for (const auto& c : train_set) graphs.push_back(make_graph(c, model_cfg.basis.cutoff));

  std::seed_seq seq{cfg.seed, std::uint64_t{0x5eed}};
  std::mt19937_64 shuffle_rng(seq);
  ParameterStore params = init ? *init : model.init_parameters(cfg.seed);
  AdamOptimizer opt(params, cfg);

  TrainResult result;
  result.params = params;
  bool val_forces = use_forces;
  for (const auto& c : val_set) val_forces = val_forces && c.forces.has_value();
  auto score = [&](const Metrics& m) { return val_forces ? m.mae_forces : m.mae_energy; };
  double best = std::numeric_limits<double>::infinity();

  auto validate_and_log = [&](int step, double train_loss) {
    const Metrics m = evaluate(model, params, val_set, val_forces);
    LogEntry e{step, cfg.rate_at(step), train_loss, m.mae_energy, val_forces ? m.mae_forces : 0.0};
    result.log.push_back(e);
    if (on_log) on_log(e);
    if (score(m) < best) {
      best = score(m);
      result.params = params;
      result.best_step = step;
    }
  };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size());
  double interval_loss = 0;
  int interval_count = 0;
  for (int step = 1; step <= cfg.max_steps; ++step) {
    std::vector<std::size_t> ids;
    while (ids.size() < bs) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
      }
      ids.push_back(order[cursor++]);
    }
    std::vector<const Graph*> parts;
    std::vector<const AtomicConfiguration*> members;
    for (auto i : ids) {
      parts.push_back(&graphs[i]);
      members.push_back(&train_set[i]);
    }
    const Graph batch = concatenate(std::span<const Graph* const>(parts));
    const BatchLabels labels = batch_labels(members, use_forces);
    StepResult r = loss_and_gradients(model, params, batch, labels, cfg);
    bool finite = std::isfinite(r.loss);
    for (const auto& g : r.grads) finite = finite && g.allFinite();
    if (!finite) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << ", batch ids:";
      for (auto i : ids) msg << ' ' << i;
      throw TrainingError(msg.str());
    }
    if (step == 1) result.initial_loss = r.loss;
    opt.step(params, r.grads, cfg.rate_at(step));
    interval_loss += r.loss;
    ++interval_count;
    if (step == 1 || step % cfg.eval_interval == 0 || step == cfg.max_steps) {
      validate_and_log(step, interval_loss / interval_count);
      interval_loss = 0;
      interval_count = 0;
    }
  }
  if (cfg.max_steps == 0) result.params = params;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace dimekit
