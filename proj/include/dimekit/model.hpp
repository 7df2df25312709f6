#pragma once

// DimeNet++: embedding block, stacked directional interaction blocks with
// Hadamard-product triplet interactions and an embedding-size hierarchy,
// per-depth output blocks, energy and force readout, optional mean-variance
// head. The bilinear interaction of the original DimeNet is kept as a
// benchmark variant.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dimekit/basis.hpp"
#include "dimekit/diff.hpp"
#include "dimekit/errors.hpp"
#include "dimekit/geometry.hpp"

namespace dimekit {

using diff::Matrix;
using diff::Tensor;

enum class InteractionKind { hadamard, bilinear };

inline std::string to_string(InteractionKind k) { return k == InteractionKind::hadamard ? "hadamard" : "bilinear"; }

inline InteractionKind interaction_from_string(const std::string& s) {
  if (s == "hadamard") return InteractionKind::hadamard;
  if (s == "bilinear") return InteractionKind::bilinear;
  throw InputError("unknown interaction kind '" + s + "' (expected hadamard or bilinear)");
}

struct ModelConfig {
  int hidden_dim = 128;
  int out_emb_dim = 256;
  int triplet_dim = 64;
  int num_blocks = 4;
  BasisConfig basis;
  /// Largest supported atomic number; embeddings exist for Z = 1..num_elements.
  int num_elements = 10;
  bool mve_head = false;
  InteractionKind interaction = InteractionKind::hadamard;
  int num_bilinear = 8;
  int num_output_layers = 3;
  int num_residual = 2;

  void validate() const {
    basis.validate();
    if (hidden_dim < 1 || out_emb_dim < 1 || triplet_dim < 1 || num_blocks < 1 || num_elements < 1 ||
        num_bilinear < 1 || num_output_layers < 0 || num_residual < 0)
      throw InputError("model config: dimensions and block counts must be >= 1");
    if (triplet_dim > hidden_dim) throw InputError("model config: triplet_dim must not exceed hidden_dim");
  }
  int heads() const { return mve_head ? 2 : 1; }
};

inline void to_json(nlohmann::json& j, const BasisConfig& b) {
  j = {{"num_radial", b.num_radial},
       {"num_spherical", b.num_spherical},
       {"cutoff", b.cutoff},
       {"envelope_exponent", b.envelope_exponent}};
}

inline void from_json(const nlohmann::json& j, BasisConfig& b) {
  b.num_radial = j.value("num_radial", b.num_radial);
  b.num_spherical = j.value("num_spherical", b.num_spherical);
  b.cutoff = j.value("cutoff", b.cutoff);
  b.envelope_exponent = j.value("envelope_exponent", b.envelope_exponent);
}

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = {{"hidden_dim", m.hidden_dim},       {"out_emb_dim", m.out_emb_dim},
       {"triplet_dim", m.triplet_dim},     {"num_blocks", m.num_blocks},
       {"basis", m.basis},                 {"num_elements", m.num_elements},
       {"mve_head", m.mve_head},           {"interaction", to_string(m.interaction)},
       {"num_bilinear", m.num_bilinear},   {"num_output_layers", m.num_output_layers},
       {"num_residual", m.num_residual}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  m.hidden_dim = j.value("hidden_dim", m.hidden_dim);
  m.out_emb_dim = j.value("out_emb_dim", m.out_emb_dim);
  m.triplet_dim = j.value("triplet_dim", m.triplet_dim);
  m.num_blocks = j.value("num_blocks", m.num_blocks);
  if (j.contains("basis")) m.basis = j.at("basis").get<BasisConfig>();
  m.num_elements = j.value("num_elements", m.num_elements);
  m.mve_head = j.value("mve_head", m.mve_head);
  if (j.contains("interaction")) m.interaction = interaction_from_string(j.at("interaction").get<std::string>());
  m.num_bilinear = j.value("num_bilinear", m.num_bilinear);
  m.num_output_layers = j.value("num_output_layers", m.num_output_layers);
  m.num_residual = j.value("num_residual", m.num_residual);
}

/// Named learnable tensors in insertion order.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Matrix value;
  };

  void add(std::string name, Matrix value) {
    if (index_.count(name)) throw ContractViolation("parameter store: duplicate name " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Matrix& get(const std::string& name) const { return entries_.at(lookup(name)).value; }
  Matrix& get(const std::string& name) { return entries_.at(lookup(name)).value; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }
  bool all_finite() const {
    for (const auto& e : entries_)
      if (!e.value.allFinite()) return false;
    return true;
  }
  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.value.rows() != y.value.rows() || x.value.cols() != y.value.cols() ||
          x.value != y.value)
        return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("parameter store: no parameter named " + name);
    return it->second;
  }
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// ParameterStore values lifted onto the differentiation record.
class BoundParameters {
 public:
  BoundParameters(const ParameterStore& store, bool requires_grad) {
    for (const auto& e : store.entries()) {
      index_.emplace(e.name, tensors_.size());
      tensors_.push_back(requires_grad ? diff::variable(e.value) : diff::constant(e.value));
    }
  }
  const Tensor& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("bound parameters: no parameter named " + name);
    return tensors_[it->second];
  }
  const std::vector<Tensor>& tensors() const { return tensors_; }

 private:
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Prediction for one configuration.
struct Prediction {
  double energy = 0.0;
  std::optional<std::vector<Vec3>> forces;
  std::optional<double> sigma_energy;
  std::optional<std::vector<Vec3>> sigma_forces;
};

/// Index lists and basis features shared by all blocks of one forward pass.
struct GraphFeatures {
  int num_atoms = 0;
  int num_edges = 0;
  int num_triplets = 0;
  diff::IndexList atomic_numbers, source, target, kj, ji, molecule;
  int num_molecules = 0;
  Tensor distance;  // E x 1
  Tensor rbf;       // E x num_radial
  Tensor sbf;       // T x (num_spherical * num_radial), undefined when T == 0
};

struct ModelOutput {
  Tensor atom_contributions;  // N x heads, summed over all output blocks
  Tensor energy;              // M x 1
  Tensor sigma;               // M x 1, only with the MVE head
};

/// Per-triplet multiply-accumulate counts of the interaction step.
struct InteractionFlops {
  double hadamard_product = 0;      // elementwise product q_kj * sbf_emb
  double bilinear_contraction = 0;  // sbf^T W x
  double hadamard_stage = 0;        // sbf MLP + product
  double bilinear_stage = 0;        // sbf projection + contraction
};

inline InteractionFlops interaction_flops(const ModelConfig& cfg) {
  const double S = cfg.basis.spherical_size();
  const double H = cfg.hidden_dim, T = cfg.triplet_dim, B = cfg.num_bilinear;
  InteractionFlops f;
  f.hadamard_product = T;
  f.bilinear_contraction = B * H * H;
  f.hadamard_stage = S * T + T * T + T;
  f.bilinear_stage = S * B + B * H * H;
  return f;
}

/// Triplet step of the Hadamard block: q_kj gathered per triplet times the
/// embedded spherical basis.
inline Tensor triplet_interaction_hadamard(const Tensor& gathered, const Tensor& sbf_embedding) {
  return diff::mul(gathered, sbf_embedding);
}

/// Triplet step of the bilinear block: out[t, o] = sum_{b,h} s[t, b] x[t, h] W[b*H + h, o].
inline Tensor triplet_interaction_bilinear(const Tensor& gathered, const Tensor& sbf_projection, const Tensor& weight) {
  const Eigen::Index H = gathered.cols();
  const Eigen::Index B = sbf_projection.cols();
  expects(weight.rows() == B * H, "bilinear: weight must have num_bilinear * hidden rows");
  Tensor out;
  for (Eigen::Index b = 0; b < B; ++b) {
    Tensor term = diff::mul_col(diff::matmul(gathered, diff::slice_rows(weight, b * H, H)),
                                diff::slice_cols(sbf_projection, b, 1));
    out = out.defined() ? out + term : term;
  }
  return out;
}

class DimeNetPP {
 public:
  explicit DimeNetPP(ModelConfig cfg) : cfg_(std::move(cfg)), tables_((cfg_.validate(), cfg_.basis)) {}

  const ModelConfig& config() const { return cfg_; }
  const BasisTables& tables() const { return tables_; }

  /// Orthogonal-scaled dense weights, zero biases, zero final output layers.
  ParameterStore init_parameters(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ParameterStore p;
    const int H = cfg_.hidden_dim, O = cfg_.out_emb_dim, T = cfg_.triplet_dim;
    const int R = cfg_.basis.num_radial, S = cfg_.basis.spherical_size();
    std::uniform_real_distribution<double> emb(-std::sqrt(3.0), std::sqrt(3.0));
    Matrix atom(cfg_.num_elements + 1, H);
    for (Eigen::Index i = 0; i < atom.size(); ++i) atom.data()[i] = emb(rng);
    p.add("emb.atom", std::move(atom));
    p.add("emb.rbf.W", dense_init(R, H, rng));
    p.add("emb.W", dense_init(3 * H, H, rng));
    p.add("emb.b", Matrix::Zero(1, H));
    for (int b = 0; b < cfg_.num_blocks; ++b) {
      const std::string pre = "int" + std::to_string(b) + ".";
      p.add(pre + "ji.W", dense_init(H, H, rng));
      p.add(pre + "ji.b", Matrix::Zero(1, H));
      p.add(pre + "kj.W", dense_init(H, H, rng));
      p.add(pre + "kj.b", Matrix::Zero(1, H));
      if (cfg_.interaction == InteractionKind::hadamard) {
        p.add(pre + "rbf1.W", dense_init(R, H, rng));
        p.add(pre + "rbf2.W", dense_init(H, H, rng));
        p.add(pre + "down.W", dense_init(H, T, rng));
        p.add(pre + "sbf1.W", dense_init(S, T, rng));
        p.add(pre + "sbf2.W", dense_init(T, T, rng));
        p.add(pre + "up.W", dense_init(T, H, rng));
      } else {
        p.add(pre + "rbf.W", dense_init(R, H, rng));
        p.add(pre + "sbf.W", dense_init(S, cfg_.num_bilinear, rng));
        std::normal_distribution<double> normal(0.0, 2.0 / H);
        Matrix w(cfg_.num_bilinear * H, H);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);
        p.add(pre + "bilinear.W", std::move(w));
      }
      p.add(pre + "upd.W", dense_init(H, H, rng));
      p.add(pre + "upd.b", Matrix::Zero(1, H));
      for (int r = 0; r < cfg_.num_residual; ++r) {
        const std::string res = pre + "res" + std::to_string(r) + ".";
        p.add(res + "W1", dense_init(H, H, rng));
        p.add(res + "b1", Matrix::Zero(1, H));
        p.add(res + "W2", dense_init(H, H, rng));
        p.add(res + "b2", Matrix::Zero(1, H));
      }
    }
    for (int o = 0; o <= cfg_.num_blocks; ++o) {
      const std::string pre = "out" + std::to_string(o) + ".";
      p.add(pre + "rbf.W", dense_init(R, H, rng));
      p.add(pre + "up.W", dense_init(H, O, rng));
      for (int l = 0; l < cfg_.num_output_layers; ++l) p.add(pre + "layer" + std::to_string(l) + ".W", dense_init(O, O, rng));
      p.add(pre + "final.W", Matrix::Zero(O, cfg_.heads()));
    }
    return p;
  }

  /// Distances, angles and basis features as functions of `positions`.
  GraphFeatures featurize(const Graph& graph, const Tensor& positions) const {
    GraphFeatures f;
    f.num_atoms = graph.num_atoms();
    f.num_edges = graph.num_edges();
    f.num_triplets = graph.num_triplets();
    f.num_molecules = graph.num_molecules;
    for (int z : graph.atomic_numbers)
      if (z < 1 || z > cfg_.num_elements)
        throw InputError("element Z=" + std::to_string(z) + " outside the supported table (1.." +
                         std::to_string(cfg_.num_elements) + ")");
    f.atomic_numbers = diff::make_index(graph.atomic_numbers);
    f.source = diff::make_index(graph.source);
    f.target = diff::make_index(graph.target);
    f.kj = diff::make_index(graph.triplet_kj);
    f.ji = diff::make_index(graph.triplet_ji);
    f.molecule = diff::make_index(graph.molecule);
    if (f.num_edges == 0) return f;

    const Tensor vec = diff::gather_rows(positions, f.target) - diff::gather_rows(positions, f.source);
    f.distance = diff::sqrt(diff::sum_cols(vec * vec));
    for (Eigen::Index e = 0; e < f.distance.rows(); ++e)
      if (!(f.distance.value()(e, 0) > 0.0)) throw DegenerateGeometryError("coincident atoms in configuration");
    f.rbf = basis_ops::radial_basis(f.distance, cfg_.basis);
    if (f.num_triplets > 0) {
      const Tensor v_ji = diff::gather_rows(vec, f.ji);
      const Tensor v_kj = diff::gather_rows(vec, f.kj);
      const Tensor d_ji = diff::gather_rows(f.distance, f.ji);
      const Tensor d_kj = diff::gather_rows(f.distance, f.kj);
      // (x_i - x_j) . (x_k - x_j) with v_kj = x_j - x_k
      const Tensor cos_alpha = -diff::mul(diff::sum_cols(v_ji * v_kj), diff::reciprocal(d_ji * d_kj));
      f.sbf = basis_ops::spherical_basis(d_kj, cos_alpha, tables_);
    }
    return f;
  }

  Tensor embedding_block(const BoundParameters& p, const GraphFeatures& f) const {
    const Tensor hz = diff::gather_rows(p["emb.atom"], f.atomic_numbers);
    const Tensor rbf = diff::matmul(f.rbf, p["emb.rbf.W"]);
    const Tensor x = diff::concat_cols({diff::gather_rows(hz, f.source), diff::gather_rows(hz, f.target), rbf});
    return dense(x, p["emb.W"], p["emb.b"]);
  }

  /// m' = f_update(m, W_up * sum_k (W_down (m_kj * MLP_rbf)) * MLP_sbf).
  Tensor interaction_block(const BoundParameters& p, int block, const Tensor& m, const GraphFeatures& f) const {
    return cfg_.interaction == InteractionKind::hadamard ? interaction_hadamard(p, block, m, f)
                                                         : interaction_bilinear(p, block, m, f);
  }

  Tensor interaction_hadamard(const BoundParameters& p, int block, const Tensor& m, const GraphFeatures& f) const {
    const std::string pre = "int" + std::to_string(block) + ".";
    const Tensor x_kj = dense(m, p[pre + "kj.W"], p[pre + "kj.b"]);
    const Tensor rbf = diff::matmul(diff::silu(diff::matmul(f.rbf, p[pre + "rbf1.W"])), p[pre + "rbf2.W"]);
    const Tensor down = diff::silu(diff::matmul(x_kj * rbf, p[pre + "down.W"]));
    Tensor aggregate;
    if (f.num_triplets > 0) {
      const Tensor sbf = diff::matmul(diff::silu(diff::matmul(f.sbf, p[pre + "sbf1.W"])), p[pre + "sbf2.W"]);
      const Tensor t = triplet_interaction_hadamard(diff::gather_rows(down, f.kj), sbf);
      aggregate = diff::segment_sum(t, f.ji, f.num_edges);
    } else {
      aggregate = diff::zeros(f.num_edges, cfg_.triplet_dim);
    }
    const Tensor up = diff::silu(diff::matmul(aggregate, p[pre + "up.W"]));
    return update(p, block, m, up);
  }

  Tensor interaction_bilinear(const BoundParameters& p, int block, const Tensor& m, const GraphFeatures& f) const {
    const std::string pre = "int" + std::to_string(block) + ".";
    const Tensor x_kj = dense(m, p[pre + "kj.W"], p[pre + "kj.b"]);
    const Tensor gated = x_kj * diff::matmul(f.rbf, p[pre + "rbf.W"]);
    Tensor aggregate;
    if (f.num_triplets > 0) {
      const Tensor sbf = diff::matmul(f.sbf, p[pre + "sbf.W"]);
      const Tensor t = triplet_interaction_bilinear(diff::gather_rows(gated, f.kj), sbf, p[pre + "bilinear.W"]);
      aggregate = diff::segment_sum(t, f.ji, f.num_edges);
    } else {
      aggregate = diff::zeros(f.num_edges, cfg_.hidden_dim);
    }
    return update(p, block, m, aggregate);
  }

  /// f_update(m, a): skip-connected dense layer on (x_ji(m) + a) followed by
  /// residual layers.
  Tensor update(const BoundParameters& p, int block, const Tensor& m, const Tensor& aggregate) const {
    const std::string pre = "int" + std::to_string(block) + ".";
    const Tensor x_ji = dense(m, p[pre + "ji.W"], p[pre + "ji.b"]);
    Tensor h = dense(x_ji + aggregate, p[pre + "upd.W"], p[pre + "upd.b"]) + m;
    for (int r = 0; r < cfg_.num_residual; ++r) {
      const std::string res = pre + "res" + std::to_string(r) + ".";
      h = h + dense(dense(h, p[res + "W1"], p[res + "b1"]), p[res + "W2"], p[res + "b2"]);
    }
    return h;
  }

  /// Per-atom contributions (N x heads) of output block `index`.
  Tensor output_block(const BoundParameters& p, int index, const Tensor& m, const GraphFeatures& f) const {
    const std::string pre = "out" + std::to_string(index) + ".";
    const Tensor gated = diff::matmul(f.rbf, p[pre + "rbf.W"]) * m;
    Tensor h = diff::matmul(diff::segment_sum(gated, f.target, f.num_atoms), p[pre + "up.W"]);
    for (int l = 0; l < cfg_.num_output_layers; ++l)
      h = diff::silu(diff::matmul(h, p[pre + "layer" + std::to_string(l) + ".W"]));
    return diff::matmul(h, p[pre + "final.W"]);
  }

  ModelOutput forward(const BoundParameters& p, const Graph& graph, const Tensor& positions) const {
    const GraphFeatures f = featurize(graph, positions);
    return forward(p, f);
  }

  ModelOutput forward(const BoundParameters& p, const GraphFeatures& f) const {
    ModelOutput out;
    if (f.num_edges == 0) {
      out.atom_contributions = diff::zeros(f.num_atoms, cfg_.heads());
    } else {
      Tensor m = embedding_block(p, f);
      Tensor total = output_block(p, 0, m, f);
      for (int b = 0; b < cfg_.num_blocks; ++b) {
        m = interaction_block(p, b, m, f);
        total = total + output_block(p, b + 1, m, f);
      }
      out.atom_contributions = total;
    }
    const Tensor per_molecule = diff::segment_sum(out.atom_contributions, f.molecule, f.num_molecules);
    if (cfg_.mve_head) {
      out.energy = diff::slice_cols(per_molecule, 0, 1);
      out.sigma = diff::add_scalar(diff::softplus(diff::slice_cols(per_molecule, 1, 1)), kSigmaFloor);
    } else {
      out.energy = per_molecule;
    }
    return out;
  }

  /// Energies (and forces = -dE/dx) for every member of a batched graph.
  std::vector<Prediction> predict(const ParameterStore& params, const Graph& graph, bool with_forces) const {
    const BoundParameters p(params, false);
    const Tensor pos = with_forces ? diff::variable(graph.positions) : diff::constant(graph.positions);
    const ModelOutput out = forward(p, graph, pos);
    std::vector<Prediction> preds(static_cast<std::size_t>(graph.num_molecules));
    for (int m = 0; m < graph.num_molecules; ++m) {
      preds[m].energy = out.energy.value()(m, 0);
      if (out.sigma.defined()) preds[m].sigma_energy = out.sigma.value()(m, 0);
    }
    if (with_forces) {
      const Matrix grad = diff::grad(diff::sum_all(out.energy), {pos})[0].value();
      for (auto& pr : preds) pr.forces.emplace();
      for (int a = 0; a < graph.num_atoms(); ++a)
        preds[graph.molecule[a]].forces->push_back(-grad.row(a).transpose());
    }
    return preds;
  }

  Prediction predict(const ParameterStore& params, const AtomicConfiguration& config, bool with_forces = true) const {
    return predict(params, make_graph(config, cfg_.basis.cutoff), with_forces)[0];
  }

  double energy(const ParameterStore& params, const AtomicConfiguration& config) const {
    return predict(params, config, false).energy;
  }

  /// Mean and sigma of the energy plus forces from the mean. No force sigma
  /// exists for this head.
  Prediction mve_forward(const ParameterStore& params, const AtomicConfiguration& config) const {
    expects(cfg_.mve_head, "mve_forward: model has no mean-variance head");
    return predict(params, config, true);
  }

  static constexpr double kSigmaFloor = 1e-6;

 private:
  static Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    return diff::silu(diff::add_row(diff::matmul(x, w), b));
  }

  static Matrix dense_init(int fan_in, int fan_out, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const int big = std::max(fan_in, fan_out), small = std::min(fan_in, fan_out);
    Matrix g(big, small);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(big, small);
    Matrix w = fan_in >= fan_out ? q : Matrix(q.transpose());
    const double mean = w.mean();
    const double var = (w.array() - mean).square().mean();
    if (var > 0) w *= std::sqrt(2.0 / ((fan_in + fan_out) * var));
    return w;
  }

  ModelConfig cfg_;
  BasisTables tables_;
};

}  // namespace dimekit
