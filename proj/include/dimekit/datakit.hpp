#pragma once

// Dataset utilities: per-element reference energies, atomization-energy
// histograms, dataset manifests, and a toy collision generator built on a
// pairwise Morse + r^-12 potential with exact analytic forces.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <exception>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dimekit/errors.hpp"
#include "dimekit/extxyz.hpp"
#include "dimekit/geometry.hpp"

namespace dimekit {

// ---- reference energies ----

using ReferenceEnergies = std::map<int, double>;

/// Least-squares per-element offsets eps_Z minimizing sum_m (E_m - sum_Z n_mZ eps_Z)^2.
inline ReferenceEnergies fit_reference_energies(std::span<const AtomicConfiguration> data) {
  if (data.empty()) throw InputError("reference energies: empty dataset");
  std::vector<int> elements;
  for (const auto& c : data)
    for (int z : c.atomic_numbers)
      if (std::find(elements.begin(), elements.end(), z) == elements.end()) elements.push_back(z);
  std::sort(elements.begin(), elements.end());
  const auto M = static_cast<Eigen::Index>(data.size());
  const auto K = static_cast<Eigen::Index>(elements.size());
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(M, K);
  Eigen::VectorXd y(M);
  for (Eigen::Index m = 0; m < M; ++m) {
    const auto& c = data[static_cast<std::size_t>(m)];
    if (!c.energy) throw InputError("reference energies: configuration " + std::to_string(m) + " has no energy");
    y[m] = *c.energy;
    for (int z : c.atomic_numbers)
      A(m, std::lower_bound(elements.begin(), elements.end(), z) - elements.begin()) += 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  const double tol = std::max(A.rows(), A.cols()) * s[0] * 1e-12;
  Eigen::Index rank = 0;
  while (rank < s.size() && s[rank] > tol) ++rank;
  if (rank < K) {
    // elements with a component in the null space are not determined
    const Eigen::MatrixXd null = svd.matrixV().rightCols(K - rank);
    std::string names;
    for (Eigen::Index k = 0; k < K; ++k)
      if (null.row(k).norm() > 1e-8) names += (names.empty() ? "" : ", ") + element_symbol(elements[k]);
    throw InputError("reference energies: element counts are rank deficient; cannot resolve " + names);
  }
  const Eigen::VectorXd eps = svd.solve(y);
  ReferenceEnergies out;
  for (Eigen::Index k = 0; k < K; ++k) out[elements[k]] = eps[k];
  return out;
}

/// E - sum_Z n_Z eps_Z.
inline double atomization_energy(const AtomicConfiguration& c, const ReferenceEnergies& refs) {
  if (!c.energy) throw InputError("atomization energy: configuration has no energy");
  double e = *c.energy;
  for (int z : c.atomic_numbers) {
    auto it = refs.find(z);
    if (it == refs.end()) throw InputError("no reference energy for element " + element_symbol(z));
    e -= it->second;
  }
  return e;
}

inline double reference_sum(const AtomicConfiguration& c, const ReferenceEnergies& refs) {
  double s = 0;
  for (int z : c.atomic_numbers) {
    auto it = refs.find(z);
    if (it == refs.end()) throw InputError("no reference energy for element " + element_symbol(z));
    s += it->second;
  }
  return s;
}

/// Copies with energies shifted by the reference offsets (sign = -1 removes them).
inline std::vector<AtomicConfiguration> shift_energies(std::span<const AtomicConfiguration> data,
                                                       const ReferenceEnergies& refs, double sign = -1.0) {
  std::vector<AtomicConfiguration> out(data.begin(), data.end());
  for (auto& c : out) {
    if (!c.energy) continue;
    *c.energy += sign * reference_sum(c, refs);
  }
  return out;
}

// ---- statistics ----

struct HistogramBin {
  double lower = 0, upper = 0;
  std::size_t count = 0;
};

/// Equal-width bins spanning [min, max]; a single bin when all values agree
/// to 1e-9 (relative to max(1, |value|)).
inline std::vector<HistogramBin> histogram(std::span<const double> values, int num_bins) {
  expects(num_bins >= 1, "histogram: num_bins must be >= 1");
  if (values.empty()) return {};
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi - lo <= 1e-9 * std::max({1.0, std::abs(lo), std::abs(hi)})) return {HistogramBin{lo, hi, values.size()}};
  std::vector<HistogramBin> bins(static_cast<std::size_t>(num_bins));
  const double w = (hi - lo) / num_bins;
  for (int b = 0; b < num_bins; ++b) bins[b] = {lo + b * w, b + 1 == num_bins ? hi : lo + (b + 1) * w, 0};
  for (double v : values) {
    auto b = static_cast<int>((v - lo) / w);
    bins[static_cast<std::size_t>(std::clamp(b, 0, num_bins - 1))].count++;
  }
  return bins;
}

struct DatasetStats {
  std::vector<double> atomization_per_atom;  // per configuration, eV/atom
  std::vector<HistogramBin> bins;
  GraphStats graph;
};

inline DatasetStats dataset_stats(std::span<const AtomicConfiguration> data, const ReferenceEnergies& refs,
                                  int num_bins = 20, std::optional<double> cutoff = std::nullopt) {
  DatasetStats s;
  for (const auto& c : data) {
    s.atomization_per_atom.push_back(atomization_energy(c, refs) / static_cast<double>(c.size()));
    if (cutoff) s.graph += make_graph(c, *cutoff).stats();
  }
  s.bins = histogram(s.atomization_per_atom, num_bins);
  return s;
}

inline void write_histogram_csv(std::ostream& os, std::span<const HistogramBin> bins) {
  os << "bin_lower,bin_upper,count\n";
  for (const auto& b : bins) os << format_double(b.lower) << ',' << format_double(b.upper) << ',' << b.count << '\n';
}

// ---- manifest ----

struct DatasetManifest {
  std::string split;
  std::size_t records = 0;
  double cutoff = 5.0;
  std::vector<std::string> elements;
  ReferenceEnergies reference_energies;
};

inline nlohmann::json to_json_value(const DatasetManifest& m) {
  nlohmann::json refs = nlohmann::json::object();
  for (const auto& [z, e] : m.reference_energies) refs[element_symbol(z)] = e;
  return {{"split", m.split},
          {"records", m.records},
          {"cutoff", m.cutoff},
          {"elements", m.elements},
          {"reference_energies", refs}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.split = j.at("split").get<std::string>();
    m.records = j.at("records").get<std::size_t>();
    m.cutoff = j.at("cutoff").get<double>();
    m.elements = j.at("elements").get<std::vector<std::string>>();
    for (const auto& [sym, e] : j.at("reference_energies").items()) {
      const int z = atomic_number(sym);
      if (z == 0) throw InputError("manifest: unknown element " + sym);
      m.reference_energies[z] = e.get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("manifest: ") + e.what());
  }
  return m;
}

inline DatasetManifest make_manifest(std::string split, std::span<const AtomicConfiguration> data, double cutoff,
                                     ReferenceEnergies refs) {
  DatasetManifest m{std::move(split), data.size(), cutoff, {}, std::move(refs)};
  std::vector<int> zs;
  for (const auto& c : data)
    for (int z : c.atomic_numbers)
      if (std::find(zs.begin(), zs.end(), z) == zs.end()) zs.push_back(z);
  std::sort(zs.begin(), zs.end());
  for (int z : zs) {
    m.elements.push_back(element_symbol(z));
    if (!m.reference_energies.count(z))
      throw InputError("manifest: no reference energy for element " + element_symbol(z));
  }
  return m;
}

// ---- toy potential ----

struct MorseParams {
  double depth = 1.0;        // D_e, eV
  double width = 1.0;        // a, 1/Angstrom
  double equilibrium = 1.0;  // r_e, Angstrom
};

/// Atomic masses in amu for the toy elements.
inline double atomic_mass(int z) {
  switch (z) {
    case 1: return 1.008;
    case 6: return 12.011;
    case 7: return 14.007;
    case 8: return 15.999;
  }
  throw InputError("toy potential: no mass for element " + element_symbol(z));
}

/// sqrt(amu * Angstrom^2 / eV) in femtoseconds.
inline constexpr double kTimeUnitFs = 10.180505671156723;

struct ToyPotentialConfig {
  std::map<std::pair<int, int>, MorseParams> morse{
      {{1, 1}, {4.5, 1.9, 0.74}}, {{1, 6}, {4.3, 1.8, 1.09}}, {{1, 8}, {4.6, 2.2, 0.97}},
      {{6, 6}, {3.6, 2.0, 1.54}}, {{6, 8}, {3.7, 2.0, 1.43}}, {{8, 8}, {5.1, 2.6, 1.21}}};
  double repulsion = 1e-3;                   // C_12, eV Angstrom^12
  std::vector<int> elements{1, 6, 8};
  /// Energy of an isolated atom added to every label (eV); fitted back out by the reference energies.
  std::map<int, double> atom_energies{{1, -13.6}, {6, -1027.0}, {8, -2040.0}};
  double timestep_fs = 0.02;
  double kinetic_energy = 4.0;               // relative translational energy, eV
  double impact_parameter = 1.0;             // Angstrom
  double impact_jitter = 1.0;                // uniform extra offset in [0, jitter), Angstrom
  double separation = 8.0;                   // initial centre distance, Angstrom
  double vibration_energy = 0.3;             // random internal kinetic energy per cluster, eV
  int min_cluster = 2;
  int max_cluster = 3;
  double duration_fs = 150.0;
  int snapshots_per_trajectory = 10;
  /// Labels use Morse depths scaled by this factor; 1 labels with the driving potential.
  double relabel_depth_scale = 1.0;

  void validate() const {
    for (const auto& [pair, m] : morse)
      if (!(m.depth > 0) || !(m.width > 0) || !(m.equilibrium > 0))
        throw InputError("toy potential: Morse parameters must be positive");
    if (!(timestep_fs > 0)) throw InputError("toy potential: timestep must be positive");
    if (repulsion < 0 || kinetic_energy < 0 || impact_parameter < 0 || impact_jitter < 0 || vibration_energy < 0)
      throw InputError("toy potential: energies and impact parameter must be non-negative");
    if (min_cluster < 1 || max_cluster > 6 || min_cluster > max_cluster)
      throw InputError("toy potential: cluster sizes must satisfy 1 <= min <= max <= 6");
    if (!(separation > 0) || !(duration_fs > 0) || snapshots_per_trajectory < 1 || !(relabel_depth_scale > 0))
      throw InputError("toy potential: separation, duration, snapshot count and relabel scale must be positive");
    if (elements.empty()) throw InputError("toy potential: no elements");
    for (int a : elements) {
      atomic_mass(a);
      for (int b : elements)
        if (!morse.count({std::min(a, b), std::max(a, b)}))
          throw InputError("toy potential: no Morse parameters for " + element_symbol(a) + "-" + element_symbol(b));
    }
  }
};

inline void to_json(nlohmann::json& j, const ToyPotentialConfig& c) {
  nlohmann::json morse = nlohmann::json::array();
  for (const auto& [p, m] : c.morse)
    morse.push_back({{"pair", {element_symbol(p.first), element_symbol(p.second)}},
                     {"depth", m.depth},
                     {"width", m.width},
                     {"equilibrium", m.equilibrium}});
  nlohmann::json atoms = nlohmann::json::object();
  for (const auto& [z, e] : c.atom_energies) atoms[element_symbol(z)] = e;
  std::vector<std::string> elements;
  for (int z : c.elements) elements.push_back(element_symbol(z));
  j = {{"morse", morse},
       {"repulsion", c.repulsion},
       {"elements", elements},
       {"atom_energies", atoms},
       {"timestep_fs", c.timestep_fs},
       {"kinetic_energy", c.kinetic_energy},
       {"impact_parameter", c.impact_parameter},
       {"impact_jitter", c.impact_jitter},
       {"separation", c.separation},
       {"vibration_energy", c.vibration_energy},
       {"min_cluster", c.min_cluster},
       {"max_cluster", c.max_cluster},
       {"duration_fs", c.duration_fs},
       {"snapshots_per_trajectory", c.snapshots_per_trajectory},
       {"relabel_depth_scale", c.relabel_depth_scale}};
}

inline void from_json(const nlohmann::json& j, ToyPotentialConfig& c) {
  auto z_of = [](const std::string& s) {
    const int z = atomic_number(s);
    if (z == 0) throw InputError("toy potential: unknown element " + s);
    return z;
  };
  if (j.contains("morse")) {
    c.morse.clear();
    for (const auto& m : j.at("morse")) {
      const auto pair = m.at("pair").get<std::vector<std::string>>();
      if (pair.size() != 2) throw InputError("toy potential: Morse pair must name two elements");
      const int a = z_of(pair[0]), b = z_of(pair[1]);
      c.morse[{std::min(a, b), std::max(a, b)}] = {m.at("depth").get<double>(), m.at("width").get<double>(),
                                                  m.at("equilibrium").get<double>()};
    }
  }
  if (j.contains("elements")) {
    c.elements.clear();
    for (const auto& s : j.at("elements")) c.elements.push_back(z_of(s.get<std::string>()));
  }
  if (j.contains("atom_energies")) {
    c.atom_energies.clear();
    for (const auto& [s, e] : j.at("atom_energies").items()) c.atom_energies[z_of(s)] = e.get<double>();
  }
  c.repulsion = j.value("repulsion", c.repulsion);
  c.timestep_fs = j.value("timestep_fs", c.timestep_fs);
  c.kinetic_energy = j.value("kinetic_energy", c.kinetic_energy);
  c.impact_parameter = j.value("impact_parameter", c.impact_parameter);
  c.impact_jitter = j.value("impact_jitter", c.impact_jitter);
  c.separation = j.value("separation", c.separation);
  c.vibration_energy = j.value("vibration_energy", c.vibration_energy);
  c.min_cluster = j.value("min_cluster", c.min_cluster);
  c.max_cluster = j.value("max_cluster", c.max_cluster);
  c.duration_fs = j.value("duration_fs", c.duration_fs);
  c.snapshots_per_trajectory = j.value("snapshots_per_trajectory", c.snapshots_per_trajectory);
  c.relabel_depth_scale = j.value("relabel_depth_scale", c.relabel_depth_scale);
}

/// Pairwise Morse + C12 / r^12 potential:
///   V = sum_{i<j} D (e^{-2a(r-r_e)} - 2 e^{-a(r-r_e)}) + C12 / r^12
/// which tends to 0 at dissociation and has minimum -D near r_e.
class ToyPotential {
 public:
  explicit ToyPotential(ToyPotentialConfig cfg, double depth_scale = 1.0) : cfg_(std::move(cfg)), scale_(depth_scale) {
    cfg_.validate();
  }

  const ToyPotentialConfig& config() const { return cfg_; }

  /// Interaction energy (no isolated-atom offsets); fills forces = -grad V if requested.
  double energy(std::span<const int> z, std::span<const Vec3> x, std::vector<Vec3>* forces = nullptr) const {
    const std::size_t n = z.size();
    if (forces) forces->assign(n, Vec3::Zero());
    double e = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const Vec3 d = x[i] - x[j];
        const double r = d.norm();
        if (r == 0.0) throw DegenerateGeometryError("toy potential: coincident atoms");
        const MorseParams& m = params(z[i], z[j]);
        const double D = m.depth * scale_;
        const double ex = std::exp(-m.width * (r - m.equilibrium));
        const double r6 = r * r * r * r * r * r;
        const double rep = cfg_.repulsion / (r6 * r6);
        e += D * (ex * ex - 2.0 * ex) + rep;
        if (forces) {
          const double dvdr = D * (-2.0 * m.width * ex * ex + 2.0 * m.width * ex) - 12.0 * rep / r;
          const Vec3 f = -dvdr * d / r;  // force on i
          (*forces)[i] += f;
          (*forces)[j] -= f;
        }
      }
    return e;
  }

  /// Label energy including isolated-atom offsets.
  double total_energy(const AtomicConfiguration& c, std::vector<Vec3>* forces = nullptr) const {
    double e = energy(c.atomic_numbers, c.positions, forces);
    for (int zz : c.atomic_numbers) {
      auto it = cfg_.atom_energies.find(zz);
      if (it != cfg_.atom_energies.end()) e += it->second;
    }
    return e;
  }

  /// Attaches energy and force labels to a configuration.
  void label(AtomicConfiguration& c) const {
    std::vector<Vec3> f;
    c.energy = total_energy(c, &f);
    c.forces = std::move(f);
  }

 private:
  const MorseParams& params(int a, int b) const {
    auto it = cfg_.morse.find({std::min(a, b), std::max(a, b)});
    if (it == cfg_.morse.end())
      throw InputError("toy potential: no Morse parameters for " + element_symbol(a) + "-" + element_symbol(b));
    return it->second;
  }

  ToyPotentialConfig cfg_;
  double scale_;
};

/// BFGS with backtracking on the toy potential; returns the maximum residual force component.
inline double relax(const ToyPotential& pot, std::span<const int> z, std::vector<Vec3>& x, int max_iter = 2000,
                    double ftol = 1e-10) {
  const auto n = static_cast<Eigen::Index>(x.size());
  auto pack = [&](const std::vector<Vec3>& v) {
    Eigen::VectorXd p(3 * n);
    for (Eigen::Index a = 0; a < n; ++a) p.segment<3>(3 * a) = v[static_cast<std::size_t>(a)];
    return p;
  };
  auto unpack = [&](const Eigen::VectorXd& p) {
    std::vector<Vec3> v(static_cast<std::size_t>(n));
    for (Eigen::Index a = 0; a < n; ++a) v[static_cast<std::size_t>(a)] = p.segment<3>(3 * a);
    return v;
  };
  std::vector<Vec3> f;
  double e = pot.energy(z, x, &f);
  Eigen::VectorXd p = pack(x), g = -pack(f);
  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(3 * n, 3 * n) * 0.01;
  for (int it = 0; it < max_iter && g.cwiseAbs().maxCoeff() > ftol; ++it) {
    Eigen::VectorXd dir = -Hinv * g;
    if (dir.dot(g) >= 0) {
      Hinv = Eigen::MatrixXd::Identity(3 * n, 3 * n) * 0.01;
      dir = -Hinv * g;
    }
    const double max_step = dir.cwiseAbs().maxCoeff();
    if (max_step > 0.2) dir *= 0.2 / max_step;
    double t = 1.0, e_new = 0;
    Eigen::VectorXd p_new;
    std::vector<Vec3> f_new;
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      p_new = p + t * dir;
      try {
        e_new = pot.energy(z, unpack(p_new), &f_new);
      } catch (const DegenerateGeometryError&) {
        continue;
      }
      if (e_new <= e + 1e-4 * t * dir.dot(g)) break;
    }
    const Eigen::VectorXd g_new = -pack(f_new);
    const Eigen::VectorXd s = p_new - p, y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-14) {
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(3 * n, 3 * n);
      const Eigen::MatrixXd rho = (I - s * y.transpose() / sy);
      Hinv = rho * Hinv * rho.transpose() + s * s.transpose() / sy;
    }
    if (e_new > e && std::abs(e_new - e) > 1e-12) break;  // line search failed
    p = p_new;
    g = g_new;
    e = e_new;
  }
  x = unpack(p);
  return g.cwiseAbs().maxCoeff();
}

/// Velocity-Verlet state in internal units (Angstrom, eV, amu, 10.18 fs).
struct MdState {
  std::vector<int> z;
  std::vector<Vec3> x, v, f;
  std::vector<double> mass;
  double potential = 0;

  double kinetic() const {
    double k = 0;
    for (std::size_t a = 0; a < x.size(); ++a) k += 0.5 * mass[a] * v[a].squaredNorm();
    return k;
  }
  Vec3 momentum() const {
    Vec3 p = Vec3::Zero();
    for (std::size_t a = 0; a < x.size(); ++a) p += mass[a] * v[a];
    return p;
  }
};

inline void verlet_step(const ToyPotential& pot, MdState& s, double dt_fs) {
  const double dt = dt_fs / kTimeUnitFs;
  for (std::size_t a = 0; a < s.x.size(); ++a) {
    s.v[a] += 0.5 * dt * s.f[a] / s.mass[a];
    s.x[a] += dt * s.v[a];
  }
  s.potential = pot.energy(s.z, s.x, &s.f);
  for (std::size_t a = 0; a < s.x.size(); ++a) s.v[a] += 0.5 * dt * s.f[a] / s.mass[a];
}

struct Trajectory {
  std::vector<AtomicConfiguration> snapshots;
  double max_energy_drift = 0;   // eV, max |E_tot(t) - E_tot(0)|
  double max_momentum_drift = 0; // amu Angstrom / time unit
};

namespace detail {

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

/// Random cluster relaxed to a local minimum, centred on its centre of mass.
inline std::pair<std::vector<int>, std::vector<Vec3>> relaxed_cluster(const ToyPotential& pot, int size,
                                                                     std::mt19937_64& rng) {
  const auto& cfg = pot.config();
  std::uniform_int_distribution<std::size_t> pick(0, cfg.elements.size() - 1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (;;) {
    std::vector<int> z;
    std::vector<Vec3> x;
    for (int a = 0; a < size; ++a) z.push_back(cfg.elements[pick(rng)]);
    const double box = 0.9 * std::cbrt(static_cast<double>(size));
    while (static_cast<int>(x.size()) < size) {
      const Vec3 p(box * u(rng), box * u(rng), box * u(rng));
      bool ok = true;
      for (const auto& q : x) ok = ok && (p - q).norm() > 0.8;
      if (ok) x.push_back(p);
    }
    if (relax(pot, z, x) > 1e-9) continue;
    // keep only bound clusters (every atom within bonding range of another)
    bool bound = true;
    for (std::size_t a = 0; a < x.size() && size > 1; ++a) {
      double nearest = 1e9;
      for (std::size_t b = 0; b < x.size(); ++b)
        if (a != b) nearest = std::min(nearest, (x[a] - x[b]).norm());
      bound = bound && nearest < 2.5;
    }
    if (!bound) continue;
    Vec3 com = Vec3::Zero();
    double mtot = 0;
    for (std::size_t a = 0; a < x.size(); ++a) {
      com += atomic_mass(z[a]) * x[a];
      mtot += atomic_mass(z[a]);
    }
    com /= mtot;
    for (auto& p : x) p -= com;
    return {z, x};
  }
}

/// Random internal velocities with zero net momentum and the given kinetic energy.
inline std::vector<Vec3> internal_velocities(std::span<const int> z, double energy, std::mt19937_64& rng) {
  std::vector<Vec3> v(z.size(), Vec3::Zero());
  if (energy <= 0 || z.size() < 2) return v;
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 p = Vec3::Zero();
  double mtot = 0;
  for (std::size_t a = 0; a < z.size(); ++a) {
    const double m = atomic_mass(z[a]);
    v[a] = Vec3(n(rng), n(rng), n(rng)) / std::sqrt(m);
    p += m * v[a];
    mtot += m;
  }
  double k = 0;
  for (std::size_t a = 0; a < z.size(); ++a) {
    v[a] -= p / mtot;
    k += 0.5 * atomic_mass(z[a]) * v[a].squaredNorm();
  }
  if (k > 0)
    for (auto& vel : v) vel *= std::sqrt(energy / k);
  return v;
}

}  // namespace detail

/// Initial conditions of one collision: two relaxed clusters with random
/// orientations, internal vibration, and a head-on relative velocity carrying
/// `kinetic_energy` with zero total momentum.
inline MdState setup_collision(const ToyPotential& pot, std::mt19937_64& rng) {
  const auto& cfg = pot.config();
  std::uniform_int_distribution<int> size(cfg.min_cluster, cfg.max_cluster);
  auto [za, xa] = detail::relaxed_cluster(pot, size(rng), rng);
  auto [zb, xb] = detail::relaxed_cluster(pot, size(rng), rng);
  const Eigen::Matrix3d ra = detail::random_rotation(rng), rb = detail::random_rotation(rng);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  const double b = cfg.impact_parameter + cfg.impact_jitter * jitter(rng);

  double ma = 0, mb = 0;
  for (int z : za) ma += atomic_mass(z);
  for (int z : zb) mb += atomic_mass(z);
  const double reduced = ma * mb / (ma + mb);
  const double speed = std::sqrt(2.0 * cfg.kinetic_energy / reduced);
  const auto via = detail::internal_velocities(za, cfg.vibration_energy, rng);
  const auto vib = detail::internal_velocities(zb, cfg.vibration_energy, rng);

  MdState s;
  const double sa = mb / (ma + mb), sb = ma / (ma + mb);
  for (std::size_t a = 0; a < za.size(); ++a) {
    s.z.push_back(za[a]);
    s.x.push_back(ra * xa[a] + Vec3(-cfg.separation * sa, -b * sa, 0));
    s.v.push_back(ra * via[a] + Vec3(speed * sa, 0, 0));
  }
  for (std::size_t a = 0; a < zb.size(); ++a) {
    s.z.push_back(zb[a]);
    s.x.push_back(rb * xb[a] + Vec3(cfg.separation * sb, b * sb, 0));
    s.v.push_back(rb * vib[a] + Vec3(-speed * sb, 0, 0));
  }
  for (int z : s.z) s.mass.push_back(atomic_mass(z));
  s.potential = pot.energy(s.z, s.x, &s.f);
  return s;
}

/// Integrates `steps` steps, calling `on_step(step, state)` after each.
/// Returns false if any atom leaves the 100 Angstrom sphere.
inline bool integrate(const ToyPotential& pot, MdState& s, int steps, Trajectory& t,
                      const std::function<void(int, const MdState&)>& on_step = {}) {
  const double dt = pot.config().timestep_fs;
  const double e0 = s.potential + s.kinetic();
  const Vec3 p0 = s.momentum();
  for (int step = 1; step <= steps; ++step) {
    verlet_step(pot, s, dt);
    for (const auto& x : s.x)
      if (!x.allFinite() || x.norm() > 100.0) return false;
    t.max_energy_drift = std::max(t.max_energy_drift, std::abs(s.potential + s.kinetic() - e0));
    t.max_momentum_drift = std::max(t.max_momentum_drift, (s.momentum() - p0).cwiseAbs().maxCoeff());
    if (on_step) on_step(step, s);
  }
  return true;
}

/// One collision with snapshots at uniformly random steps, labelled by
/// `labeller`. Returns nullopt if the trajectory leaves the 100 Angstrom sphere.
inline std::optional<Trajectory> run_collision(const ToyPotential& pot, const ToyPotential& labeller,
                                               std::mt19937_64& rng, int snapshots) {
  const auto& cfg = pot.config();
  MdState s = setup_collision(pot, rng);
  const int steps = std::max(1, static_cast<int>(std::lround(cfg.duration_fs / cfg.timestep_fs)));
  std::uniform_int_distribution<int> when(1, steps);
  std::vector<int> record;
  for (int k = 0; k < snapshots; ++k) record.push_back(when(rng));
  std::sort(record.begin(), record.end());
  const int last = record.empty() ? 0 : record.back();

  Trajectory t;
  std::size_t next = 0;
  const bool ok = integrate(pot, s, last, t, [&](int step, const MdState& st) {
    for (; next < record.size() && record[next] == step; ++next) {
      AtomicConfiguration c;
      c.atomic_numbers = st.z;
      c.positions = st.x;
      labeller.label(c);
      t.snapshots.push_back(std::move(c));
    }
  });
  if (!ok) return std::nullopt;
  return t;
}

struct GenerationReport {
  std::size_t trajectories = 0;
  std::size_t discarded = 0;
  double max_energy_drift = 0;
  double max_momentum_drift = 0;
};

/// n_snapshots labelled configurations from independent collisions; trajectory
/// k draws from a generator seeded by (seed, k, attempt), so the output does not
/// depend on `threads`.
inline std::vector<AtomicConfiguration> generate_collisions(const ToyPotentialConfig& cfg, std::size_t n_snapshots,
                                                            std::uint64_t seed, GenerationReport* report = nullptr,
                                                            int threads = 1) {
  const ToyPotential pot(cfg);
  const ToyPotential labeller(cfg, cfg.relabel_depth_scale);
  const auto per = static_cast<std::size_t>(cfg.snapshots_per_trajectory);
  const std::size_t n_traj = (n_snapshots + per - 1) / per;
  std::vector<Trajectory> trajs(n_traj);
  std::vector<std::size_t> discarded(n_traj, 0);
  std::vector<std::exception_ptr> errors(n_traj);
  auto work = [&](std::size_t k) {
    try {
      const int want = static_cast<int>(std::min(per, n_snapshots - k * per));
      for (std::uint64_t attempt = 0;; ++attempt) {
        std::seed_seq seq{seed, static_cast<std::uint64_t>(k), attempt};
        std::mt19937_64 rng(seq);
        if (auto t = run_collision(pot, labeller, rng, want)) {
          trajs[k] = std::move(*t);
          return;
        }
        ++discarded[k];
        if (attempt > 100) throw std::runtime_error("collision generator: trajectories keep blowing up");
      }
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  const int workers = std::max(1, threads);
  if (workers == 1) {
    for (std::size_t k = 0; k < n_traj; ++k) work(k);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t k = static_cast<std::size_t>(w); k < n_traj; k += static_cast<std::size_t>(workers)) work(k);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<AtomicConfiguration> out;
  GenerationReport r;
  r.trajectories = n_traj;
  for (std::size_t k = 0; k < n_traj; ++k) {
    r.discarded += discarded[k];
    r.max_energy_drift = std::max(r.max_energy_drift, trajs[k].max_energy_drift);
    r.max_momentum_drift = std::max(r.max_momentum_drift, trajs[k].max_momentum_drift);
    for (auto& c : trajs[k].snapshots) out.push_back(std::move(c));
  }
  if (report) *report = r;
  return out;
}

/// Maximum total-energy deviation over `steps` velocity-Verlet steps from
/// generator initial conditions; nullopt if the trajectory escapes.
inline std::optional<double> integrator_drift(const ToyPotentialConfig& cfg, std::uint64_t seed, int steps) {
  const ToyPotential pot(cfg);
  std::seed_seq seq{seed};
  std::mt19937_64 rng(seq);
  MdState s = setup_collision(pot, rng);
  Trajectory t;
  if (!integrate(pot, s, steps, t)) return std::nullopt;
  return t.max_energy_drift;
}

}  // namespace dimekit
