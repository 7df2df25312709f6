#pragma once

// Directed interaction graph (edges j->i) and triplet index structure
// (k->j->i) built from raw Cartesian coordinates.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "dimekit/errors.hpp"

namespace dimekit {

using Vec3 = Eigen::Vector3d;

/// Atomic numbers plus positions (Angstrom) with optional energy (eV) and
/// force (eV/Angstrom) labels.
struct AtomicConfiguration {
  std::vector<int> atomic_numbers;
  std::vector<Vec3> positions;
  std::optional<double> energy;
  std::optional<std::vector<Vec3>> forces;

  std::size_t size() const noexcept { return atomic_numbers.size(); }

  void validate() const {
    if (atomic_numbers.empty()) throw InputError("configuration has no atoms");
    if (positions.size() != atomic_numbers.size())
      throw InputError("configuration: " + std::to_string(positions.size()) + " positions for " +
                       std::to_string(atomic_numbers.size()) + " atoms");
    for (int z : atomic_numbers)
      if (z < 1) throw InputError("configuration: atomic number " + std::to_string(z) + " is not positive");
    for (const auto& p : positions)
      if (!p.allFinite()) throw InputError("configuration: non-finite coordinate");
    if (forces && forces->size() != atomic_numbers.size())
      throw InputError("configuration: force count does not match atom count");
  }
};

/// Directed edges j -> i, ordered lexicographically by (source, target).
struct EdgeSet {
  std::size_t num_atoms = 0;
  std::vector<int> source;  // j
  std::vector<int> target;  // i
  std::vector<double> distance;
  std::vector<Vec3> direction;  // (x_i - x_j) / d_ji

  std::size_t size() const noexcept { return source.size(); }
};

/// Triplets (k->j, j->i) as pairs of edge indices, ordered by ji then kj.
struct TripletSet {
  std::vector<int> kj;
  std::vector<int> ji;
  std::vector<double> angle;  // radians, filled by compute_angles

  std::size_t size() const noexcept { return kj.size(); }
};

namespace detail {
inline void push_edge(EdgeSet& edges, const AtomicConfiguration& config, int j, int i, double cutoff) {
  const Vec3 v = config.positions[i] - config.positions[j];
  const double d = v.norm();
  if (d == 0.0)
    throw DegenerateGeometryError("atoms " + std::to_string(j) + " and " + std::to_string(i) +
                                  " occupy the same position");
  if (d <= cutoff) {
    edges.source.push_back(j);
    edges.target.push_back(i);
    edges.distance.push_back(d);
    edges.direction.push_back(v / d);
  }
}
}  // namespace detail

/// All ordered pairs within `cutoff`, by brute force over every pair.
inline EdgeSet build_edges(const AtomicConfiguration& config, double cutoff) {
  expects(cutoff > 0.0, "build_edges: cutoff must be positive");
  config.validate();
  EdgeSet edges;
  const int n = static_cast<int>(config.size());
  edges.num_atoms = config.size();
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i)
      if (i != j) detail::push_edge(edges, config, j, i, cutoff);
  return edges;
}

/// Same edge set as build_edges, found through a uniform cell grid.
inline EdgeSet build_edges_cell_list(const AtomicConfiguration& config, double cutoff) {
  expects(cutoff > 0.0, "build_edges: cutoff must be positive");
  config.validate();
  const int n = static_cast<int>(config.size());
  Vec3 lo = config.positions.front(), hi = lo;
  for (const auto& p : config.positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  using Cell = std::array<std::int64_t, 3>;
  auto cell_of = [&](const Vec3& p) {
    Cell c;
    for (int k = 0; k < 3; ++k) c[k] = static_cast<std::int64_t>(std::floor((p[k] - lo[k]) / cutoff));
    return c;
  };
  std::map<Cell, std::vector<int>> cells;
  for (int a = 0; a < n; ++a) cells[cell_of(config.positions[a])].push_back(a);

  // Coincident atoms land in the same cell, so they are still detected.
  std::vector<std::vector<int>> neighbours(n);
  for (int j = 0; j < n; ++j) {
    const Cell c = cell_of(config.positions[j]);
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = cells.find({c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == cells.end()) continue;
          for (int i : it->second)
            if (i != j) neighbours[j].push_back(i);
        }
    std::sort(neighbours[j].begin(), neighbours[j].end());
  }
  EdgeSet edges;
  edges.num_atoms = config.size();
  for (int j = 0; j < n; ++j)
    for (int i : neighbours[j]) detail::push_edge(edges, config, j, i, cutoff);
  return edges;
}

/// One triplet per incoming edge k->j and outgoing edge j->i with k != i.
inline TripletSet build_triplets(const EdgeSet& edges) {
  std::vector<std::vector<int>> incoming(edges.num_atoms);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    expects(edges.target[e] >= 0 && static_cast<std::size_t>(edges.target[e]) < edges.num_atoms,
            "build_triplets: edge target out of range");
    incoming[edges.target[e]].push_back(static_cast<int>(e));
  }
  TripletSet triplets;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const int j = edges.source[e];
    const int i = edges.target[e];
    for (int kj : incoming[j]) {
      if (edges.source[kj] == i) continue;
      triplets.kj.push_back(kj);
      triplets.ji.push_back(static_cast<int>(e));
    }
  }
  return triplets;
}

/// Angle at the central atom j between the bonds toward i and toward k.
inline double bond_angle(const Vec3& xi, const Vec3& xj, const Vec3& xk) {
  const Vec3 a = xi - xj;
  const Vec3 b = xk - xj;
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw DegenerateGeometryError("zero-length bond vector in angle");
  return std::acos(std::clamp(a.dot(b) / (na * nb), -1.0, 1.0));
}

inline void compute_angles(const AtomicConfiguration& config, const EdgeSet& edges, TripletSet& triplets) {
  triplets.angle.resize(triplets.size());
  for (std::size_t t = 0; t < triplets.size(); ++t) {
    const int kj = triplets.kj[t], ji = triplets.ji[t];
    expects(kj >= 0 && static_cast<std::size_t>(kj) < edges.size() && ji >= 0 &&
                static_cast<std::size_t>(ji) < edges.size(),
            "compute_angles: triplet references a missing edge");
    const int k = edges.source[kj];
    const int j = edges.source[ji];
    const int i = edges.target[ji];
    triplets.angle[t] = bond_angle(config.positions[i], config.positions[j], config.positions[k]);
  }
}

/// Embedding-count ratios: messages per atom and triplets per message.
struct GraphStats {
  std::size_t atoms = 0;
  std::size_t edges = 0;
  std::size_t triplets = 0;
  double edges_per_atom() const { return atoms ? static_cast<double>(edges) / atoms : 0.0; }
  double triplets_per_edge() const { return edges ? static_cast<double>(triplets) / edges : 0.0; }

  GraphStats& operator+=(const GraphStats& o) {
    atoms += o.atoms;
    edges += o.edges;
    triplets += o.triplets;
    return *this;
  }
};

/// Index structure for a batch of configurations: atoms and edges of all
/// members are concatenated with offsets, `molecule` maps atoms to members.
struct Graph {
  std::vector<int> atomic_numbers;
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> positions;
  std::vector<int> molecule;
  int num_molecules = 0;
  std::vector<int> source, target;
  std::vector<int> triplet_kj, triplet_ji;

  int num_atoms() const { return static_cast<int>(atomic_numbers.size()); }
  int num_edges() const { return static_cast<int>(source.size()); }
  int num_triplets() const { return static_cast<int>(triplet_kj.size()); }
  GraphStats stats() const {
    return {atomic_numbers.size(), source.size(), triplet_kj.size()};
  }
};

inline Graph make_graph(const AtomicConfiguration& config, double cutoff) {
  const EdgeSet edges = build_edges(config, cutoff);
  const TripletSet triplets = build_triplets(edges);
  Graph g;
  g.atomic_numbers = config.atomic_numbers;
  g.positions.resize(static_cast<Eigen::Index>(config.size()), 3);
  for (std::size_t a = 0; a < config.size(); ++a) g.positions.row(static_cast<Eigen::Index>(a)) = config.positions[a];
  g.molecule.assign(config.size(), 0);
  g.num_molecules = 1;
  g.source = edges.source;
  g.target = edges.target;
  g.triplet_kj = triplets.kj;
  g.triplet_ji = triplets.ji;
  return g;
}

inline Graph concatenate(std::span<const Graph* const> parts) {
  Graph out;
  int atoms = 0, edges = 0;
  for (const Graph* p : parts) atoms += p->num_atoms();
  out.positions.resize(atoms, 3);
  atoms = 0;
  for (const Graph* p : parts) {
    out.atomic_numbers.insert(out.atomic_numbers.end(), p->atomic_numbers.begin(), p->atomic_numbers.end());
    out.positions.middleRows(atoms, p->num_atoms()) = p->positions;
    for (int m : p->molecule) out.molecule.push_back(m + out.num_molecules);
    for (int s : p->source) out.source.push_back(s + atoms);
    for (int t : p->target) out.target.push_back(t + atoms);
    for (int t : p->triplet_kj) out.triplet_kj.push_back(t + edges);
    for (int t : p->triplet_ji) out.triplet_ji.push_back(t + edges);
    out.num_molecules += p->num_molecules;
    atoms += p->num_atoms();
    edges += p->num_edges();
  }
  return out;
}

inline Graph concatenate(std::span<const Graph> parts) {
  std::vector<const Graph*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  return concatenate(std::span<const Graph* const>(ptrs));
}

}  // namespace dimekit
