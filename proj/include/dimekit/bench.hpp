#pragma once

// Micro-benchmark of the triplet stage of the two interaction variants on
// synthetic inputs: basis transform per triplet, gather of the kj message,
// the interaction itself, and the scatter-sum onto ji edges.

#include <algorithm>
#include <chrono>
#include <random>
#include <vector>

#include "dimekit/diff.hpp"
#include "dimekit/model.hpp"

namespace dimekit {

struct InteractionTiming {
  InteractionKind kind = InteractionKind::hadamard;
  Eigen::Index triplets = 0;
  double seconds = 0;            // best of the repeats
  double per_triplet_ns = 0;
  double macs_per_triplet = 0;   // analytic, from interaction_flops
};

struct BenchResult {
  InteractionTiming hadamard, bilinear;
  double ratio() const { return bilinear.per_triplet_ns / hadamard.per_triplet_ns; }
};

namespace detail {
inline Matrix uniform_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

template <class F>
double best_time(int repeats, F&& f) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}
}  // namespace detail

/// Times both variants on `triplets` synthetic triplets over triplets / 8 edges.
inline BenchResult bench_interactions(const ModelConfig& cfg, Eigen::Index triplets, int repeats = 3,
                                      std::uint64_t seed = 0) {
  cfg.validate();
  expects(triplets >= 1 && repeats >= 1, "bench: triplets and repeats must be positive");
  std::mt19937_64 rng(seed);
  const Eigen::Index H = cfg.hidden_dim, T = cfg.triplet_dim, B = cfg.num_bilinear;
  const Eigen::Index S = cfg.basis.spherical_size();
  const Eigen::Index edges = std::max<Eigen::Index>(1, triplets / 8);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(edges) - 1);
  std::vector<int> kj_ids(static_cast<std::size_t>(triplets)), ji_ids(static_cast<std::size_t>(triplets));
  for (auto& v : kj_ids) v = pick(rng);
  for (auto& v : ji_ids) v = pick(rng);
  const diff::IndexList kj = diff::make_index(std::move(kj_ids)), ji = diff::make_index(std::move(ji_ids));

  const Tensor sbf = diff::constant(detail::uniform_matrix(triplets, S, rng, 1.0));
  const Tensor down = diff::constant(detail::uniform_matrix(edges, T, rng, 1.0));
  const Tensor gated = diff::constant(detail::uniform_matrix(edges, H, rng, 1.0));
  const Tensor sbf1 = diff::constant(detail::uniform_matrix(S, T, rng, 0.3));
  const Tensor sbf2 = diff::constant(detail::uniform_matrix(T, T, rng, 0.3));
  const Tensor sbf_proj = diff::constant(detail::uniform_matrix(S, B, rng, 0.3));
  const Tensor weight = diff::constant(detail::uniform_matrix(B * H, H, rng, 0.05));

  const InteractionFlops flops = interaction_flops(cfg);
  BenchResult r;
  r.hadamard.kind = InteractionKind::hadamard;
  r.hadamard.seconds = detail::best_time(repeats, [&] {
    const Tensor emb = diff::matmul(diff::silu(diff::matmul(sbf, sbf1)), sbf2);
    const Tensor t = triplet_interaction_hadamard(diff::gather_rows(down, kj), emb);
    (void)diff::segment_sum(t, ji, edges);
  });
  r.hadamard.macs_per_triplet = flops.hadamard_stage;
  r.bilinear.kind = InteractionKind::bilinear;
  r.bilinear.seconds = detail::best_time(repeats, [&] {
    const Tensor proj = diff::matmul(sbf, sbf_proj);
    const Tensor t = triplet_interaction_bilinear(diff::gather_rows(gated, kj), proj, weight);
    (void)diff::segment_sum(t, ji, edges);
  });
  r.bilinear.macs_per_triplet = flops.bilinear_stage;
  for (auto* t : {&r.hadamard, &r.bilinear}) {
    t->triplets = triplets;
    t->per_triplet_ns = 1e9 * t->seconds / static_cast<double>(triplets);
  }
  return r;
}

}  // namespace dimekit
