#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "topo_nas/errors.hpp"
#include "topo_nas/rng.hpp"
#include "topo_nas/search_space.hpp"

namespace topo_nas {

// Stem edges sample uniformly over their own candidate set. Branch edges
// pick none with probability p_drop, otherwise one of their I_branch real
// candidates uniformly.
struct SamplingPolicy {
  double p_drop = 0.6;
};

enum class PDropMode { fixed, calibrated };

inline const char* p_drop_mode_name(PDropMode m) { return m == PDropMode::fixed ? "fixed" : "calibrated"; }

inline PDropMode parse_p_drop_mode(const std::string& s) {
  if (s == "fixed") return PDropMode::fixed;
  if (s == "calibrated") return PDropMode::calibrated;
  fail(ErrorCategory::parse, "p_drop_mode must be fixed or calibrated, got '" + s + "'");
}

struct SamplerConfig {
  PDropMode mode = PDropMode::fixed;
  double p_drop = 0.6;
  double c_target = 0.0;  // used in calibrated mode only
};

inline void check_policy(const SamplingPolicy& policy) {
  if (!(policy.p_drop >= 0.0 && policy.p_drop <= 1.0))
    fail(ErrorCategory::invalid_argument, "p_drop must lie in [0, 1]");
}

inline std::vector<double> edge_probabilities(const EdgeSpec& edge, const SamplingPolicy& policy) {
  std::vector<double> p(edge.candidates.size(), 0.0);
  const auto active = static_cast<double>(edge.active_choice_count());
  if (edge.kind == EdgeKind::stem) {
    for (auto& v : p) v = 1.0 / active;
    return p;
  }
  const auto none = edge.none_index();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = i == none ? policy.p_drop : (1.0 - policy.p_drop) / active;
  return p;
}

// Draws the choice for one edge from its own stream (step, edge).
inline std::uint16_t sample_edge(const EdgeSpec& edge, std::size_t edge_index, const SamplingPolicy& policy,
                                 std::uint64_t seed, std::uint64_t step) {
  CounterRng rng(seed, purpose::architecture, {step, edge_index});
  if (edge.kind == EdgeKind::stem) return static_cast<std::uint16_t>(rng.below(edge.candidates.size()));
  const auto none = edge.none_index();
  if (rng.uniform() < policy.p_drop) return static_cast<std::uint16_t>(none);
  auto k = rng.below(edge.active_choice_count());
  if (k >= none) ++k;
  return static_cast<std::uint16_t>(k);
}

inline ArchitectureGenome sample_architecture(const SearchSpaceSpec& space, const SamplingPolicy& policy,
                                              std::uint64_t seed, std::uint64_t step) {
  check_policy(policy);
  ArchitectureGenome g;
  g.choices.reserve(space.edges.size());
  for (std::size_t i = 0; i < space.edges.size(); ++i)
    g.choices.push_back(sample_edge(space.edges[i], i, policy, seed, step));
  return g;
}

// Exact expectation of genome_cost under the policy, by linearity per edge.
inline Cost expected_cost(const SearchSpaceSpec& space, const SamplingPolicy& policy) {
  check_policy(policy);
  Cost total = 0.0;
  for (std::size_t i = 0; i < space.edges.size(); ++i) {
    const auto p = edge_probabilities(space.edges[i], policy);
    for (std::size_t c = 0; c < p.size(); ++c) total += p[c] * space.edge_cost(i, c);
  }
  return total;
}

struct CostRange {
  Cost min = 0.0;  // p_drop = 1
  Cost max = 0.0;  // p_drop = 0
};

inline CostRange achievable_cost_range(const SearchSpaceSpec& space) {
  return {expected_cost(space, {1.0}), expected_cost(space, {0.0})};
}

// Solves expected_cost(p_drop) = c_target. The expectation is affine in
// p_drop: E(p) = E(1) + (1 - p) * (E(0) - E(1)).
inline double calibrate_p_drop(const SearchSpaceSpec& space, Cost c_target) {
  const auto range = achievable_cost_range(space);
  const double slack = 1e-12 * std::max(1.0, std::abs(range.max));
  if (!(c_target >= range.min - slack && c_target <= range.max + slack)) {
    fail(ErrorCategory::infeasible, "c_target " + std::to_string(c_target) +
                                        " outside achievable expected-cost interval [" +
                                        std::to_string(range.min) + ", " + std::to_string(range.max) + "]");
  }
  const double span = range.max - range.min;
  if (span <= 0.0) return 1.0;
  const double p = 1.0 - (c_target - range.min) / span;
  return std::clamp(p, 0.0, 1.0);
}

inline SamplingPolicy resolve_policy(const SearchSpaceSpec& space, const SamplerConfig& cfg) {
  if (cfg.mode == PDropMode::fixed) {
    SamplingPolicy p{cfg.p_drop};
    check_policy(p);
    return p;
  }
  return {calibrate_p_drop(space, cfg.c_target)};
}

}  // namespace topo_nas
