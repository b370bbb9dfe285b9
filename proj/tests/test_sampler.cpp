#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "topo_nas/sampler.hpp"

using namespace topo_nas;

namespace {

SearchSpaceSpec default_space() { return build_space({2, 2, 4, 8, 4}, doubling_widths(5, 8)); }

// Exact expectation by enumerating every genome of a small space.
double enumerated_expectation(const SearchSpaceSpec& space, const SamplingPolicy& policy) {
  std::vector<std::vector<double>> probs;
  for (const auto& e : space.edges) probs.push_back(edge_probabilities(e, policy));
  ArchitectureGenome g;
  g.choices.assign(space.edges.size(), 0);
  double total = 0.0;
  while (true) {
    double p = 1.0;
    for (std::size_t i = 0; i < g.size(); ++i) p *= probs[i][g.choices[i]];
    total += p * genome_cost(space, g);
    std::size_t i = 0;
    for (; i < g.size(); ++i) {
      if (++g.choices[i] < space.edges[i].candidates.size()) break;
      g.choices[i] = 0;
    }
    if (i == g.size()) break;
  }
  return total;
}

}  // namespace

TEST(Sampler, ProbabilitiesSumToOne) {
  const auto space = default_space();
  for (double p : {0.0, 0.1, 0.6, 0.99, 1.0})
    for (const auto& e : space.edges) {
      const auto v = edge_probabilities(e, {p});
      EXPECT_NEAR(std::accumulate(v.begin(), v.end(), 0.0), 1.0, 1e-12);
      if (e.kind == EdgeKind::stem)
        for (double x : v) EXPECT_DOUBLE_EQ(x, 1.0 / static_cast<double>(e.active_choice_count()));
      else
        EXPECT_DOUBLE_EQ(v[e.none_index()], p);
    }
}

TEST(Sampler, DropOneGivesStemChain) {
  const auto space = default_space();
  for (std::uint64_t t = 0; t < 200; ++t) {
    const auto g = sample_architecture(space, {1.0}, 5, t);
    for (std::size_t i = 0; i < space.edges.size(); ++i)
      if (space.edges[i].kind == EdgeKind::branch) EXPECT_EQ(g.choices[i], space.edges[i].none_index());
  }
}

TEST(Sampler, Reproducible) {
  const auto space = default_space();
  for (std::uint64_t t = 0; t < 50; ++t) {
    EXPECT_EQ(sample_architecture(space, {0.6}, 11, t), sample_architecture(space, {0.6}, 11, t));
  }
  EXPECT_NE(sample_architecture(space, {0.6}, 11, 0), sample_architecture(space, {0.6}, 12, 0));
}

TEST(Sampler, NoneFrequencyAndCandidateFrequencies) {
  const auto space = default_space();
  const SamplingPolicy policy{0.6};
  constexpr std::size_t kSamples = 100000;
  std::vector<std::vector<std::size_t>> counts(space.edges.size());
  for (std::size_t i = 0; i < space.edges.size(); ++i) counts[i].assign(space.edges[i].candidates.size(), 0);
  for (std::size_t t = 0; t < kSamples; ++t) {
    const auto g = sample_architecture(space, policy, 2024, t);
    for (std::size_t i = 0; i < g.size(); ++i) ++counts[i][g.choices[i]];
  }
  // Per cell a 5 sigma bound (several hundred cells are checked at once);
  // across cells the sum of squared z-scores has mean = cells, sd = sqrt(2 cells).
  double z2 = 0.0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < space.edges.size(); ++i) {
    const auto& e = space.edges[i];
    const auto p = edge_probabilities(e, policy);
    if (e.kind == EdgeKind::branch)
      EXPECT_NEAR(static_cast<double>(counts[i][e.none_index()]) / kSamples, 0.6, 0.01) << "edge " << i;
    for (std::size_t c = 0; c < p.size(); ++c) {
      if (p[c] == 1.0) continue;
      const double se = std::sqrt(p[c] * (1.0 - p[c]) / kSamples);
      const double z = (static_cast<double>(counts[i][c]) / kSamples - p[c]) / se;
      EXPECT_LT(std::abs(z), 5.0) << "edge " << i << " cand " << c;
      z2 += z * z;
      ++cells;
    }
  }
  EXPECT_LT(std::abs(z2 - static_cast<double>(cells)), 5.0 * std::sqrt(2.0 * static_cast<double>(cells)));
}

TEST(Sampler, ExpectedCostMatchesEnumeration) {
  const auto space = topo_nas::testing::tiny_space({4}, 2);
  for (double p : {0.0, 0.3, 0.6, 1.0}) {
    EXPECT_NEAR(expected_cost(space, {p}), enumerated_expectation(space, {p}), 1e-9 * enumerated_expectation(space, {p}));
  }
}

TEST(Sampler, ExpectedCostMatchesMonteCarlo) {
  const auto space = topo_nas::testing::tiny_space({4}, 4);
  const SamplingPolicy policy{0.6};
  constexpr std::size_t kSamples = 1000000;
  double sum = 0.0;
  for (std::size_t t = 0; t < kSamples; ++t) sum += genome_cost(space, sample_architecture(space, policy, 9, t));
  const double mc = sum / kSamples;
  EXPECT_NEAR(mc, expected_cost(space, policy), 0.005 * expected_cost(space, policy));
}

TEST(Sampler, ExpectedCostWithinFiveSigmaOnDefaultSpace) {
  const auto space = default_space();
  const SamplingPolicy policy{0.6};
  constexpr std::size_t kSamples = 100000;
  double sum = 0.0, sq = 0.0;
  for (std::size_t t = 0; t < kSamples; ++t) {
    const double c = genome_cost(space, sample_architecture(space, policy, 77, t));
    sum += c;
    sq += c * c;
  }
  const double mean = sum / kSamples;
  const double sd = std::sqrt(sq / kSamples - mean * mean);
  EXPECT_LE(std::abs(mean - expected_cost(space, policy)), 5.0 * sd / std::sqrt(double(kSamples)));
}

TEST(Sampler, ExpectedCostAffineNonIncreasing) {
  const auto space = default_space();
  const double e0 = expected_cost(space, {0.0});
  const double e5 = expected_cost(space, {0.5});
  const double e1 = expected_cost(space, {1.0});
  EXPECT_GE(e0, e5);
  EXPECT_GE(e5, e1);
  EXPECT_NEAR(e5, 0.5 * (e0 + e1), 1e-9 * e0);
  // p_drop = 1 leaves only stem edges.
  double stem = 0.0;
  for (std::size_t i = 0; i < space.edges.size(); ++i) {
    if (space.edges[i].kind != EdgeKind::stem) continue;
    const auto p = edge_probabilities(space.edges[i], {1.0});
    for (std::size_t c = 0; c < p.size(); ++c) stem += p[c] * space.edge_cost(i, c);
  }
  EXPECT_NEAR(e1, stem, 1e-9 * stem);
}

TEST(Sampler, CalibrationRoundTrip) {
  const auto space = default_space();
  const auto range = achievable_cost_range(space);
  EXPECT_DOUBLE_EQ(calibrate_p_drop(space, range.min), 1.0);
  EXPECT_DOUBLE_EQ(calibrate_p_drop(space, range.max), 0.0);
  const double mid = 0.5 * (range.min + range.max);
  const double p = calibrate_p_drop(space, mid);
  EXPECT_NEAR(expected_cost(space, {p}), mid, 1e-9 * mid);
  for (double q = 0.0; q <= 1.0; q += 0.05) EXPECT_NEAR(calibrate_p_drop(space, expected_cost(space, {q})), q, 1e-9);
}

TEST(Sampler, CalibrationRejectsInfeasible) {
  const auto space = default_space();
  const auto range = achievable_cost_range(space);
  try {
    calibrate_p_drop(space, range.min * 0.5);
    FAIL() << "expected infeasible";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::infeasible);
  }
  EXPECT_THROW(calibrate_p_drop(space, range.max * 2.0), Error);
}

TEST(Sampler, ResolvePolicy) {
  const auto space = default_space();
  EXPECT_DOUBLE_EQ(resolve_policy(space, {PDropMode::fixed, 0.6, 0.0}).p_drop, 0.6);
  const double target = expected_cost(space, {0.25});
  EXPECT_NEAR(resolve_policy(space, {PDropMode::calibrated, 0.6, target}).p_drop, 0.25, 1e-9);
  EXPECT_THROW(resolve_policy(space, {PDropMode::fixed, 1.5, 0.0}), Error);
}
