#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "topo_nas/errors.hpp"
#include "topo_nas/rng.hpp"
#include "topo_nas/search_space.hpp"

namespace topo_nas {

inline constexpr std::size_t kUnranked = std::numeric_limits<std::size_t>::max();

// Objectives: minimize cost, maximize score.
struct Individual {
  ArchitectureGenome genome;
  double cost = 0.0;
  double score = 0.0;
  std::size_t rank = kUnranked;
  double crowding = 0.0;
};

inline bool dominates(const Individual& a, const Individual& b) noexcept {
  return a.cost <= b.cost && a.score >= b.score && (a.cost < b.cost || a.score > b.score);
}

// Fast non-dominated sort. Returns fronts as index lists and writes each
// member's front index into `rank`.
inline std::vector<std::vector<std::size_t>> non_dominated_sort(std::vector<Individual>& pop) {
  const std::size_t n = pop.size();
  std::vector<std::vector<std::size_t>> dominated(n);
  std::vector<std::size_t> count(n, 0);
  std::vector<std::vector<std::size_t>> fronts;
  std::vector<std::size_t> current;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (dominates(pop[i], pop[j]))
        dominated[i].push_back(j);
      else if (dominates(pop[j], pop[i]))
        ++count[i];
    }
    if (count[i] == 0) current.push_back(i);
  }
  while (!current.empty()) {
    for (auto i : current) pop[i].rank = fronts.size();
    std::vector<std::size_t> next;
    for (auto i : current)
      for (auto j : dominated[i])
        if (--count[j] == 0) next.push_back(j);
    std::sort(next.begin(), next.end());
    fronts.push_back(std::move(current));
    current = std::move(next);
  }
  return fronts;
}

// Crowding distance of each member of `front` (indices into pop), in front order.
inline std::vector<double> crowding_distance(const std::vector<Individual>& pop, std::span<const std::size_t> front) {
  const std::size_t m = front.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(m, 0.0);
  if (m <= 2) {
    std::fill(d.begin(), d.end(), inf);
    return d;
  }
  std::vector<std::size_t> order(m);
  for (auto objective : {&Individual::cost, &Individual::score}) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double va = pop[front[a]].*objective, vb = pop[front[b]].*objective;
      if (va != vb) return va < vb;
      return pop[front[a]].genome.hash() < pop[front[b]].genome.hash();
    });
    const double lo = pop[front[order.front()]].*objective;
    const double hi = pop[front[order.back()]].*objective;
    d[order.front()] = inf;
    d[order.back()] = inf;
    if (hi == lo) continue;
    for (std::size_t k = 1; k + 1 < m; ++k)
      d[order[k]] += (pop[front[order[k + 1]]].*objective - pop[front[order[k - 1]]].*objective) / (hi - lo);
  }
  return d;
}

// Sorts the population and fills in rank and crowding for everyone.
inline std::vector<std::vector<std::size_t>> assign_rank_and_crowding(std::vector<Individual>& pop) {
  auto fronts = non_dominated_sort(pop);
  for (const auto& f : fronts) {
    const auto d = crowding_distance(pop, f);
    for (std::size_t k = 0; k < f.size(); ++k) pop[f[k]].crowding = d[k];
  }
  return fronts;
}

// Crowded comparison: lower rank, then larger crowding, then lower hash.
inline bool crowded_less(const Individual& a, const Individual& b) {
  if (a.rank != b.rank) return a.rank < b.rank;
  if (a.crowding != b.crowding) return a.crowding > b.crowding;
  return a.genome.hash() < b.genome.hash();
}

// Child takes a's genes [0, p) and b's genes [p, len).
inline ArchitectureGenome crossover_at(const ArchitectureGenome& a, const ArchitectureGenome& b, std::size_t p) {
  if (a.size() != b.size()) fail(ErrorCategory::invalid_argument, "parents have different lengths");
  if (p > a.size()) fail(ErrorCategory::invalid_argument, "crossover point out of range");
  ArchitectureGenome child = b;
  std::copy(a.choices.begin(), a.choices.begin() + static_cast<std::ptrdiff_t>(p), child.choices.begin());
  return child;
}

// Single-point crossover with p uniform in 1..len-1.
inline ArchitectureGenome crossover(const ArchitectureGenome& a, const ArchitectureGenome& b, CounterRng& rng) {
  if (a.size() != b.size()) fail(ErrorCategory::invalid_argument, "parents have different lengths");
  if (a.size() < 2) return a;
  const std::size_t p = 1 + static_cast<std::size_t>(rng.below(a.size() - 1));
  return crossover_at(a, b, p);
}

// Each gene mutates with `probability` to a different candidate of its edge.
inline ArchitectureGenome mutate(const SearchSpaceSpec& space, const ArchitectureGenome& genome, double probability,
                                 CounterRng& rng) {
  if (!(probability >= 0.0 && probability <= 1.0))
    fail(ErrorCategory::invalid_argument, "mutation probability must lie in [0, 1]");
  space.validate(genome);
  ArchitectureGenome out = genome;
  for (std::size_t e = 0; e < out.size(); ++e) {
    const auto n = space.edges[e].candidates.size();
    if (rng.uniform() >= probability || n < 2) continue;
    auto c = static_cast<std::uint16_t>(rng.below(n - 1));
    if (c >= out.choices[e]) ++c;
    out.choices[e] = c;
  }
  return out;
}

inline ArchitectureGenome uniform_genome(const SearchSpaceSpec& space, CounterRng& rng) {
  ArchitectureGenome g;
  g.choices.resize(space.edges.size());
  for (std::size_t e = 0; e < g.size(); ++e)
    g.choices[e] = static_cast<std::uint16_t>(rng.below(space.edges[e].candidates.size()));
  return g;
}

struct CostBand {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
};

struct SearchConfig {
  std::size_t population = 45;
  std::size_t generations = 22;
  double mutation_rate = -1.0;  // negative: 1 / genome length
  std::uint64_t seed = 0;
  std::vector<CostBand> bands;
};

struct GenerationLog {
  std::size_t generation = 0;
  std::vector<Individual> population;
  std::size_t evaluations = 0;  // cumulative genome slots, memo hits included
  std::size_t scorer_calls = 0;
  std::size_t memo_hits = 0;
};

struct ScorerFailure {
  ArchitectureGenome genome;
  std::string message;
};

struct SearchResult {
  std::vector<Individual> archive;    // front 0 of everything evaluated, by ascending cost
  std::vector<Individual> evaluated;  // every successfully scored genome, in evaluation order
  std::vector<std::optional<Individual>> picks;  // best score per cost band
  std::vector<ScorerFailure> failures;
  std::size_t evaluations = 0;
  std::size_t scorer_calls = 0;
  std::size_t memo_hits = 0;
};

using Scorer = std::function<double(const ArchitectureGenome&)>;

namespace detail {

class MemoScorer {
 public:
  MemoScorer(const SearchSpaceSpec& space, const Scorer& scorer, SearchResult& out)
      : space_(space), scorer_(scorer), out_(out) {}

  std::optional<Individual> operator()(const ArchitectureGenome& g) {
    ++out_.evaluations;
    const auto h = g.hash();
    if (auto it = memo_.find(h); it != memo_.end()) {
      ++out_.memo_hits;
      if (!it->second) return std::nullopt;
      return out_.evaluated[*it->second];
    }
    ++out_.scorer_calls;
    Individual ind{g, genome_cost(space_, g), 0.0};
    try {
      ind.score = scorer_(g);
      if (!std::isfinite(ind.score)) fail(ErrorCategory::numeric, "scorer returned a non-finite score");
    } catch (const std::exception& e) {
      memo_.emplace(h, std::nullopt);
      out_.failures.push_back({g, e.what()});
      return std::nullopt;
    }
    memo_.emplace(h, out_.evaluated.size());
    out_.evaluated.push_back(ind);
    return ind;
  }

 private:
  const SearchSpaceSpec& space_;
  const Scorer& scorer_;
  SearchResult& out_;
  std::unordered_map<std::uint64_t, std::optional<std::size_t>> memo_;
};

inline std::vector<Individual> survivors(std::vector<Individual> pool, std::size_t n) {
  const auto fronts = assign_rank_and_crowding(pool);
  std::vector<Individual> next;
  next.reserve(n);
  for (const auto& f : fronts) {
    std::vector<std::size_t> members = f;
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) { return crowded_less(pool[a], pool[b]); });
    for (auto i : members) {
      if (next.size() == n) return next;
      next.push_back(pool[i]);
    }
  }
  return next;
}

}  // namespace detail

inline std::vector<Individual> pareto_front(std::vector<Individual> pop) {
  if (pop.empty()) return {};
  const auto fronts = non_dominated_sort(pop);
  std::vector<Individual> out;
  for (auto i : fronts.front()) out.push_back(pop[i]);
  std::sort(out.begin(), out.end(), [](const Individual& a, const Individual& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    return a.genome.hash() < b.genome.hash();
  });
  return out;
}

// NSGA-II. Every genome is scored at most once; the scorer may throw, in which
// case the genome is dropped and reported in `failures`.
inline SearchResult search(const SearchSpaceSpec& space, const Scorer& scorer, const SearchConfig& cfg,
                           const std::function<void(const GenerationLog&)>& on_generation = {}) {
  require(cfg.population >= 2, "population must hold at least two individuals");
  require(cfg.generations >= 1, "at least one generation is required");
  const double rate = cfg.mutation_rate < 0.0 ? 1.0 / static_cast<double>(space.edges.size()) : cfg.mutation_rate;
  require(rate <= 1.0, "mutation rate must not exceed 1");
  for (const auto& b : cfg.bands) require(b.lo <= b.hi, "cost band must satisfy lo <= hi");

  SearchResult out;
  detail::MemoScorer score(space, scorer, out);
  CounterRng rng(cfg.seed, purpose::evolution, {});

  auto log = [&](std::size_t gen, const std::vector<Individual>& pop) {
    if (on_generation) on_generation({gen, pop, out.evaluations, out.scorer_calls, out.memo_hits});
  };

  std::vector<Individual> pop;
  for (std::size_t i = 0; i < cfg.population; ++i)
    if (auto ind = score(uniform_genome(space, rng))) pop.push_back(*ind);
  if (pop.empty()) fail(ErrorCategory::stage_failed, "every genome of the initial population failed to score");
  assign_rank_and_crowding(pop);
  log(0, pop);

  auto tournament = [&]() -> const Individual& {
    const auto& a = pop[rng.below(pop.size())];
    const auto& b = pop[rng.below(pop.size())];
    return crowded_less(b, a) ? b : a;
  };

  for (std::size_t gen = 1; gen < cfg.generations; ++gen) {
    std::vector<Individual> pool = pop;
    for (std::size_t i = 0; i < cfg.population; ++i) {
      const auto& pa = tournament();
      const auto& pb = tournament();
      auto child = mutate(space, crossover(pa.genome, pb.genome, rng), rate, rng);
      if (auto ind = score(child)) pool.push_back(*ind);
    }
    std::vector<Individual> unique;
    std::unordered_map<std::uint64_t, bool> seen;
    for (auto& ind : pool)
      if (seen.emplace(ind.genome.hash(), true).second) unique.push_back(std::move(ind));
    pop = detail::survivors(std::move(unique), cfg.population);
    assign_rank_and_crowding(pop);
    log(gen, pop);
  }

  out.archive = pareto_front(out.evaluated);
  for (const auto& band : cfg.bands) {
    std::optional<Individual> best;
    for (const auto& ind : out.evaluated) {
      if (ind.cost < band.lo || ind.cost > band.hi) continue;
      if (!best || ind.score > best->score || (ind.score == best->score && ind.genome.hash() < best->genome.hash()))
        best = ind;
    }
    out.picks.push_back(best);
  }
  return out;
}

}  // namespace topo_nas
