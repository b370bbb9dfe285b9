#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "topo_nas/backend.hpp"
#include "topo_nas/data.hpp"
#include "topo_nas/errors.hpp"
#include "topo_nas/search_space.hpp"

namespace topo_nas {

// sgld_* average over the Langevin chain, tail_* over the final training
// epochs; single and snapshot rows hold one checkpoint each.
enum class EstimatorTag { single, snapshot, sgld_acc, sgld_param, tail_acc, tail_param, finetune, ground_truth };

inline constexpr EstimatorTag kAllEstimators[] = {EstimatorTag::single,     EstimatorTag::snapshot,
                                                  EstimatorTag::sgld_acc,   EstimatorTag::sgld_param,
                                                  EstimatorTag::tail_acc,   EstimatorTag::tail_param,
                                                  EstimatorTag::finetune,   EstimatorTag::ground_truth};

inline const char* estimator_name(EstimatorTag t) {
  switch (t) {
    case EstimatorTag::single: return "single";
    case EstimatorTag::snapshot: return "snapshot";
    case EstimatorTag::sgld_acc: return "sgld_acc";
    case EstimatorTag::sgld_param: return "sgld_param";
    case EstimatorTag::tail_acc: return "tail_acc";
    case EstimatorTag::tail_param: return "tail_param";
    case EstimatorTag::finetune: return "finetune";
    case EstimatorTag::ground_truth: return "ground_truth";
  }
  return "?";
}

inline EstimatorTag parse_estimator(const std::string& s) {
  for (auto t : kAllEstimators)
    if (s == estimator_name(t)) return t;
  fail(ErrorCategory::parse, "unknown estimator '" + s + "'");
}

struct ScoreRecord {
  std::uint64_t genome_hash = 0;
  EstimatorTag estimator = EstimatorTag::single;
  std::string checkpoint;  // e.g. epoch_0051, snapshot_03, mean
  double score = 0.0;
  std::uint64_t eval_hash = 0;
};

// K snapshots of the shared parameters, `spacing` steps apart.
struct CheckpointSet {
  std::vector<SharedParameterStore> snapshots;
  std::uint64_t spacing = 0;

  std::size_t size() const noexcept { return snapshots.size(); }
};

inline double accuracy_of(const std::vector<int>& predicted, const std::vector<int>& labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// Fraction of the eval split classified correctly by `genome` under `store`.
inline double accuracy(const SharedParameterStore& store, const SearchSpaceSpec& space, const ArchitectureGenome& genome,
                       const Dataset& eval) {
  if (eval.size() == 0) fail(ErrorCategory::invalid_argument, "evaluation split is empty");
  if (store.space_hash() != space.hash()) fail(ErrorCategory::mismatch, "store does not belong to this space");
  const auto dag = decode(space, genome);
  return accuracy_of(predict(store, dag, eval.features), eval.labels);
}

// S_s: mean accuracy over every snapshot.
inline double score_expectation(const CheckpointSet& checkpoints, const SearchSpaceSpec& space,
                                const ArchitectureGenome& genome, const Dataset& eval) {
  if (checkpoints.size() == 0) fail(ErrorCategory::invalid_argument, "checkpoint set is empty");
  double sum = 0.0;
  for (const auto& s : checkpoints.snapshots) sum += accuracy(s, space, genome, eval);
  return sum / static_cast<double>(checkpoints.size());
}

// Running elementwise sum of stores; mean() divides once at the end, so the
// result does not depend on whether snapshots were held in memory or streamed.
class ParameterSum {
 public:
  void add(const SharedParameterStore& s) {
    if (!sum_) {
      sum_ = s;
      for (const auto& id : sum_->block_ids()) sum_->block(id) = ParameterBlock::zeros_like(sum_->block(id));
      sum_->head() = Dense::zeros_like(sum_->head());
    } else if (s.space_hash() != sum_->space_hash() || s.num_blocks() != sum_->num_blocks()) {
      fail(ErrorCategory::mismatch, "snapshots belong to different spaces");
    }
    for (const auto& id : sum_->block_ids()) sum_->block(id).axpy(1.0, s.block(id));
    sum_->head().axpy(1.0, s.head());
    ++count_;
  }

  std::size_t count() const noexcept { return count_; }

  SharedParameterStore mean() const {
    if (count_ == 0) fail(ErrorCategory::invalid_argument, "checkpoint set is empty");
    SharedParameterStore m = *sum_;
    const double inv = 1.0 / static_cast<double>(count_);
    for (const auto& id : m.block_ids()) m.block(id).scale(inv);
    m.head().scale(inv);
    return m;
  }

 private:
  std::optional<SharedParameterStore> sum_;
  std::size_t count_ = 0;
};

// Elementwise mean of every block across the snapshots.
inline SharedParameterStore average_parameters(const CheckpointSet& checkpoints) {
  ParameterSum sum;
  for (const auto& s : checkpoints.snapshots) sum.add(s);
  return sum.mean();
}

// S_p: accuracy once, at the averaged parameters.
inline double parameter_expectation(const CheckpointSet& checkpoints, const SearchSpaceSpec& space,
                                    const ArchitectureGenome& genome, const Dataset& eval) {
  return accuracy(average_parameters(checkpoints), space, genome, eval);
}

// Kendall's tau-a between two rankings of the same items. rank_a[i] and
// rank_b[i] are the ranks given to item i; ties are rejected.
inline double kendall_tau(std::span<const std::size_t> rank_a, std::span<const std::size_t> rank_b) {
  if (rank_a.size() != rank_b.size()) fail(ErrorCategory::invalid_argument, "rankings differ in length");
  const auto n = rank_a.size();
  if (n < 2) fail(ErrorCategory::invalid_argument, "kendall tau needs at least two items");
  auto check = [](std::span<const std::size_t> r) {
    std::vector<std::size_t> sorted(r.begin(), r.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      fail(ErrorCategory::invalid_argument, "ranking contains duplicate entries");
  };
  check(rank_a);
  check(rank_b);
  {
    std::vector<std::size_t> sa(rank_a.begin(), rank_a.end()), sb(rank_b.begin(), rank_b.end());
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    if (sa != sb) fail(ErrorCategory::invalid_argument, "rankings use different rank sets");
  }
  std::int64_t concordant = 0;
  std::int64_t discordant = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool a = rank_a[i] < rank_a[j];
      const bool b = rank_b[i] < rank_b[j];
      (a == b ? concordant : discordant) += 1;
    }
  const auto pairs = static_cast<std::int64_t>(n * (n - 1) / 2);
  return static_cast<double>(concordant - discordant) / static_cast<double>(pairs);
}

// Rank 0 = best (highest score). Equal scores are ordered by genome hash.
inline std::vector<std::size_t> rank_by_score(std::span<const double> scores, std::span<const std::uint64_t> hashes) {
  if (scores.size() != hashes.size()) fail(ErrorCategory::invalid_argument, "one hash per score is required");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return hashes[a] < hashes[b];
  });
  std::vector<std::size_t> rank(scores.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r;
  return rank;
}

inline double kendall_tau_scores(std::span<const double> a, std::span<const double> b,
                                 std::span<const std::uint64_t> hashes) {
  const auto ra = rank_by_score(a, hashes);
  const auto rb = rank_by_score(b, hashes);
  return kendall_tau(ra, rb);
}

inline double median(std::vector<double> v) {
  if (v.empty()) fail(ErrorCategory::invalid_argument, "median of an empty set");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace topo_nas
