#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "topo_nas/backend.hpp"
#include "topo_nas/data.hpp"
#include "topo_nas/errors.hpp"
#include "topo_nas/estimation.hpp"
#include "topo_nas/hash.hpp"
#include "topo_nas/search_space.hpp"

namespace topo_nas {

// Scores a fixed set of architectures on a stream of snapshots. Only the
// running parameter sum is kept, so K snapshots cost one extra store.
class SnapshotScorer {
 public:
  SnapshotScorer(const SearchSpaceSpec& space, std::vector<ArchitectureGenome> genomes, const Dataset& eval)
      : space_(space), genomes_(std::move(genomes)), eval_(eval) {
    for (const auto& g : genomes_) space_.validate(g);
  }

  // Returns this snapshot's accuracy for every architecture.
  const std::vector<double>& add(const SharedParameterStore& snapshot) {
    std::vector<double> acc;
    acc.reserve(genomes_.size());
    for (const auto& g : genomes_) acc.push_back(accuracy(snapshot, space_, g, eval_));
    sum_.add(snapshot);
    per_snapshot_.push_back(std::move(acc));
    return per_snapshot_.back();
  }

  std::size_t count() const noexcept { return per_snapshot_.size(); }
  const std::vector<std::vector<double>>& per_snapshot() const noexcept { return per_snapshot_; }

  // S_s for every architecture.
  std::vector<double> score_expectation() const {
    if (per_snapshot_.empty()) fail(ErrorCategory::invalid_argument, "checkpoint set is empty");
    std::vector<double> out(genomes_.size(), 0.0);
    for (const auto& row : per_snapshot_)
      for (std::size_t m = 0; m < out.size(); ++m) out[m] += row[m];
    for (auto& v : out) v /= static_cast<double>(per_snapshot_.size());
    return out;
  }

  // S_p for every architecture.
  std::vector<double> parameter_expectation() const {
    const auto mean = sum_.mean();
    std::vector<double> out;
    for (const auto& g : genomes_) out.push_back(accuracy(mean, space_, g, eval_));
    return out;
  }

 private:
  const SearchSpaceSpec& space_;
  std::vector<ArchitectureGenome> genomes_;
  const Dataset& eval_;
  ParameterSum sum_;
  std::vector<std::vector<double>> per_snapshot_;
};

struct TauRow {
  std::string estimator;   // estimator name
  std::string checkpoint;  // "-" for aggregates, "median" for the single baseline
  double tau = 0.0;
};

// Scores of one estimator at one checkpoint label, indexed like `genome_hashes`.
inline std::map<std::pair<EstimatorTag, std::string>, std::vector<double>> group_scores(
    const std::vector<ScoreRecord>& records, const std::vector<std::uint64_t>& genome_hashes) {
  std::map<std::uint64_t, std::size_t> index;
  for (std::size_t m = 0; m < genome_hashes.size(); ++m) index[genome_hashes[m]] = m;
  std::map<std::pair<EstimatorTag, std::string>, std::vector<double>> out;
  std::map<std::pair<EstimatorTag, std::string>, std::vector<bool>> seen;
  for (const auto& r : records) {
    auto it = index.find(r.genome_hash);
    if (it == index.end()) fail(ErrorCategory::mismatch, "score for unknown genome " + hex64(r.genome_hash));
    const auto key = std::make_pair(r.estimator, r.checkpoint);
    auto& v = out[key];
    auto& s = seen[key];
    if (v.empty()) {
      v.assign(genome_hashes.size(), 0.0);
      s.assign(genome_hashes.size(), false);
    }
    if (s[it->second])
      fail(ErrorCategory::mismatch, std::string("duplicate ") + estimator_name(r.estimator) + " score for genome " +
                                        hex64(r.genome_hash) + " at " + r.checkpoint);
    s[it->second] = true;
    v[it->second] = r.score;
  }
  for (const auto& [key, flags] : seen)
    for (std::size_t m = 0; m < flags.size(); ++m)
      if (!flags[m])
        fail(ErrorCategory::mismatch, std::string("missing ") + estimator_name(key.first) + " score for genome " +
                                          hex64(genome_hashes[m]) + " at " + key.second);
  return out;
}

// Kendall tau of each estimator against ground truth. The single-checkpoint
// baseline is the median over its last `tail` checkpoints (labels sort in
// chronological order); every per-checkpoint tau is listed as well.
inline std::vector<TauRow> tau_table(const std::vector<ScoreRecord>& records,
                                     const std::vector<std::uint64_t>& genome_hashes, std::size_t tail) {
  const auto groups = group_scores(records, genome_hashes);
  const auto gt_it = groups.find({EstimatorTag::ground_truth, "-"});
  if (gt_it == groups.end()) fail(ErrorCategory::invalid_argument, "ground-truth scores are missing");
  const auto& gt = gt_it->second;

  std::vector<TauRow> rows;
  std::vector<std::pair<std::string, double>> singles;
  for (const auto& [key, scores] : groups)
    if (key.first == EstimatorTag::single) singles.emplace_back(key.second, kendall_tau_scores(scores, gt, genome_hashes));
  if (!singles.empty()) {
    require(tail >= 1, "tail must be at least 1");
    const std::size_t first = singles.size() > tail ? singles.size() - tail : 0;
    std::vector<double> taus;
    for (std::size_t k = first; k < singles.size(); ++k) taus.push_back(singles[k].second);
    rows.push_back({"single", "median", median(taus)});
    for (std::size_t k = first; k < singles.size(); ++k) rows.push_back({"single", singles[k].first, singles[k].second});
  }
  for (auto tag : kAllEstimators) {
    if (tag == EstimatorTag::single || tag == EstimatorTag::snapshot) continue;
    auto it = groups.find({tag, "-"});
    if (it == groups.end()) continue;
    rows.push_back({estimator_name(tag), "-", kendall_tau_scores(it->second, gt, genome_hashes)});
  }
  return rows;
}

inline std::optional<double> find_tau(const std::vector<TauRow>& rows, const std::string& estimator,
                                      const std::string& checkpoint) {
  for (const auto& r : rows)
    if (r.estimator == estimator && r.checkpoint == checkpoint) return r.tau;
  return std::nullopt;
}

struct TrajectoryPoint {
  std::string source;      // single (training epochs) or snapshot (Langevin chain)
  std::string checkpoint;
  std::uint64_t genome_hash = 0;
  double score = 0.0;
  std::size_t rank = 0;    // 0 = best at this checkpoint
};

// Per-checkpoint ranks of every architecture, for plotting rank stability.
inline std::vector<TrajectoryPoint> rank_trajectories(const std::vector<ScoreRecord>& records,
                                                      const std::vector<std::uint64_t>& genome_hashes) {
  std::vector<TrajectoryPoint> out;
  for (const auto& [key, scores] : group_scores(records, genome_hashes)) {
    if (key.first != EstimatorTag::single && key.first != EstimatorTag::snapshot) continue;
    const auto ranks = rank_by_score(scores, genome_hashes);
    for (std::size_t m = 0; m < scores.size(); ++m)
      out.push_back({estimator_name(key.first), key.second, genome_hashes[m], scores[m], ranks[m]});
  }
  return out;
}

}  // namespace topo_nas
