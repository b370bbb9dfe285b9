#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "topo_nas/backend.hpp"
#include "topo_nas/data.hpp"
#include "topo_nas/errors.hpp"
#include "topo_nas/estimation.hpp"
#include "topo_nas/rng.hpp"
#include "topo_nas/sampler.hpp"
#include "topo_nas/search_space.hpp"

namespace topo_nas {

enum class LrKind { constant, cosine };

inline const char* lr_kind_name(LrKind k) { return k == LrKind::constant ? "constant" : "cosine"; }

inline LrKind parse_lr_kind(const std::string& s) {
  if (s == "constant") return LrKind::constant;
  if (s == "cosine") return LrKind::cosine;
  fail(ErrorCategory::parse, "learning-rate schedule must be constant or cosine, got '" + s + "'");
}

struct TrainSchedule {
  std::uint64_t steps = 1;
  std::size_t batch_size = 128;
  LrKind kind = LrKind::cosine;
  double lr0 = 0.1;
  double lr_final = 2.5e-4;
  double l2 = 1e-4;
  std::uint64_t seed = 0;

  void validate() const {
    require(steps >= 1, "schedule needs at least one step");
    require(batch_size >= 1, "batch size must be at least 1");
    require(lr0 > 0.0 && lr_final > 0.0, "learning rates must be positive");
    if (kind == LrKind::cosine) require(lr0 >= lr_final, "cosine schedule needs lr0 >= lr_final");
    require(l2 >= 0.0, "L2 weight must be nonnegative");
  }

  // Cosine decay hits lr0 at step 0 and lr_final at the last step.
  double lr(std::uint64_t step) const {
    if (kind == LrKind::constant || steps == 1) return lr0;
    const double t = static_cast<double>(std::min(step, steps - 1)) / static_cast<double>(steps - 1);
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + std::cos(std::numbers::pi * t));
  }
};

struct StepRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::uint64_t genome_hash = 0;
};

// Optional callbacks. on_checkpoint fires after every `checkpoint_every`
// completed steps with the number of completed steps.
struct TrainObserver {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(std::uint64_t, const SharedParameterStore&)> on_checkpoint;
  std::uint64_t checkpoint_every = 0;
};

// Adds N(0, stddev^2) to every coordinate of the given blocks and the head.
// Block (edge, candidate) at step t draws from stream (noise, t, edge, candidate).
inline void add_langevin_noise(SharedParameterStore& store, const std::vector<BlockId>& blocks, double stddev,
                               std::uint64_t seed, std::uint64_t step) {
  auto perturb = [stddev](Dense& d, CounterRng& rng) {
    for (Eigen::Index i = 0; i < d.w.size(); ++i) d.w.data()[i] += stddev * rng.normal();
    for (Eigen::Index i = 0; i < d.b.size(); ++i) d.b.data()[i] += stddev * rng.normal();
  };
  for (const auto& id : blocks) {
    CounterRng rng(seed, purpose::noise, {step, id.edge, id.candidate});
    auto& b = store.block(id);
    perturb(b.expand, rng);
    perturb(b.project, rng);
  }
  CounterRng rng(seed, purpose::noise, {step, kHeadStreamIndex});
  perturb(store.head(), rng);
}

struct SampledTrainingConfig {
  std::uint64_t steps = 1;
  std::uint64_t seed = 0;  // architecture and noise streams
  std::function<double(std::uint64_t)> lr;
  double l2 = 1e-4;
  double noise_scale = 0.0;  // coordinate noise stddev = noise_scale * sqrt(2 * lr)
  std::uint64_t start = 0;   // first step to run; earlier steps are assumed done
};

// One gradient step per sampled architecture; shared by supernet training
// and SGLD sampling so that SGLD without noise is exactly constant-lr training.
inline void run_sampled_training(SharedParameterStore& store, const SearchSpaceSpec& space,
                                 const SamplingPolicy& policy, BatchStream& data, const SampledTrainingConfig& cfg,
                                 const TrainObserver& observer = {}) {
  for (std::uint64_t t = cfg.start; t < cfg.steps; ++t) {
    const auto genome = sample_architecture(space, policy, cfg.seed, t);
    const auto dag = decode(space, genome);
    const double lr = cfg.lr(t);
    LossAndGrad lg;
    try {
      lg = loss_and_grad(store, dag, data.batch(t), {cfg.l2, true});
    } catch (const Error& e) {
      if (e.category() != ErrorCategory::numeric) throw;
      fail(ErrorCategory::numeric,
           std::string(e.what()) + " (step " + std::to_string(t) + ", genome " + genome.to_string() + ")");
    }
    sgd_step(store, lg.grad, lr);
    if (cfg.noise_scale > 0.0)
      add_langevin_noise(store, active_blocks(dag), cfg.noise_scale * std::sqrt(2.0 * lr), cfg.seed, t);
    if (observer.on_step) observer.on_step({t, lg.loss, lr, genome.hash()});
    if (observer.checkpoint_every > 0 && (t + 1) % observer.checkpoint_every == 0 && observer.on_checkpoint)
      observer.on_checkpoint(t + 1, store);
  }
}

// Hyper-network training: fresh initialization, then `schedule.steps` steps,
// each on one architecture drawn from the sampling policy.
inline SharedParameterStore train_supernet(const SearchSpaceSpec& space, const SamplingPolicy& policy,
                                           BatchStream& data, const TrainSchedule& schedule,
                                           const TrainObserver& observer = {}, const InitConfig& init = {}) {
  schedule.validate();
  check_policy(policy);
  auto store = SharedParameterStore::initialized(space, data.data().num_classes, schedule.seed, init);
  run_sampled_training(store, space, policy, data,
                       {schedule.steps, schedule.seed, [&](std::uint64_t t) { return schedule.lr(t); }, schedule.l2},
                       observer);
  return store;
}

struct SgldConfig {
  double alpha = 2.5e-4;
  std::uint64_t steps = 1;       // T_SGLD
  std::uint64_t epoch_steps = 1; // T_epoch: one snapshot per this many steps
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  double noise_scale = 1.0;      // 1 = Langevin dynamics; 0 = constant-lr SGD continuation
};

inline void check_sgld(const SgldConfig& cfg) {
  require(cfg.alpha > 0.0, "SGLD step size must be positive");
  require(cfg.epoch_steps >= 1 && cfg.steps >= cfg.epoch_steps, "T_SGLD must cover at least one epoch");
  require(cfg.steps % cfg.epoch_steps == 0, "T_SGLD must be divisible by T_epoch");
  require(cfg.noise_scale >= 0.0, "noise scale must be nonnegative");
}

// Advances the chain in `store` from step `start` (a multiple of epoch_steps)
// and hands each snapshot to on_snapshot(index, store), index counting from 1.
inline void run_sgld(SharedParameterStore& store, const SearchSpaceSpec& space, const SamplingPolicy& policy,
                     BatchStream& data, const SgldConfig& cfg,
                     const std::function<void(std::size_t, const SharedParameterStore&)>& on_snapshot,
                     const std::function<void(const StepRecord&)>& on_step = {}, std::uint64_t start = 0) {
  check_sgld(cfg);
  require(start % cfg.epoch_steps == 0 && start <= cfg.steps, "SGLD can only resume at a snapshot boundary");
  TrainObserver obs;
  obs.on_step = on_step;
  obs.checkpoint_every = cfg.epoch_steps;
  obs.on_checkpoint = [&](std::uint64_t done, const SharedParameterStore& s) {
    on_snapshot(static_cast<std::size_t>(done / cfg.epoch_steps), s);
  };
  SampledTrainingConfig run{cfg.steps, cfg.seed, [&](std::uint64_t) { return cfg.alpha; }, cfg.l2, cfg.noise_scale,
                            start};
  run_sampled_training(store, space, policy, data, run, obs);
}

// Runs the Langevin chain from theta_T and snapshots it every epoch_steps
// steps, yielding steps / epoch_steps snapshots.
inline CheckpointSet sgld_sample(const SharedParameterStore& theta_T, const SearchSpaceSpec& space,
                                 const SamplingPolicy& policy, BatchStream& data, const SgldConfig& cfg,
                                 const TrainObserver& observer = {}) {
  CheckpointSet out;
  out.spacing = cfg.epoch_steps;
  SharedParameterStore store = theta_T;
  run_sgld(
      store, space, policy, data, cfg,
      [&](std::size_t k, const SharedParameterStore& s) {
        out.snapshots.push_back(s);
        if (observer.on_checkpoint) observer.on_checkpoint(k * cfg.epoch_steps, s);
      },
      observer.on_step);
  return out;
}

// Trains one fixed architecture on `data` starting from `store`.
inline void train_fixed(SharedParameterStore& store, const SearchSpaceSpec& space, const ArchitectureGenome& genome,
                        BatchStream& data, const TrainSchedule& schedule, const TrainObserver& observer = {}) {
  const auto dag = decode(space, genome);
  const auto h = genome.hash();
  for (std::uint64_t t = 0; t < schedule.steps; ++t) {
    const double lr = schedule.lr(t);
    LossAndGrad lg;
    try {
      lg = loss_and_grad(store, dag, data.batch(t), {schedule.l2, true});
    } catch (const Error& e) {
      if (e.category() != ErrorCategory::numeric) throw;
      fail(ErrorCategory::numeric,
           std::string(e.what()) + " (step " + std::to_string(t) + ", genome " + genome.to_string() + ")");
    }
    sgd_step(store, lg.grad, lr);
    if (observer.on_step) observer.on_step({t, lg.loss, lr, h});
  }
}

struct IndependentResult {
  SharedParameterStore weights;
  double val_accuracy = 0.0;
};

// Ground truth: trains the architecture alone from a fresh initialization.
inline IndependentResult train_independent(const SearchSpaceSpec& space, const ArchitectureGenome& genome,
                                           BatchStream& data, const Dataset& val, const TrainSchedule& schedule,
                                           const InitConfig& init = {}, const TrainObserver& observer = {}) {
  schedule.validate();
  space.validate(genome);
  IndependentResult r{SharedParameterStore::initialized(space, data.data().num_classes, schedule.seed, init), 0.0};
  train_fixed(r.weights, space, genome, data, schedule, observer);
  r.val_accuracy = accuracy(r.weights, space, genome, val);
  return r;
}

struct FineTuneConfig {
  double lr = 2.5e-4;
  std::uint64_t steps = 0;
  double l2 = 1e-4;
};

// Warm start from the shared parameters; theta_T is left untouched.
inline double fine_tune(const SharedParameterStore& theta_T, const SearchSpaceSpec& space,
                        const ArchitectureGenome& genome, BatchStream& data, const Dataset& val,
                        const FineTuneConfig& cfg) {
  require(cfg.lr > 0.0, "fine-tune learning rate must be positive");
  space.validate(genome);
  if (cfg.steps == 0) return accuracy(theta_T, space, genome, val);
  SharedParameterStore local = theta_T;
  TrainSchedule s{cfg.steps, data.batch_size(), LrKind::constant, cfg.lr, cfg.lr, cfg.l2, 0};
  train_fixed(local, space, genome, data, s);
  return accuracy(local, space, genome, val);
}

}  // namespace topo_nas
