// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   topo_nas_acceptance --config configs/default.ini --work <dir> [--only 1,2,...] [--seeds 5]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "test_util.hpp"
#include "topo_nas/evolution.hpp"
#include "topo_nas/pipeline.hpp"

using namespace topo_nas;
using namespace topo_nas::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

SearchSpaceSpec default_space() { return build_space({2, 2, 4, 8, 4}, doubling_widths(5, 8)); }

// --- 1 -----------------------------------------------------------------------

Outcome topology_count_check() {
  const auto space = default_space();
  const auto n = topology_count(space);
  const bool ok = n == (BigCount(1) << 35) && n == BigCount(34359738368ULL);
  return {ok, "topologies=" + n.str()};
}

// --- 2 -----------------------------------------------------------------------

Outcome sampler_check() {
  const auto space = default_space();
  const SamplingPolicy policy{0.6};
  constexpr std::size_t kSamples = 100000;
  std::vector<std::size_t> none(space.edges.size(), 0);
  for (std::size_t t = 0; t < kSamples; ++t) {
    const auto g = sample_architecture(space, policy, 31, t);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (space.edges[i].kind == EdgeKind::branch && g.choices[i] == space.edges[i].none_index()) ++none[i];
  }
  double worst_none = 0.0;
  for (std::size_t i = 0; i < space.edges.size(); ++i)
    if (space.edges[i].kind == EdgeKind::branch)
      worst_none = std::max(worst_none, std::abs(static_cast<double>(none[i]) / kSamples - 0.6));

  const auto small = tiny_space({4}, 4);
  constexpr std::size_t kMc = 1000000;
  double sum = 0.0;
  for (std::size_t t = 0; t < kMc; ++t) sum += genome_cost(small, sample_architecture(small, policy, 32, t));
  const double analytic = expected_cost(small, policy);
  const double rel = std::abs(sum / kMc - analytic) / analytic;

  double round_trip = 0.0;
  for (int i = 0; i <= 20; ++i) {
    const double p = i / 20.0;
    round_trip = std::max(round_trip, std::abs(calibrate_p_drop(space, expected_cost(space, {p})) - p));
  }
  const bool ok = worst_none <= 0.01 && rel <= 0.005 && round_trip <= 1e-9;
  return {ok, "max|none-0.6|=" + fmt(worst_none) + " cost_rel_err=" + fmt(rel) + " calib_err=" + fmt(round_trip)};
}

// --- 3 -----------------------------------------------------------------------

double loss_at(const SharedParameterStore& s, const SearchSpaceSpec& space, const ArchitectureGenome& g, const Batch& b,
               double l2) {
  return loss_and_grad(s, decode(space, g), b, {l2, true}).loss;
}

Outcome gradient_check() {
  constexpr double eps = 1e-4, l2 = 1e-3;
  double worst = 0.0;
  std::size_t used = 0, redrawn = 0;
  for (std::uint64_t s = 0; used < 20; ++s) {
    const auto space = tiny_space(s % 2 ? std::vector<std::size_t>{4} : std::vector<std::size_t>{2, 2}, 3);
    auto store = SharedParameterStore::initialized(space, 3, 200 + s, {0.7, 0.9});
    jitter_biases(store, 200 + s);
    const auto g = random_genome(space, 200 + s);
    const auto batch = random_batch(space.input_width(), 5, 3, 200 + s);
    if (relu_margin(store, space, g, batch.inputs) < kKinkMargin) {
      ++redrawn;
      continue;
    }
    ++used;
    const auto lg = loss_and_grad(store, decode(space, g), batch, {l2, true});
    auto visit = [&](Dense& p, const Dense& grad) {
      auto coord = [&](double* x, double gx) {
        const double saved = *x;
        *x = saved + eps;
        const double up = loss_at(store, space, g, batch, l2);
        *x = saved - eps;
        const double down = loss_at(store, space, g, batch, l2);
        *x = saved;
        const double fd = (up - down) / (2 * eps);
        worst = std::max(worst, std::abs(fd - gx) / std::max(1e-7, std::abs(fd) + std::abs(gx)));
      };
      for (Eigen::Index i = 0; i < p.w.size(); ++i) coord(p.w.data() + i, grad.w.data()[i]);
      for (Eigen::Index i = 0; i < p.b.size(); ++i) coord(p.b.data() + i, grad.b.data()[i]);
    };
    for (const auto& [id, gb] : lg.grad.blocks) {
      visit(store.block(id).expand, gb.expand);
      visit(store.block(id).project, gb.project);
    }
    visit(store.head(), lg.grad.head);
  }

  const auto space = build_space({2, 2, 4}, doubling_widths(3, 4));
  auto store = SharedParameterStore::initialized(space, 4, 3);
  std::size_t leaks = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto g = random_genome(space, 500 + s);
    const auto dag = decode(space, g);
    const auto lg = loss_and_grad(store, dag, random_batch(space.input_width(), 6, 4, s));
    std::set<BlockId> active;
    for (std::size_t e = 0; e < space.edges.size(); ++e)
      if (space.edges[e].candidates[g.choices[e]].kind == OpKind::transform)
        active.insert({static_cast<std::uint32_t>(e), g.choices[e]});
    std::map<BlockId, std::uint64_t> before;
    for (const auto& id : store.block_ids()) before[id] = store.block_hash(id);
    for (const auto& [id, gb] : lg.grad.blocks) leaks += !active.count(id);
    sgd_step(store, lg.grad, 0.05);
    for (const auto& id : store.block_ids()) leaks += !active.count(id) && store.block_hash(id) != before[id];
  }
  return {worst <= 1e-3 && leaks == 0, "max_rel_err=" + fmt(worst) + " instances=" + std::to_string(used) +
                                             " redrawn_near_kink=" + std::to_string(redrawn) + " inactive_writes=" + std::to_string(leaks)};
}

// --- 4 -----------------------------------------------------------------------

Outcome sgld_check() {
  // Frozen-gradient harness: one scalar weight, no data term, no decay.
  const auto space = build_space({4}, {1}, CatalogSpec{{1}, {KernelTag::small}});
  auto store = SharedParameterStore(space, 2);
  const auto dag = decode(space, stem_chain_genome(space, 0));
  const auto blocks = active_blocks(dag);
  const Batch batch = random_batch(1, 1, 2, 1);
  const double alpha = 2.5e-4;
  constexpr std::uint64_t kSteps = 100000;
  double sum = 0.0, sq = 0.0;
  for (std::uint64_t t = 0; t < kSteps; ++t) {
    const double before = store.block(blocks[0]).expand.w(0, 0);
    sgd_step(store, loss_and_grad(store, dag, batch, {0.0, false}).grad, alpha);
    add_langevin_noise(store, blocks, std::sqrt(2.0 * alpha), 42, t);
    const double d = store.block(blocks[0]).expand.w(0, 0) - before;
    sum += d;
    sq += d * d;
  }
  const double mean = sum / kSteps, var = sq / kSteps - mean * mean;
  const bool moments = std::abs(mean) < 3.0 * std::sqrt(2.0 * alpha / kSteps) && std::abs(var - 2 * alpha) <= 0.02 * 2 * alpha;

  const auto small = tiny_space();
  const auto data = make_dataset({DatasetKind::gaussian_mixture, 3, 96, 32, small.input_width(), 4.0, 3, 16, ""}, 7);
  BatchStream s1(data.train, 32, 8);
  const auto theta = train_supernet(small, {0.6}, s1, {64, 32, LrKind::cosine, 0.1, 0.01, 1e-4, 8});
  BatchStream s2(data.train, 32, 99);
  const auto set = sgld_sample(theta, small, {0.6}, s2, {0.01, 48, 16, 1e-4, 99, 0.0});
  BatchStream s3(data.train, 32, 99);
  auto plain = theta;
  std::vector<std::uint64_t> hashes;
  TrainObserver obs;
  obs.checkpoint_every = 16;
  obs.on_checkpoint = [&](std::uint64_t, const SharedParameterStore& s) { hashes.push_back(s.content_hash()); };
  run_sampled_training(plain, small, {0.6}, s3, {48, 99, [](std::uint64_t) { return 0.01; }, 1e-4}, obs);
  bool bitwise = hashes.size() == set.size();
  for (std::size_t k = 0; bitwise && k < hashes.size(); ++k) bitwise = hashes[k] == set.snapshots[k].content_hash();
  return {moments && bitwise, "var/2a=" + fmt(var / (2 * alpha)) + " mean=" + fmt(mean) +
                                  " noiseless_equals_sgd=" + (bitwise ? "yes" : "no")};
}

// --- 5 -----------------------------------------------------------------------

double brute_tau(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  long s = 0;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const long x = (a[i] < a[j]) - (a[i] > a[j]);
      const long y = (b[i] < b[j]) - (b[i] > b[j]);
      s += x * y;
    }
  return 2.0 * static_cast<double>(s) / static_cast<double>(n * (n - 1));
}

Outcome estimator_check() {
  std::size_t perms = 0, tau_bad = 0;
  for (std::size_t n = 2; n <= 8; ++n) {
    std::vector<std::size_t> id(n), p(n);
    for (std::size_t i = 0; i < n; ++i) id[i] = p[i] = i;
    do {
      ++perms;
      tau_bad += kendall_tau(id, p) != brute_tau(id, p);
    } while (std::next_permutation(p.begin(), p.end()));
  }

  const auto space = tiny_space({2, 2}, 3);
  const auto data = make_dataset({DatasetKind::gaussian_mixture, 3, 64, 64, space.input_width(), 4.0, 3, 16, ""}, 5);
  CheckpointSet set;
  for (std::uint64_t k = 0; k < 4; ++k) {
    auto s = SharedParameterStore::initialized(space, 3, 60 + k, {0.8, 0.8});
    jitter_biases(s, 60 + k);
    set.snapshots.push_back(std::move(s));
  }
  CheckpointSet one;
  one.snapshots.push_back(set.snapshots[0]);
  CheckpointSet reversed;
  reversed.snapshots.assign(set.snapshots.rbegin(), set.snapshots.rend());
  std::size_t collapse_bad = 0, order_bad = 0;
  for (std::uint64_t t = 0; t < 10; ++t) {
    const auto g = random_genome(space, 70 + t);
    const double single = accuracy(set.snapshots[0], space, g, data.val);
    collapse_bad += score_expectation(one, space, g, data.val) != single;
    collapse_bad += parameter_expectation(one, space, g, data.val) != single;
    order_bad += score_expectation(set, space, g, data.val) != score_expectation(reversed, space, g, data.val);
    order_bad += std::abs(parameter_expectation(set, space, g, data.val) -
                          parameter_expectation(reversed, space, g, data.val)) > 0.0;
  }
  const bool ok = tau_bad == 0 && collapse_bad == 0 && order_bad == 0;
  return {ok, "permutations=" + std::to_string(perms) + " tau_mismatch=" + std::to_string(tau_bad) +
                  " k1_mismatch=" + std::to_string(collapse_bad) + " order_mismatch=" + std::to_string(order_bad)};
}

// --- 6 -----------------------------------------------------------------------

Scorer additive_scorer(const SearchSpaceSpec& space, std::uint64_t seed) {
  std::vector<std::vector<double>> v;
  for (std::size_t e = 0; e < space.edges.size(); ++e) {
    CounterRng rng(seed, purpose::ground_truth, {e});
    std::vector<double> row;
    for (std::size_t c = 0; c < space.edges[e].candidates.size(); ++c) row.push_back(rng.uniform());
    v.push_back(row);
  }
  return [v](const ArchitectureGenome& g) {
    double s = 0.0;
    for (std::size_t e = 0; e < g.size(); ++e) s += v[e][g.choices[e]];
    return s;
  };
}

Outcome nsga_check() {
  const auto space = build_space({5}, {4}, CatalogSpec{{1}, {KernelTag::small}});
  std::vector<ArchitectureGenome> all;
  ArchitectureGenome g;
  g.choices.assign(space.edges.size(), 0);
  for (bool more = true; more;) {
    all.push_back(g);
    more = false;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (++g.choices[i] < space.edges[i].candidates.size()) {
        more = true;
        break;
      }
      g.choices[i] = 0;
    }
  }
  std::size_t matched = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto scorer = additive_scorer(space, 100 + seed);
    std::vector<Individual> pts;
    for (const auto& x : all) pts.push_back({x, genome_cost(space, x), scorer(x)});
    std::set<std::pair<double, double>> truth;
    for (const auto& a : pts) {
      bool dominated = false;
      for (const auto& b : pts) dominated = dominated || dominates(b, a);
      if (!dominated) truth.insert({a.cost, a.score});
    }
    SearchConfig cfg;
    cfg.seed = seed;
    std::set<std::pair<double, double>> got;
    for (const auto& i : search(space, scorer, cfg).archive) got.insert({i.cost, i.score});
    matched += got == truth;
  }
  const auto big = default_space();
  const auto r = search(big, additive_scorer(big, 1), SearchConfig{});
  const bool ok = matched == 5 && r.evaluations == 990 && r.scorer_calls + r.memo_hits == 990;
  return {ok, "fronts_matched=" + std::to_string(matched) + "/5 space_size=" + std::to_string(all.size()) +
                  " evaluations=" + std::to_string(r.evaluations)};
}

// --- 7 and 8 -----------------------------------------------------------------

std::vector<TauRow> read_tau(const fs::path& path) {
  const auto a = read_text_artifact(path);
  std::vector<TauRow> rows;
  for (const auto& r : csv_rows(a, "estimator,checkpoint,tau", path)) rows.push_back({r[0], r[1], std::stod(r[2])});
  return rows;
}

// Drops checkpoints of a finished experiment; the tables stay.
void prune_checkpoints(const fs::path& dir) {
  if (!fs::exists(dir)) return;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ckpt") fs::remove(e.path());
}

Outcome ranking_check(const ExperimentConfig& base, const fs::path& work, std::size_t seeds) {
  std::size_t wins = 0, tail_wins = 0;
  std::ostringstream detail;
  for (std::uint64_t s = 1; s <= seeds; ++s) {
    auto cfg = base;
    cfg.seed = s;
    const auto dir = work / ("rank_seed" + std::to_string(s));
    fs::remove_all(dir);
    const auto t0 = std::chrono::steady_clock::now();
    run_pipeline(cfg, {dir, false, nullptr}, stages_through(Stage::rank));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto rows = read_tau(dir / "rank" / "tau.csv");
    const double single = *find_tau(rows, "single", "median");
    const double ss = *find_tau(rows, "sgld_acc", "-"), sp = *find_tau(rows, "sgld_param", "-");
    const double ts = *find_tau(rows, "tail_acc", "-"), tp = *find_tau(rows, "tail_param", "-");
    const double ft = *find_tau(rows, "finetune", "-");
    wins += std::max(ss, sp) >= single;
    tail_wins += std::max(ts, tp) >= single;
    std::cout << "  seed " << s << ": single=" << fmt(single, 4) << " sgld_acc=" << fmt(ss, 4)
              << " sgld_param=" << fmt(sp, 4) << " tail_acc=" << fmt(ts, 4) << " tail_param=" << fmt(tp, 4)
              << " finetune=" << fmt(ft, 4) << " (" << fmt(secs, 4) << " s)" << std::endl;
    prune_checkpoints(dir);
  }
  detail << "sgld_wins=" << wins << "/" << seeds << " tail_wins=" << tail_wins << "/" << seeds;
  return {wins >= (seeds * 4 + 4) / 5, detail.str()};
}

Outcome determinism_check(const ExperimentConfig& cfg, const fs::path& work) {
  std::string tau[2], archive[2];
  for (int r = 0; r < 2; ++r) {
    const auto dir = work / ("run_all_" + std::to_string(r));
    fs::remove_all(dir);
    run_pipeline(cfg, {dir, false, nullptr});
    auto slurp = [](const fs::path& p) {
      std::ifstream in(p, std::ios::binary);
      std::ostringstream os;
      os << in.rdbuf();
      return os.str();
    };
    tau[r] = slurp(dir / "rank" / "tau.csv");
    archive[r] = slurp(dir / "search" / "archive.csv");
    prune_checkpoints(dir);
  }
  const bool ok = !tau[0].empty() && !archive[0].empty() && tau[0] == tau[1] && archive[0] == archive[1];
  return {ok, std::string("tau_identical=") + (tau[0] == tau[1] ? "yes" : "no") +
                  " archive_identical=" + (archive[0] == archive[1] ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config_path, work = "acceptance_work", only;
  std::size_t seeds = 5;
  app.add_option("--config", config_path, "experiment config for the ranking and determinism runs")
      ->required()
      ->check(CLI::ExistingFile);
  app.add_option("--work", work, "scratch directory for experiment runs");
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--seeds", seeds, "experiment seeds for the ranking criterion");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  for (const auto& p : detail::split(only, ',')) selected.insert(std::stoi(p));
  const auto cfg = load_config(config_path);

  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "topology count", 1, topology_count_check},
      {2, "sampler fidelity", 30, sampler_check},
      {3, "gradient correctness", 120, gradient_check},
      {4, "sgld noise statistics", 60, sgld_check},
      {5, "estimator algebra", 60, estimator_check},
      {6, "nsga-ii correctness", 600, nsga_check},
      {7, "ranking fidelity", 7200, [&] { return ranking_check(cfg, work, seeds); }},
      {8, "end-to-end determinism", 0, [&] { return determinism_check(cfg, work); }},
  };

  bool all = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s <= 0 || secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    all = all && pass;
    std::cout << (pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << " time=" << fmt(secs, 4)
              << "s" << (in_time ? "" : " (over budget " + fmt(c.budget_s) + "s)") << std::endl;
  }
  return all ? 0 : 1;
}
