#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"
#include "topo_nas/backend.hpp"
#include "topo_nas/checkpoint.hpp"

using namespace topo_nas;
using namespace topo_nas::testing;

namespace {

struct Instance {
  SearchSpaceSpec space;
  SharedParameterStore store;
  ArchitectureGenome genome;
  Batch batch;
};

Instance make_instance(std::uint64_t seed, Aggregation agg = Aggregation::mean) {
  Instance in;
  in.space = tiny_space(seed % 2 ? std::vector<std::size_t>{4} : std::vector<std::size_t>{2, 2}, 3, agg);
  in.store = SharedParameterStore::initialized(in.space, 3, seed, {0.7, 0.9});
  jitter_biases(in.store, seed);
  in.genome = random_genome(in.space, seed);
  in.batch = random_batch(in.space.input_width(), 5, 3, seed);
  return in;
}

double loss_at(const Instance& in, double l2) {
  return loss_and_grad(in.store, decode(in.space, in.genome), in.batch, {l2, true}).loss;
}

// Max relative error between analytic and central-difference gradients over
// every coordinate of one dense layer.
double check_dense(Instance& in, Dense& param, const Dense& grad, double l2, double eps) {
  double worst = 0.0;
  auto visit = [&](double* p, const double* g, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = loss_at(in, l2);
      p[i] = saved - eps;
      const double down = loss_at(in, l2);
      p[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(1e-7, std::abs(fd) + std::abs(g[i])));
    }
  };
  visit(param.w.data(), grad.w.data(), param.w.size());
  visit(param.b.data(), grad.b.data(), param.b.size());
  return worst;
}

}  // namespace

TEST(Backend, ForwardMatchesLongHandOracle) {
  for (std::uint64_t s = 0; s < 10; ++s)
    for (auto agg : {Aggregation::mean, Aggregation::sum}) {
      auto in = make_instance(s, agg);
      const Matrix z = logits(in.store, decode(in.space, in.genome), in.batch.inputs);
      const auto ref = naive_logits(in.store, in.space, in.genome, in.batch.inputs);
      for (Eigen::Index j = 0; j < z.cols(); ++j)
        for (Eigen::Index r = 0; r < z.rows(); ++r)
          EXPECT_NEAR(z(r, j), ref[static_cast<std::size_t>(j)][static_cast<std::size_t>(r)], 1e-9);
    }
}

TEST(Backend, ZeroStoreGivesUniformSoftmax) {
  const auto space = tiny_space();
  const SharedParameterStore zero(space, 4);
  const auto batch = random_batch(space.input_width(), 7, 4, 1);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto dag = decode(space, random_genome(space, s));
    EXPECT_TRUE(logits(zero, dag, batch.inputs).isZero(0.0));
    EXPECT_NEAR(loss_and_grad(zero, dag, batch, {0.0, true}).loss, std::log(4.0), 1e-12);
  }
}

TEST(Backend, IdentityChainAppliesHeadToInputs) {
  const auto space = build_space({4}, {3});
  auto store = SharedParameterStore::initialized(space, 3, 5);
  jitter_biases(store, 5);
  ArchitectureGenome g = stem_chain_genome(space);
  for (std::size_t i = 0; i < space.edges.size(); ++i)
    if (space.edges[i].kind == EdgeKind::stem)
      for (std::size_t c = 0; c < space.edges[i].candidates.size(); ++c)
        if (space.edges[i].candidates[c].kind == OpKind::identity) g.choices[i] = static_cast<std::uint16_t>(c);
  const auto batch = random_batch(3, 4, 3, 2);
  const Matrix z = logits(store, decode(space, g), batch.inputs);
  Matrix expect = store.head().input_scale() * (store.head().w * batch.inputs);
  expect.colwise() += store.head().b;
  EXPECT_TRUE(z.isApprox(expect, 1e-14));
}

TEST(Backend, FiniteDifferenceAgreement) {
  constexpr double eps = 1e-4;
  double worst = 0.0;
  std::size_t used = 0;
  for (std::uint64_t s = 100; used < 20; ++s) {
    auto in = make_instance(s);
    if (relu_margin(in.store, in.space, in.genome, in.batch.inputs) < kKinkMargin) continue;
    ++used;
    const double l2 = 1e-3;
    const auto lg = loss_and_grad(in.store, decode(in.space, in.genome), in.batch, {l2, true});
    for (const auto& [id, g] : lg.grad.blocks) {
      worst = std::max(worst, check_dense(in, in.store.block(id).expand, g.expand, l2, eps));
      worst = std::max(worst, check_dense(in, in.store.block(id).project, g.project, l2, eps));
    }
    worst = std::max(worst, check_dense(in, in.store.head(), lg.grad.head, l2, eps));
  }
  EXPECT_LE(worst, 1e-3);
}

TEST(Backend, GradientLocality) {
  const auto space = build_space({2, 2, 4}, doubling_widths(3, 4));
  auto store = SharedParameterStore::initialized(space, 4, 3);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto g = random_genome(space, s);
    const auto dag = decode(space, g);
    const auto batch = random_batch(space.input_width(), 6, 4, s);
    const auto lg = loss_and_grad(store, dag, batch);
    std::set<BlockId> active;
    for (std::size_t e = 0; e < space.edges.size(); ++e)
      if (space.edges[e].candidates[g.choices[e]].kind == OpKind::transform)
        active.insert({static_cast<std::uint32_t>(e), g.choices[e]});
    std::set<BlockId> touched;
    for (const auto& [id, grad] : lg.grad.blocks) touched.insert(id);
    EXPECT_EQ(touched, active);

    std::map<BlockId, std::uint64_t> before;
    for (const auto& id : store.block_ids()) before[id] = store.block_hash(id);
    sgd_step(store, lg.grad, 0.05);
    for (const auto& id : store.block_ids())
      if (!active.count(id)) EXPECT_EQ(store.block_hash(id), before[id]);
  }
}

TEST(Backend, DuplicatedRowsKeepLoss) {
  auto in = make_instance(4);
  Batch one;
  one.inputs = in.batch.inputs.leftCols(1);
  one.labels = {in.batch.labels[0]};
  Batch many;
  many.inputs = one.inputs.replicate(1, 6);
  many.labels.assign(6, one.labels[0]);
  const auto dag = decode(in.space, in.genome);
  EXPECT_NEAR(loss_and_grad(in.store, dag, one, {0.0, true}).loss, loss_and_grad(in.store, dag, many, {0.0, true}).loss,
              1e-12);
}

TEST(Backend, DeterministicLoss) {
  auto in = make_instance(8);
  const auto dag = decode(in.space, in.genome);
  const auto a = loss_and_grad(in.store, dag, in.batch);
  const auto b = loss_and_grad(in.store, dag, in.batch);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad.squared_norm(), b.grad.squared_norm());
}

TEST(Backend, SgdZeroStepOnlyBumpsVersion) {
  auto in = make_instance(9);
  const auto lg = loss_and_grad(in.store, decode(in.space, in.genome), in.batch);
  const auto h = in.store.content_hash();
  const auto v = in.store.version();
  sgd_step(in.store, lg.grad, 0.0);
  EXPECT_EQ(in.store.content_hash(), h);
  EXPECT_EQ(in.store.version(), v + 1);
}

TEST(Backend, StaleGradientRejected) {
  auto in = make_instance(10);
  const auto lg = loss_and_grad(in.store, decode(in.space, in.genome), in.batch);
  sgd_step(in.store, lg.grad, 0.01);
  try {
    sgd_step(in.store, lg.grad, 0.01);
    FAIL() << "stale gradient accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::stale_gradient);
  }
}

// With the data term switched off the loss is 0.5*l2*||theta||^2, so every
// step multiplies the active parameters by (1 - alpha*l2).
TEST(Backend, L2OnlyStepsFollowClosedForm) {
  auto in = make_instance(11);
  const auto dag = decode(in.space, in.genome);
  const double alpha = 0.1, l2 = 0.5;
  const auto ids = active_blocks(dag);
  ASSERT_FALSE(ids.empty());
  const double w0 = in.store.block(ids[0]).expand.w(0, 0);
  const double h0 = in.store.head().w(0, 0);
  const int steps = 7;
  for (int t = 0; t < steps; ++t) sgd_step(in.store, loss_and_grad(in.store, dag, in.batch, {l2, false}).grad, alpha);
  EXPECT_NEAR(in.store.block(ids[0]).expand.w(0, 0), w0 * std::pow(1.0 - alpha * l2, steps), 1e-14);
  EXPECT_NEAR(in.store.head().w(0, 0), h0 * std::pow(1.0 - alpha * l2, steps), 1e-14);
}

TEST(Backend, OneBlockPerTransformCandidate) {
  const auto space = build_space({2, 2, 4, 8, 4}, doubling_widths(5, 8));
  const SharedParameterStore store(space, 4);
  std::size_t transforms = 0;
  for (const auto& e : space.edges)
    for (const auto& c : e.candidates) transforms += c.kind == OpKind::transform;
  EXPECT_EQ(store.num_blocks(), transforms);
}

TEST(Backend, RejectsBadLabels) {
  auto in = make_instance(12);
  in.batch.labels[0] = 3;
  EXPECT_THROW(loss_and_grad(in.store, decode(in.space, in.genome), in.batch), Error);
}

TEST(Checkpoint, RoundTripAndSpaceCheck) {
  auto in = make_instance(13);
  const auto dir = scratch_dir("ckpt");
  const auto path = (dir / "a.ckpt").string();
  save_checkpoint(path, in.store, 42, {1, in.space.hash(), "supernet", "b"});
  const auto ck = load_checkpoint(path, in.space);
  EXPECT_EQ(ck.step, 42u);
  EXPECT_EQ(ck.store.content_hash(), in.store.content_hash());
  EXPECT_EQ(ck.tag.stage, "supernet");

  const auto other = tiny_space({2, 2}, 5);
  try {
    load_checkpoint(path, other);
    FAIL() << "mismatched space accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::mismatch);
  }

  // Flip one byte in the payload.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    char c;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x5a);
    f.seekp(100);
    f.write(&c, 1);
  }
  EXPECT_THROW(load_checkpoint(path, in.space), Error);
  std::filesystem::remove_all(dir);
}
