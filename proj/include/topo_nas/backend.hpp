#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "topo_nas/errors.hpp"
#include "topo_nas/hash.hpp"
#include "topo_nas/rng.hpp"
#include "topo_nas/search_space.hpp"

namespace topo_nas {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct BlockId {
  std::uint32_t edge = 0;
  std::uint32_t candidate = 0;
  friend auto operator<=>(const BlockId&, const BlockId&) = default;
};

inline constexpr std::uint64_t kHeadStreamIndex = ~std::uint64_t{0};

// y = w * x / sqrt(fan_in) + b; the fan-in factor keeps step sizes width-independent.
struct Dense {
  Matrix w;
  Vector b;

  double input_scale() const { return 1.0 / std::sqrt(static_cast<double>(w.cols())); }

  double squared_norm() const { return w.squaredNorm() + b.squaredNorm(); }
  std::size_t size() const { return static_cast<std::size_t>(w.size() + b.size()); }
  void axpy(double a, const Dense& x) {
    w += a * x.w;
    b += a * x.b;
  }
  void scale(double a) {
    w *= a;
    b *= a;
  }
  void hash_into(Fnv1a& h) const {
    h.bytes(w.data(), sizeof(double) * static_cast<std::size_t>(w.size()));
    h.bytes(b.data(), sizeof(double) * static_cast<std::size_t>(b.size()));
  }
  static Dense zeros_like(const Dense& d) { return {Matrix::Zero(d.w.rows(), d.w.cols()), Vector::Zero(d.b.size())}; }
};

// Parameters of one linear-bottleneck analogue: in -> hidden (ReLU) -> out,
// added onto the zero-padded input.
struct ParameterBlock {
  Dense expand;
  Dense project;

  double squared_norm() const { return expand.squared_norm() + project.squared_norm(); }
  std::size_t size() const { return expand.size() + project.size(); }
  void axpy(double a, const ParameterBlock& x) {
    expand.axpy(a, x.expand);
    project.axpy(a, x.project);
  }
  void scale(double a) {
    expand.scale(a);
    project.scale(a);
  }
  void hash_into(Fnv1a& h) const {
    expand.hash_into(h);
    project.hash_into(h);
  }
  static ParameterBlock zeros_like(const ParameterBlock& p) {
    return {Dense::zeros_like(p.expand), Dense::zeros_like(p.project)};
  }
};

struct InitConfig {
  // Uniform bounds of the output layers, relative to unit variance.
  double project_gain = 0.2;
  double head_gain = 0.1;
};

// The hyper-network parameters: one block per (edge, transform candidate)
// plus the classifier head shared by every architecture.
class SharedParameterStore {
 public:
  SharedParameterStore() = default;

  // Zero-valued store with the right shapes.
  SharedParameterStore(const SearchSpaceSpec& space, std::size_t num_classes)
      : space_hash_(space.hash()), num_classes_(num_classes) {
    require(num_classes >= 2, "at least two classes are required");
    index_.resize(space.edges.size());
    for (std::size_t e = 0; e < space.edges.size(); ++e) {
      const auto& edge = space.edges[e];
      index_[e].assign(edge.candidates.size(), -1);
      const auto in = space.nodes[edge.src].width;
      const auto out = space.nodes[edge.dst].width;
      for (std::size_t c = 0; c < edge.candidates.size(); ++c) {
        const auto& op = edge.candidates[c];
        if (op.kind != OpKind::transform) continue;
        const auto hidden = op.hidden_width(in);
        index_[e][c] = static_cast<std::int32_t>(blocks_.size());
        ids_.push_back({static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(c)});
        blocks_.push_back({{Matrix::Zero(hidden, in), Vector::Zero(hidden)},
                           {Matrix::Zero(out, hidden), Vector::Zero(out)}});
      }
    }
    head_ = {Matrix::Zero(num_classes, space.output_width()), Vector::Zero(num_classes)};
  }

  // Scaled-uniform initialization: bound sqrt(6 / fan_in) ahead of the ReLU,
  // project_gain * sqrt(3 / fan_in) on output layers, zero biases. Each block
  // draws from its own (init, edge, candidate) stream.
  static SharedParameterStore initialized(const SearchSpaceSpec& space, std::size_t num_classes,
                                          std::uint64_t seed, const InitConfig& init = {}) {
    SharedParameterStore s(space, num_classes);
    auto fill = [](Matrix& m, double bound, CounterRng& rng) {
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-bound, bound);
    };
    for (std::size_t k = 0; k < s.ids_.size(); ++k) {
      CounterRng rng(seed, purpose::init, {s.ids_[k].edge, s.ids_[k].candidate});
      auto& blk = s.blocks_[k];
      fill(blk.expand.w, std::sqrt(6.0), rng);
      fill(blk.project.w, init.project_gain * std::sqrt(3.0), rng);
    }
    CounterRng rng(seed, purpose::init, {kHeadStreamIndex});
    fill(s.head_.w, init.head_gain * std::sqrt(3.0), rng);
    return s;
  }

  std::uint64_t space_hash() const noexcept { return space_hash_; }
  std::uint64_t version() const noexcept { return version_; }
  void set_version(std::uint64_t v) noexcept { version_ = v; }
  void bump_version() noexcept { ++version_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t num_blocks() const noexcept { return blocks_.size(); }
  const std::vector<BlockId>& block_ids() const noexcept { return ids_; }

  bool has_block(BlockId id) const noexcept {
    return id.edge < index_.size() && id.candidate < index_[id.edge].size() &&
           index_[id.edge][id.candidate] >= 0;
  }

  const ParameterBlock& block(BlockId id) const { return blocks_.at(slot(id)); }
  ParameterBlock& block(BlockId id) { return blocks_.at(slot(id)); }
  const Dense& head() const noexcept { return head_; }
  Dense& head() noexcept { return head_; }

  std::size_t parameter_count() const {
    std::size_t n = head_.size();
    for (const auto& b : blocks_) n += b.size();
    return n;
  }

  std::uint64_t block_hash(BlockId id) const {
    Fnv1a h;
    block(id).hash_into(h);
    return h.digest();
  }

  // Hash over every parameter byte (not the version counter).
  std::uint64_t content_hash() const {
    Fnv1a h;
    h.value(space_hash_);
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      h.value(ids_[k].edge).value(ids_[k].candidate);
      blocks_[k].hash_into(h);
    }
    head_.hash_into(h);
    return h.digest();
  }

 private:
  std::size_t slot(BlockId id) const {
    if (!has_block(id))
      fail(ErrorCategory::invalid_argument, "no parameter block for edge " + std::to_string(id.edge) +
                                                " candidate " + std::to_string(id.candidate));
    return static_cast<std::size_t>(index_[id.edge][id.candidate]);
  }

  std::uint64_t space_hash_ = 0;
  std::size_t num_classes_ = 0;
  std::uint64_t version_ = 0;
  std::vector<std::vector<std::int32_t>> index_;
  std::vector<BlockId> ids_;
  std::vector<ParameterBlock> blocks_;
  Dense head_;
};

// Features are stored one sample per column (width x B).
struct Batch {
  Matrix inputs;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

struct ForwardCache {
  std::vector<Matrix> nodes;   // node values, width x B
  std::vector<Matrix> pre;     // per op: pre-activation of the hidden layer (empty for identity)
  std::vector<Matrix> hidden;  // per op: ReLU output
  Matrix logits;               // classes x B
};

inline void check_dag(const SharedParameterStore& store, const DecodedDag& dag, const Matrix& inputs) {
  if (dag.widths.empty() || static_cast<std::size_t>(inputs.rows()) != dag.widths.front())
    fail(ErrorCategory::mismatch, "input width does not match node 0");
  if (static_cast<std::size_t>(store.head().w.cols()) != dag.widths.back())
    fail(ErrorCategory::mismatch, "classifier head width does not match the output node");
  for (const auto& op : dag.ops) {
    if (op.op.kind == OpKind::identity && op.in_width != op.out_width)
      fail(ErrorCategory::mismatch, "identity edge joins nodes of different width");
  }
}

inline ForwardCache forward(const SharedParameterStore& store, const DecodedDag& dag, const Matrix& inputs) {
  check_dag(store, dag, inputs);
  const auto B = inputs.cols();
  ForwardCache c;
  c.nodes.resize(dag.num_nodes());
  c.pre.resize(dag.ops.size());
  c.hidden.resize(dag.ops.size());
  c.nodes[0] = inputs;
  for (std::size_t j = 1; j < dag.num_nodes(); ++j)
    c.nodes[j] = Matrix::Zero(static_cast<Eigen::Index>(dag.widths[j]), B);

  for (std::size_t k = 0; k < dag.ops.size(); ++k) {
    const auto& op = dag.ops[k];
    const Matrix& x = c.nodes[op.src];
    Matrix& y = c.nodes[op.dst];
    if (op.op.kind == OpKind::identity) {
      y += op.weight * x;
      continue;
    }
    const auto& blk = store.block({static_cast<std::uint32_t>(op.edge), static_cast<std::uint32_t>(op.candidate)});
    c.pre[k].noalias() = blk.expand.input_scale() * (blk.expand.w * x);
    c.pre[k].colwise() += blk.expand.b;
    c.hidden[k] = c.pre[k].cwiseMax(0.0);
    y.topRows(x.rows()) += op.weight * x;
    y.noalias() += (op.weight * blk.project.input_scale()) * (blk.project.w * c.hidden[k]);
    y.colwise() += op.weight * blk.project.b;
  }
  c.logits.noalias() = store.head().input_scale() * (store.head().w * c.nodes.back());
  c.logits.colwise() += store.head().b;
  return c;
}

inline Matrix logits(const SharedParameterStore& store, const DecodedDag& dag, const Matrix& inputs) {
  return forward(store, dag, inputs).logits;
}

inline std::vector<int> predict(const SharedParameterStore& store, const DecodedDag& dag, const Matrix& inputs) {
  const Matrix z = logits(store, dag, inputs);
  std::vector<int> out(static_cast<std::size_t>(z.cols()));
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    Eigen::Index arg = 0;
    z.col(j).maxCoeff(&arg);
    out[static_cast<std::size_t>(j)] = static_cast<int>(arg);
  }
  return out;
}

// Mean softmax cross-entropy over the batch.
inline double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dlogits = nullptr) {
  const auto B = logits.cols();
  double loss = 0.0;
  if (dlogits) dlogits->resize(logits.rows(), B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const double m = logits.col(j).maxCoeff();
    const Vector e = (logits.col(j).array() - m).exp();
    const double s = e.sum();
    const int y = labels[static_cast<std::size_t>(j)];
    loss += std::log(s) + m - logits(y, j);
    if (dlogits) {
      dlogits->col(j) = e / s;
      (*dlogits)(y, j) -= 1.0;
    }
  }
  if (dlogits) *dlogits /= static_cast<double>(B);
  return loss / static_cast<double>(B);
}

struct LossOptions {
  double l2 = 1e-4;         // weight on 0.5 * ||theta||^2 over the active blocks and the head
  bool data_term = true;    // false leaves only the L2 term (test harnesses)
};

// Gradient restricted to the blocks activated by one architecture.
struct Gradient {
  std::uint64_t store_version = 0;
  std::uint64_t space_hash = 0;
  std::vector<std::pair<BlockId, ParameterBlock>> blocks;
  Dense head;

  double squared_norm() const {
    double n = head.squared_norm();
    for (const auto& [id, g] : blocks) n += g.squared_norm();
    return n;
  }
};

struct LossAndGrad {
  double loss = 0.0;
  Gradient grad;
};

inline std::vector<BlockId> active_blocks(const DecodedDag& dag) {
  std::vector<BlockId> ids;
  for (const auto& op : dag.ops)
    if (op.op.kind == OpKind::transform)
      ids.push_back({static_cast<std::uint32_t>(op.edge), static_cast<std::uint32_t>(op.candidate)});
  return ids;
}

inline LossAndGrad loss_and_grad(const SharedParameterStore& store, const DecodedDag& dag, const Batch& batch,
                                 const LossOptions& opts = {}) {
  if (batch.size() == 0 || static_cast<std::size_t>(batch.inputs.cols()) != batch.size())
    fail(ErrorCategory::invalid_argument, "batch must hold at least one sample with one label per column");
  for (int y : batch.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= store.num_classes())
      fail(ErrorCategory::invalid_argument, "label out of range");

  const ForwardCache c = forward(store, dag, batch.inputs);
  LossAndGrad out;
  out.grad.store_version = store.version();
  out.grad.space_hash = store.space_hash();

  Matrix dlogits;
  double data_loss = cross_entropy(c.logits, batch.labels, &dlogits);
  if (!opts.data_term) {
    data_loss = 0.0;
    dlogits.setZero();
  }

  const auto& head = store.head();
  out.grad.head.w.noalias() = head.input_scale() * (dlogits * c.nodes.back().transpose());
  out.grad.head.b = dlogits.rowwise().sum();

  std::vector<Matrix> dnode(dag.num_nodes());
  dnode.back().noalias() = head.input_scale() * (head.w.transpose() * dlogits);
  for (std::size_t j = 0; j + 1 < dag.num_nodes(); ++j)
    dnode[j] = Matrix::Zero(static_cast<Eigen::Index>(dag.widths[j]), batch.inputs.cols());

  out.grad.blocks.reserve(dag.ops.size());
  for (std::size_t k = dag.ops.size(); k-- > 0;) {
    const auto& op = dag.ops[k];
    const Matrix dy = op.weight == 1.0 ? dnode[op.dst] : Matrix(op.weight * dnode[op.dst]);
    if (op.op.kind == OpKind::identity) {
      if (op.src != 0) dnode[op.src] += dy;
      continue;
    }
    const BlockId id{static_cast<std::uint32_t>(op.edge), static_cast<std::uint32_t>(op.candidate)};
    const auto& blk = store.block(id);
    ParameterBlock g;
    g.project.w.noalias() = blk.project.input_scale() * (dy * c.hidden[k].transpose());
    g.project.b = dy.rowwise().sum();
    Matrix dz = blk.project.input_scale() * (blk.project.w.transpose() * dy);
    dz.array() *= (c.pre[k].array() > 0.0).cast<double>();
    g.expand.w.noalias() = blk.expand.input_scale() * (dz * c.nodes[op.src].transpose());
    g.expand.b = dz.rowwise().sum();
    if (op.src != 0) {
      dnode[op.src].noalias() += blk.expand.input_scale() * (blk.expand.w.transpose() * dz);
      dnode[op.src] += dy.topRows(dnode[op.src].rows());
    }
    out.grad.blocks.emplace_back(id, std::move(g));
  }

  double reg = head.squared_norm();
  out.grad.head.axpy(opts.l2, head);
  for (auto& [id, g] : out.grad.blocks) {
    const auto& blk = store.block(id);
    reg += blk.squared_norm();
    g.axpy(opts.l2, blk);
  }
  out.loss = data_loss + 0.5 * opts.l2 * reg;
  if (!std::isfinite(out.loss))
    fail(ErrorCategory::numeric, "non-finite loss at store version " + std::to_string(store.version()));
  return out;
}

// Plain SGD (momentum is identically zero): theta <- theta - alpha * grad on
// the gradient's blocks only.
inline void sgd_step(SharedParameterStore& store, const Gradient& grad, double alpha) {
  if (grad.space_hash != store.space_hash())
    fail(ErrorCategory::mismatch, "gradient belongs to a different search space");
  if (grad.store_version != store.version())
    fail(ErrorCategory::stale_gradient, "gradient computed at version " + std::to_string(grad.store_version) +
                                            " but store is at version " + std::to_string(store.version()));
  for (const auto& [id, g] : grad.blocks) store.block(id).axpy(-alpha, g);
  store.head().axpy(-alpha, grad.head);
  store.bump_version();
}

}  // namespace topo_nas
