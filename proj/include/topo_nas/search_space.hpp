#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "topo_nas/errors.hpp"
#include "topo_nas/hash.hpp"

namespace topo_nas {

using Cost = double;
using BigCount = boost::multiprecision::cpp_int;

enum class OpKind : std::uint8_t { transform, identity, none };

// Kernel tags stand in for the depthwise kernel size of a linear bottleneck.
// At desk scale they only scale the cost model.
enum class KernelTag : std::uint8_t { small, medium, large };

constexpr double kernel_factor(KernelTag k) noexcept {
  switch (k) {
    case KernelTag::small: return 1.0;
    case KernelTag::medium: return 1.5;
    case KernelTag::large: return 2.0;
  }
  return 1.0;
}

constexpr const char* kernel_name(KernelTag k) noexcept {
  switch (k) {
    case KernelTag::small: return "small";
    case KernelTag::medium: return "medium";
    case KernelTag::large: return "large";
  }
  return "?";
}

inline KernelTag parse_kernel(const std::string& s) {
  if (s == "small") return KernelTag::small;
  if (s == "medium") return KernelTag::medium;
  if (s == "large") return KernelTag::large;
  fail(ErrorCategory::parse, "unknown kernel tag '" + s + "'");
}

struct OperationSpec {
  OpKind kind = OpKind::none;
  int expansion = 0;
  KernelTag kernel = KernelTag::small;

  static OperationSpec identity() { return {OpKind::identity, 0, KernelTag::small}; }
  static OperationSpec none() { return {OpKind::none, 0, KernelTag::small}; }

  // MAdds-equivalent of a width -> e*width -> width two-layer transform,
  // scaled by the kernel tag.
  Cost cost(std::size_t in_width, std::size_t out_width) const noexcept {
    if (kind != OpKind::transform) return 0.0;
    const double hidden = static_cast<double>(expansion) * static_cast<double>(in_width);
    return (hidden * static_cast<double>(in_width) + hidden * static_cast<double>(out_width)) *
           kernel_factor(kernel);
  }

  std::size_t hidden_width(std::size_t in_width) const noexcept {
    return static_cast<std::size_t>(expansion) * in_width;
  }

  std::string name() const {
    switch (kind) {
      case OpKind::identity: return "identity";
      case OpKind::none: return "none";
      case OpKind::transform:
        return "lb_e" + std::to_string(expansion) + "_" + kernel_name(kernel);
    }
    return "?";
  }

  friend bool operator==(const OperationSpec&, const OperationSpec&) = default;
};

// The transform family offered on every edge: expansions x kernel tags.
struct CatalogSpec {
  std::vector<int> expansions{1, 3, 6};
  std::vector<KernelTag> kernels{KernelTag::small, KernelTag::medium, KernelTag::large};

  std::vector<OperationSpec> transforms() const {
    std::vector<OperationSpec> out;
    for (int e : expansions)
      for (KernelTag k : kernels) out.push_back({OpKind::transform, e, k});
    return out;
  }

  friend bool operator==(const CatalogSpec&, const CatalogSpec&) = default;
};

// How a node combines its incoming edge outputs.
enum class Aggregation : std::uint8_t { sum, mean };

inline const char* aggregation_name(Aggregation a) { return a == Aggregation::sum ? "sum" : "mean"; }

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "sum") return Aggregation::sum;
  if (s == "mean") return Aggregation::mean;
  fail(ErrorCategory::parse, "aggregation must be sum or mean, got '" + s + "'");
}

struct NodeSpec {
  std::size_t index = 0;
  std::size_t stage = 0;
  std::size_t width = 0;
};

enum class EdgeKind : std::uint8_t { stem, branch };

struct EdgeSpec {
  std::size_t src = 0;
  std::size_t dst = 0;
  EdgeKind kind = EdgeKind::stem;
  std::vector<OperationSpec> candidates;

  std::size_t span() const noexcept { return dst - src; }

  // Index of the none candidate, or candidates.size() when absent.
  std::size_t none_index() const noexcept {
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (candidates[i].kind == OpKind::none) return i;
    return candidates.size();
  }

  // Candidate count excluding none (I_stem / I_branch for this edge).
  std::size_t active_choice_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(
        candidates.begin(), candidates.end(),
        [](const OperationSpec& o) { return o.kind != OpKind::none; }));
  }
};

struct ArchitectureGenome {
  std::vector<std::uint16_t> choices;

  std::size_t size() const noexcept { return choices.size(); }

  std::uint64_t hash() const noexcept {
    return Fnv1a{}.values(std::span<const std::uint16_t>(choices)).digest();
  }

  // Edge-ordered choice list, dash separated.
  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < choices.size(); ++i) {
      if (i) s += '-';
      s += std::to_string(choices[i]);
    }
    return s;
  }

  static ArchitectureGenome parse(const std::string& s) {
    ArchitectureGenome g;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, '-')) {
      if (tok.empty()) fail(ErrorCategory::parse, "empty gene in genome '" + s + "'");
      try {
        std::size_t used = 0;
        const unsigned long v = std::stoul(tok, &used);
        if (used != tok.size() || v > 0xffff) throw std::invalid_argument(tok);
        g.choices.push_back(static_cast<std::uint16_t>(v));
      } catch (const std::logic_error&) {
        fail(ErrorCategory::parse, "bad gene '" + tok + "' in genome '" + s + "'");
      }
    }
    return g;
  }

  friend bool operator==(const ArchitectureGenome&, const ArchitectureGenome&) = default;
};

struct SearchSpaceSpec {
  std::vector<NodeSpec> nodes;
  std::vector<EdgeSpec> edges;  // stem edges in node order, then branch edges by (src, span)
  std::vector<std::size_t> stage_sizes;
  CatalogSpec catalog;
  Aggregation aggregation = Aggregation::mean;

  std::size_t num_nodes() const noexcept { return nodes.size(); }
  std::size_t genome_length() const noexcept { return edges.size(); }
  std::size_t input_width() const noexcept { return nodes.front().width; }
  std::size_t output_width() const noexcept { return nodes.back().width; }

  std::size_t num_stem_edges() const noexcept {
    return static_cast<std::size_t>(std::count_if(
        edges.begin(), edges.end(), [](const EdgeSpec& e) { return e.kind == EdgeKind::stem; }));
  }
  std::size_t num_branch_edges() const noexcept { return edges.size() - num_stem_edges(); }

  const OperationSpec& op(std::size_t edge, std::size_t candidate) const {
    return edges.at(edge).candidates.at(candidate);
  }

  Cost edge_cost(std::size_t edge, std::size_t candidate) const {
    const auto& e = edges.at(edge);
    return e.candidates.at(candidate).cost(nodes[e.src].width, nodes[e.dst].width);
  }

  void validate(const ArchitectureGenome& g) const {
    if (g.size() != edges.size())
      fail(ErrorCategory::invalid_argument,
           "genome length " + std::to_string(g.size()) + " does not match " +
               std::to_string(edges.size()) + " edges");
    for (std::size_t i = 0; i < edges.size(); ++i) {
      if (g.choices[i] >= edges[i].candidates.size())
        fail(ErrorCategory::invalid_argument,
             "choice " + std::to_string(g.choices[i]) + " out of range on edge " +
                 std::to_string(i));
    }
  }

  bool is_valid(const ArchitectureGenome& g) const noexcept {
    if (g.size() != edges.size()) return false;
    for (std::size_t i = 0; i < edges.size(); ++i)
      if (g.choices[i] >= edges[i].candidates.size()) return false;
    return true;
  }

  // Canonical text form; identical spaces hash identically.
  std::string canonical() const {
    std::ostringstream os;
    os << "stages:";
    for (auto s : stage_sizes) os << s << ',';
    os << ";widths:";
    for (const auto& n : nodes) os << n.width << ',';
    os << ";catalog:";
    for (int e : catalog.expansions) os << e << ',';
    os << '/';
    for (auto k : catalog.kernels) os << kernel_name(k) << ',';
    os << ";aggregation:" << aggregation_name(aggregation);
    return os.str();
  }

  std::uint64_t hash() const { return hash_text(canonical()); }
};

// Builds the staged chain. Edge (i, j) is a stem edge when j - i == 1 and a
// branch edge when j - i is 2 or 3; branch edges may cross stage boundaries
// and take their widths from their endpoints.
inline SearchSpaceSpec build_space(const std::vector<std::size_t>& stage_sizes,
                                   const std::vector<std::size_t>& widths,
                                   const CatalogSpec& catalog = {},
                                   Aggregation aggregation = Aggregation::mean) {
  require(!stage_sizes.empty(), "stage_sizes must be nonempty");
  require(widths.size() == stage_sizes.size(), "one width per stage is required");
  require(!catalog.expansions.empty() && !catalog.kernels.empty(),
          "catalog must offer at least one transform");
  for (int e : catalog.expansions) require(e > 0, "expansion factors must be positive");
  for (std::size_t s = 0; s < stage_sizes.size(); ++s) {
    require(stage_sizes[s] > 0, "stage " + std::to_string(s) + " has size 0");
    require(widths[s] > 0, "stage " + std::to_string(s) + " has width 0");
  }

  SearchSpaceSpec space;
  space.stage_sizes = stage_sizes;
  space.catalog = catalog;
  space.aggregation = aggregation;
  for (std::size_t s = 0; s < stage_sizes.size(); ++s)
    for (std::size_t k = 0; k < stage_sizes[s]; ++k)
      space.nodes.push_back({space.nodes.size(), s, widths[s]});

  const std::size_t n = space.nodes.size();
  require(n >= 4, "at least 4 nodes are required, got " + std::to_string(n));

  const auto transforms = catalog.transforms();
  auto make_edge = [&](std::size_t src, std::size_t dst, EdgeKind kind) {
    EdgeSpec e{src, dst, kind, transforms};
    if (space.nodes[src].width == space.nodes[dst].width)
      e.candidates.push_back(OperationSpec::identity());
    if (kind == EdgeKind::branch) e.candidates.push_back(OperationSpec::none());
    return e;
  };

  for (std::size_t i = 0; i + 1 < n; ++i) space.edges.push_back(make_edge(i, i + 1, EdgeKind::stem));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t span : {2u, 3u})
      if (i + span < n) space.edges.push_back(make_edge(i, i + span, EdgeKind::branch));
  return space;
}

// Widths double at every stage boundary starting from base_width.
inline std::vector<std::size_t> doubling_widths(std::size_t num_stages, std::size_t base_width) {
  std::vector<std::size_t> w(num_stages);
  for (std::size_t s = 0; s < num_stages; ++s) w[s] = base_width << s;
  return w;
}

inline BigCount topology_count(const SearchSpaceSpec& space) {
  return BigCount(1) << static_cast<unsigned>(space.num_branch_edges());
}

inline Cost genome_cost(const SearchSpaceSpec& space, const ArchitectureGenome& genome) {
  space.validate(genome);
  Cost total = 0.0;
  for (std::size_t i = 0; i < space.edges.size(); ++i) total += space.edge_cost(i, genome.choices[i]);
  return total;
}

struct DagOp {
  std::size_t edge = 0;
  std::size_t candidate = 0;
  std::size_t src = 0;
  std::size_t dst = 0;
  std::size_t in_width = 0;
  std::size_t out_width = 0;
  OperationSpec op;
  double weight = 1.0;  // contribution weight of this edge at its destination node
};

// Executable form of a genome. A node's value is the weighted elementwise sum
// of its incoming edge outputs (weights 1 for sum aggregation, 1/in-degree for
// mean); node 0 is the network input.
struct DecodedDag {
  std::vector<std::size_t> widths;
  std::vector<DagOp> ops;  // sorted by (dst, src); every input of ops[k] precedes it
  std::vector<std::vector<std::size_t>> incoming;  // node -> indices into ops

  std::size_t num_nodes() const noexcept { return widths.size(); }

  std::vector<std::vector<bool>> adjacency() const {
    std::vector<std::vector<bool>> a(widths.size(), std::vector<bool>(widths.size(), false));
    for (const auto& o : ops) a[o.src][o.dst] = true;
    return a;
  }
};

inline DecodedDag decode(const SearchSpaceSpec& space, const ArchitectureGenome& genome) {
  space.validate(genome);
  DecodedDag dag;
  for (const auto& n : space.nodes) dag.widths.push_back(n.width);
  for (std::size_t i = 0; i < space.edges.size(); ++i) {
    const auto& e = space.edges[i];
    const auto& op = e.candidates[genome.choices[i]];
    if (op.kind == OpKind::none) continue;
    dag.ops.push_back({i, genome.choices[i], e.src, e.dst, space.nodes[e.src].width,
                       space.nodes[e.dst].width, op});
  }
  std::stable_sort(dag.ops.begin(), dag.ops.end(), [](const DagOp& a, const DagOp& b) {
    return a.dst != b.dst ? a.dst < b.dst : a.src < b.src;
  });
  dag.incoming.resize(dag.widths.size());
  for (std::size_t k = 0; k < dag.ops.size(); ++k) dag.incoming[dag.ops[k].dst].push_back(k);
  if (space.aggregation == Aggregation::mean)
    for (auto& op : dag.ops) op.weight = 1.0 / static_cast<double>(dag.incoming[op.dst].size());
  return dag;
}

// Genome with every branch edge set to none and every stem edge set to
// candidate `stem_choice` (clamped per edge).
inline ArchitectureGenome stem_chain_genome(const SearchSpaceSpec& space, std::size_t stem_choice = 0) {
  ArchitectureGenome g;
  for (const auto& e : space.edges) {
    if (e.kind == EdgeKind::branch) g.choices.push_back(static_cast<std::uint16_t>(e.none_index()));
    else g.choices.push_back(static_cast<std::uint16_t>(std::min(stem_choice, e.candidates.size() - 1)));
  }
  return g;
}

}  // namespace topo_nas
