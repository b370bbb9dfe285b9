#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "topo_nas/backend.hpp"
#include "topo_nas/data.hpp"
#include "topo_nas/errors.hpp"
#include "topo_nas/estimation.hpp"
#include "topo_nas/evolution.hpp"
#include "topo_nas/hash.hpp"
#include "topo_nas/sampler.hpp"
#include "topo_nas/search_space.hpp"
#include "topo_nas/training.hpp"

namespace topo_nas {

// Human-editable search-space definition.
struct SpaceDefinition {
  std::vector<std::size_t> stage_sizes{2, 2, 4, 8, 4};
  std::size_t base_width = 8;
  CatalogSpec catalog;
  Aggregation aggregation = Aggregation::mean;
  std::uint64_t seed = 0;

  SearchSpaceSpec build() const {
    return build_space(stage_sizes, doubling_widths(stage_sizes.size(), base_width), catalog, aggregation);
  }
};

struct ScheduleSection {
  std::uint64_t epochs = 60;
  std::size_t batch_size = 128;
  LrKind kind = LrKind::cosine;
  double lr0 = 0.1;
  double lr_final = 0.01;
  double l2 = 1e-4;
};

struct SgldSection {
  std::optional<double> alpha;  // unset: the supernet's final learning rate
  std::uint64_t epochs = 20;    // one snapshot per epoch, so K = epochs
  double noise_scale = 1.0;
  double l2 = 1e-4;
};

struct GroundTruthSection {
  std::size_t architectures = 12;
  ScheduleSection schedule{60, 128, LrKind::cosine, 0.1, 2.5e-4, 1e-4};
  std::size_t threads = 1;
};

struct EstimationSection {
  std::size_t tail = 10;  // single-checkpoint baseline: median over this many final epochs
  double finetune_lr = 2.5e-4;
  std::uint64_t finetune_steps = 32;
};

struct EvolutionSection {
  std::size_t population = 45;
  std::size_t generations = 22;
  double mutation_rate = -1.0;
  EstimatorTag estimator = EstimatorTag::sgld_param;
  std::vector<CostBand> bands;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  SpaceDefinition space;
  SamplerConfig sampler;
  DatasetDescriptor dataset;
  InitConfig init;
  ScheduleSection supernet;
  SgldSection sgld;
  GroundTruthSection ground_truth;
  EstimationSection estimation;
  EvolutionSection evolution;

  double sgld_alpha() const { return sgld.alpha.value_or(supernet.lr_final); }
  void validate() const;
  std::string canonical() const;
  std::uint64_t hash() const { return hash_text(canonical()); }
};

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class T>
std::string join(const std::vector<T>& v, const char* sep = ",") {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? sep : "") << v[i];
  return os.str();
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? "" : cur.substr(b, e - b + 1));
  }
  return out;
}

inline std::string bands_text(const std::vector<CostBand>& bands) {
  std::vector<std::string> parts;
  for (const auto& b : bands)
    parts.push_back(fmt_double(b.lo) + ":" + (std::isinf(b.hi) ? std::string("inf") : fmt_double(b.hi)));
  return join(parts, ";");
}

// Reads typed values out of a parsed INI tree and remembers which keys were
// consumed so unknown keys can be rejected.
class IniReader {
 public:
  explicit IniReader(const boost::property_tree::ptree& tree) : tree_(tree) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) {
    used_.insert(section + "." + key);
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(key);
    if (!v) return std::nullopt;
    return *v;
  }

  template <class T>
  void get(const std::string& section, const std::string& key, T& out) {
    if (auto v = raw(section, key)) out = convert<T>(*v, section + "." + key);
  }

  template <class T, class F>
  void get_with(const std::string& section, const std::string& key, T& out, F parse) {
    if (auto v = raw(section, key)) {
      try {
        out = parse(*v);
      } catch (const Error& e) {
        fail(ErrorCategory::parse, section + "." + key + ": " + e.what());
      }
    }
  }

  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty())
        fail(ErrorCategory::parse, "key '" + section + "' must live inside a section");
      for (const auto& [key, _] : body)
        if (!used_.count(section + "." + key)) fail(ErrorCategory::parse, "unknown key '" + section + "." + key + "'");
    }
  }

  template <class T>
  static T convert(const std::string& v, const std::string& where) {
    try {
      std::size_t pos = 0;
      T out{};
      if constexpr (std::is_same_v<T, double>) {
        out = std::stod(v, &pos);
      } else if constexpr (std::is_same_v<T, std::string>) {
        return v;
      } else {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        const auto u = std::stoull(v, &pos);
        if (u > std::numeric_limits<T>::max()) throw std::out_of_range("too large");
        out = static_cast<T>(u);
      }
      if (pos != v.size()) throw std::invalid_argument("trailing characters");
      return out;
    } catch (const std::exception&) {
      fail(ErrorCategory::parse, where + ": cannot parse '" + v + "'");
    }
  }

 private:
  const boost::property_tree::ptree& tree_;
  std::set<std::string> used_;
};

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& p : split(s, ',')) out.push_back(IniReader::convert<std::size_t>(p, "list"));
  return out;
}

inline std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& p : split(s, ',')) out.push_back(static_cast<int>(IniReader::convert<unsigned>(p, "list")));
  return out;
}

inline std::vector<KernelTag> parse_kernels(const std::string& s) {
  std::vector<KernelTag> out;
  for (const auto& p : split(s, ',')) out.push_back(parse_kernel(p));
  return out;
}

inline std::vector<CostBand> parse_bands(const std::string& s) {
  std::vector<CostBand> out;
  if (s.empty()) return out;
  for (const auto& p : split(s, ';')) {
    const auto lohi = split(p, ':');
    if (lohi.size() != 2) fail(ErrorCategory::parse, "cost band must look like lo:hi, got '" + p + "'");
    CostBand b;
    b.lo = IniReader::convert<double>(lohi[0], "band");
    b.hi = lohi[1] == "inf" ? std::numeric_limits<double>::infinity() : IniReader::convert<double>(lohi[1], "band");
    out.push_back(b);
  }
  return out;
}

inline void read_schedule(IniReader& r, const std::string& sec, ScheduleSection& s) {
  r.get(sec, "epochs", s.epochs);
  r.get(sec, "batch_size", s.batch_size);
  r.get_with(sec, "schedule", s.kind, parse_lr_kind);
  r.get(sec, "lr0", s.lr0);
  r.get(sec, "lr_final", s.lr_final);
  r.get(sec, "l2", s.l2);
}

inline void write_schedule(std::ostream& os, const ScheduleSection& s) {
  os << "epochs = " << s.epochs << "\n"
     << "batch_size = " << s.batch_size << "\n"
     << "schedule = " << lr_kind_name(s.kind) << "\n"
     << "lr0 = " << fmt_double(s.lr0) << "\n"
     << "lr_final = " << fmt_double(s.lr_final) << "\n"
     << "l2 = " << fmt_double(s.l2) << "\n";
}

inline void write_space(std::ostream& os, const SpaceDefinition& d) {
  std::vector<std::string> kernels;
  for (auto k : d.catalog.kernels) kernels.push_back(kernel_name(k));
  os << "[space]\n"
     << "stage_sizes = " << join(d.stage_sizes) << "\n"
     << "base_width = " << d.base_width << "\n"
     << "expansions = " << join(d.catalog.expansions) << "\n"
     << "kernels = " << join(kernels) << "\n"
     << "aggregation = " << aggregation_name(d.aggregation) << "\n"
     << "seed = " << d.seed << "\n";
}

inline void read_space(IniReader& r, SpaceDefinition& d) {
  r.get_with("space", "stage_sizes", d.stage_sizes, parse_sizes);
  r.get("space", "base_width", d.base_width);
  r.get_with("space", "expansions", d.catalog.expansions, parse_ints);
  r.get_with("space", "kernels", d.catalog.kernels, parse_kernels);
  r.get_with("space", "aggregation", d.aggregation, parse_aggregation);
  r.get("space", "seed", d.seed);
}

inline boost::property_tree::ptree parse_ini(std::istream& is, const std::string& origin) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorCategory::parse, origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  return tree;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string space_definition_text(const SpaceDefinition& d) {
  std::ostringstream os;
  detail::write_space(os, d);
  return os.str();
}

inline SpaceDefinition parse_space_definition(const std::string& text, const std::string& origin = "<space>") {
  std::istringstream is(text);
  const auto tree = detail::parse_ini(is, origin);
  detail::IniReader r(tree);
  SpaceDefinition d;
  detail::read_space(r, d);
  r.reject_unknown();
  d.build();
  return d;
}

inline void ExperimentConfig::validate() const {
  const auto space_spec = space.build();
  require(dataset.width == space.base_width, "dataset width must equal the space's base width");
  resolve_policy(space_spec, sampler);
  auto check = [](const ScheduleSection& s, const std::string& name) {
    require(s.epochs >= 1, name + ": epochs must be at least 1");
    TrainSchedule{s.epochs, s.batch_size, s.kind, s.lr0, s.lr_final, s.l2, 0}.validate();
  };
  check(supernet, "supernet");
  check(ground_truth.schedule, "ground_truth");
  require(sgld_alpha() > 0.0, "sgld.alpha must be positive");
  require(sgld.epochs >= 1, "sgld.epochs must be at least 1");
  require(sgld.noise_scale >= 0.0, "sgld.noise_scale must be nonnegative");
  require(sgld.l2 >= 0.0, "sgld.l2 must be nonnegative");
  require(ground_truth.architectures >= 2, "ground_truth.architectures must be at least 2");
  require(ground_truth.threads >= 1, "ground_truth.threads must be at least 1");
  require(estimation.tail >= 1 && estimation.tail <= supernet.epochs, "estimation.tail must lie in 1..supernet.epochs");
  require(estimation.finetune_lr > 0.0, "estimation.finetune_lr must be positive");
  require(evolution.population >= 2, "evolution.population must be at least 2");
  require(evolution.generations >= 1, "evolution.generations must be at least 1");
  require(evolution.mutation_rate <= 1.0, "evolution.mutation_rate must not exceed 1");
  require(evolution.estimator != EstimatorTag::ground_truth, "evolution.estimator cannot be ground_truth");
  for (const auto& b : evolution.bands) require(b.lo <= b.hi, "cost band must satisfy lo <= hi");
}

// Every field, in a fixed order; the config hash is taken over this text.
inline std::string ExperimentConfig::canonical() const {
  using detail::fmt_double;
  std::ostringstream os;
  os << "[experiment]\nseed = " << seed << "\n\n";
  detail::write_space(os, space);
  os << "\n[sampler]\n"
     << "p_drop_mode = " << p_drop_mode_name(sampler.mode) << "\n"
     << "p_drop = " << fmt_double(sampler.p_drop) << "\n"
     << "c_target = " << fmt_double(sampler.c_target) << "\n";
  os << "\n[dataset]\n"
     << "kind = " << dataset_kind_name(dataset.kind) << "\n"
     << "classes = " << dataset.num_classes << "\n"
     << "train_size = " << dataset.train_size << "\n"
     << "val_size = " << dataset.val_size << "\n"
     << "separation = " << fmt_double(dataset.separation) << "\n"
     << "teacher_depth = " << dataset.teacher_depth << "\n"
     << "teacher_width = " << dataset.teacher_width << "\n"
     << "path = " << dataset.path << "\n";
  os << "\n[init]\n"
     << "project_gain = " << fmt_double(init.project_gain) << "\n"
     << "head_gain = " << fmt_double(init.head_gain) << "\n";
  os << "\n[supernet]\n";
  detail::write_schedule(os, supernet);
  os << "\n[sgld]\n"
     << "alpha = " << (sgld.alpha ? fmt_double(*sgld.alpha) : std::string("auto")) << "\n"
     << "epochs = " << sgld.epochs << "\n"
     << "noise_scale = " << fmt_double(sgld.noise_scale) << "\n"
     << "l2 = " << fmt_double(sgld.l2) << "\n";
  os << "\n[ground_truth]\n"
     << "architectures = " << ground_truth.architectures << "\n";
  detail::write_schedule(os, ground_truth.schedule);
  os << "threads = " << ground_truth.threads << "\n";
  os << "\n[estimation]\n"
     << "tail = " << estimation.tail << "\n"
     << "finetune_lr = " << fmt_double(estimation.finetune_lr) << "\n"
     << "finetune_steps = " << estimation.finetune_steps << "\n";
  os << "\n[evolution]\n"
     << "population = " << evolution.population << "\n"
     << "generations = " << evolution.generations << "\n"
     << "mutation_rate = " << (evolution.mutation_rate < 0.0 ? std::string("auto") : fmt_double(evolution.mutation_rate))
     << "\n"
     << "estimator = " << estimator_name(evolution.estimator) << "\n"
     << "bands = " << detail::bands_text(evolution.bands) << "\n";
  return os.str();
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  std::istringstream is(text);
  const auto tree = detail::parse_ini(is, origin);
  detail::IniReader r(tree);
  ExperimentConfig c;
  r.get("experiment", "seed", c.seed);
  detail::read_space(r, c.space);
  r.get_with("sampler", "p_drop_mode", c.sampler.mode, parse_p_drop_mode);
  r.get("sampler", "p_drop", c.sampler.p_drop);
  r.get("sampler", "c_target", c.sampler.c_target);
  r.get_with("dataset", "kind", c.dataset.kind, parse_dataset_kind);
  r.get("dataset", "classes", c.dataset.num_classes);
  r.get("dataset", "train_size", c.dataset.train_size);
  r.get("dataset", "val_size", c.dataset.val_size);
  r.get("dataset", "separation", c.dataset.separation);
  r.get("dataset", "teacher_depth", c.dataset.teacher_depth);
  r.get("dataset", "teacher_width", c.dataset.teacher_width);
  r.get("dataset", "path", c.dataset.path);
  c.dataset.width = c.space.base_width;
  r.get("init", "project_gain", c.init.project_gain);
  r.get("init", "head_gain", c.init.head_gain);
  detail::read_schedule(r, "supernet", c.supernet);
  if (auto a = r.raw("sgld", "alpha"); a && *a != "auto") c.sgld.alpha = detail::IniReader::convert<double>(*a, "sgld.alpha");
  r.get("sgld", "epochs", c.sgld.epochs);
  r.get("sgld", "noise_scale", c.sgld.noise_scale);
  r.get("sgld", "l2", c.sgld.l2);
  r.get("ground_truth", "architectures", c.ground_truth.architectures);
  detail::read_schedule(r, "ground_truth", c.ground_truth.schedule);
  r.get("ground_truth", "threads", c.ground_truth.threads);
  r.get("estimation", "tail", c.estimation.tail);
  r.get("estimation", "finetune_lr", c.estimation.finetune_lr);
  r.get("estimation", "finetune_steps", c.estimation.finetune_steps);
  r.get("evolution", "population", c.evolution.population);
  r.get("evolution", "generations", c.evolution.generations);
  if (auto m = r.raw("evolution", "mutation_rate"); m && *m != "auto")
    c.evolution.mutation_rate = detail::IniReader::convert<double>(*m, "evolution.mutation_rate");
  r.get_with("evolution", "estimator", c.evolution.estimator, parse_estimator);
  r.get_with("evolution", "bands", c.evolution.bands, detail::parse_bands);
  r.reject_unknown();
  try {
    c.validate();
  } catch (const Error& e) {
    if (e.category() == ErrorCategory::invalid_argument) fail(ErrorCategory::parse, origin + ": " + e.what());
    throw;
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  return parse_config_text(detail::read_file(path), path);
}

}  // namespace topo_nas
