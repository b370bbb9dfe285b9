#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "topo_nas/artifact.hpp"
#include "topo_nas/backend.hpp"
#include "topo_nas/binary_io.hpp"
#include "topo_nas/checkpoint.hpp"
#include "topo_nas/config.hpp"
#include "topo_nas/data.hpp"
#include "topo_nas/errors.hpp"
#include "topo_nas/estimation.hpp"
#include "topo_nas/evolution.hpp"
#include "topo_nas/hash.hpp"
#include "topo_nas/rank.hpp"
#include "topo_nas/rng.hpp"
#include "topo_nas/sampler.hpp"
#include "topo_nas/search_space.hpp"
#include "topo_nas/training.hpp"

namespace topo_nas {

namespace fs = std::filesystem;

enum class Stage { dataset, supernet, sgld, ground_truth, rank, search, report };

inline constexpr Stage kStages[] = {Stage::dataset, Stage::supernet, Stage::sgld,  Stage::ground_truth,
                                    Stage::rank,    Stage::search,   Stage::report};

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::dataset: return "dataset";
    case Stage::supernet: return "supernet";
    case Stage::sgld: return "sgld";
    case Stage::ground_truth: return "ground_truth";
    case Stage::rank: return "rank";
    case Stage::search: return "search";
    case Stage::report: return "report";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (auto st : kStages)
    if (s == stage_name(st)) return st;
  fail(ErrorCategory::invalid_argument, "unknown stage '" + s + "'");
}

// Independent seed for each stage (and item within a stage).
inline std::uint64_t stage_seed(std::uint64_t master, Stage stage, std::uint64_t index = 0) {
  return stream_key(master, purpose::experiment, {static_cast<std::uint64_t>(stage), index});
}

// ---------------------------------------------------------------------------
// Text artifacts: first line is the artifact header, the rest is the body.

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCategory::io, "cannot open '" + tmp.string() + "' for writing");
    out << content;
    if (!out) fail(ErrorCategory::io, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorCategory::io, "cannot rename '" + tmp.string() + "': " + ec.message());
}

inline void write_text_artifact(const fs::path& path, const ArtifactTag& tag, const std::string& body) {
  write_file_atomic(path, tag.header_line() + "\n" + body);
}

struct TextArtifact {
  ArtifactTag tag;
  std::vector<std::string> lines;  // body lines without the header
};

inline TextArtifact read_text_artifact(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCategory::io, "cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCategory::parse, "'" + path.string() + "' is empty");
  TextArtifact a;
  try {
    a.tag = ArtifactTag::parse_header_line(line);
  } catch (const Error& e) {
    fail(ErrorCategory::parse, "'" + path.string() + "': " + e.what());
  }
  while (std::getline(in, line))
    if (!line.empty()) a.lines.push_back(line);
  return a;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Rows of a CSV artifact after its column line, checked for width.
inline std::vector<std::vector<std::string>> csv_rows(const TextArtifact& a, const std::string& columns,
                                                      const fs::path& path) {
  if (a.lines.empty() || a.lines.front() != columns)
    fail(ErrorCategory::parse, "'" + path.string() + "': expected columns '" + columns + "'");
  const auto width = split_csv(columns).size();
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 1; i < a.lines.size(); ++i) {
    auto r = split_csv(a.lines[i]);
    if (r.size() != width)
      fail(ErrorCategory::parse, "'" + path.string() + "': line " + std::to_string(i + 2) + " has " +
                                     std::to_string(r.size()) + " fields, expected " + std::to_string(width));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline double parse_double_field(const std::string& s, const fs::path& path) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCategory::parse, "'" + path.string() + "': bad number '" + s + "'");
  }
}

// Line-delimited metrics: one `key=value` record per optimizer step.
class MetricsLog {
 public:
  // Keeps existing records with step < first_step (for resumed runs).
  MetricsLog(const fs::path& path, const ArtifactTag& tag, std::uint64_t first_step = 0) : path_(path) {
    std::vector<std::string> keep;
    if (first_step > 0 && fs::exists(path)) {
      for (const auto& l : read_text_artifact(path).lines) {
        unsigned long long step = 0;
        if (std::sscanf(l.c_str(), "step=%llu", &step) == 1 && step < first_step) keep.push_back(l);
      }
    }
    out_.open(path, std::ios::trunc);
    if (!out_) fail(ErrorCategory::io, "cannot open '" + path.string() + "'");
    out_ << tag.header_line() << "\n";
    for (const auto& l : keep) out_ << l << "\n";
  }

  void record(const StepRecord& r, const std::string& extra = {}) {
    out_ << "step=" << r.step << " loss=" << fmt_g17(r.loss) << " lr=" << fmt_g17(r.lr)
         << " genome=" << hex64(r.genome_hash) << extra << "\n";
  }

  void flush() {
    out_.flush();
    if (!out_) fail(ErrorCategory::io, "write to '" + path_.string() + "' failed");
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Tagged dataset split files.

inline constexpr char kSplitMagic[8] = {'T', 'N', 'A', 'S', 'S', 'P', 'L', 'T'};

inline void save_split(const fs::path& path, const Dataset& d, const ArtifactTag& tag) {
  ByteWriter w;
  w.raw(kSplitMagic, 8).put<std::uint32_t>(1);
  w.put<std::uint64_t>(tag.config_hash).put<std::uint64_t>(tag.space_hash).string(tag.stage).string(tag.build);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.num_classes));
  w.matrix(d.features);
  w.put<std::uint64_t>(d.labels.size());
  for (int y : d.labels) w.put<std::int32_t>(y);
  w.save(path.string());
}

inline std::pair<Dataset, ArtifactTag> load_split(const fs::path& path) {
  auto r = ByteReader::load(path.string());
  char magic[8];
  r.raw(magic, 8);
  if (std::string(magic, 8) != std::string(kSplitMagic, 8))
    fail(ErrorCategory::parse, "'" + path.string() + "' is not a dataset split");
  if (r.get<std::uint32_t>() != 1) fail(ErrorCategory::parse, "'" + path.string() + "': unsupported version");
  ArtifactTag tag;
  tag.config_hash = r.get<std::uint64_t>();
  tag.space_hash = r.get<std::uint64_t>();
  tag.stage = r.string();
  tag.build = r.string();
  Dataset d;
  d.num_classes = r.get<std::uint32_t>();
  d.features = r.matrix();
  const auto n = r.get<std::uint64_t>();
  if (n != static_cast<std::uint64_t>(d.features.cols()))
    fail(ErrorCategory::parse, "'" + path.string() + "': label count differs from sample count");
  d.labels.resize(n);
  for (auto& y : d.labels) y = r.get<std::int32_t>();
  if (!r.done()) fail(ErrorCategory::parse, "'" + path.string() + "' has trailing bytes");
  return {std::move(d), tag};
}

// ---------------------------------------------------------------------------
// One writer per experiment directory. The kernel drops the lock if the
// process dies, so a leftover LOCK file is harmless.

class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) {
    fs::create_directories(dir);
    path_ = dir / "LOCK";
    fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(ErrorCategory::io, "cannot open lock file '" + path_.string() + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      fail(ErrorCategory::locked, "experiment directory '" + dir.string() + "' is in use by another process");
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    if (::ftruncate(fd_, 0) == 0) (void)!::write(fd_, pid.data(), pid.size());
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;
  ~DirectoryLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

// ---------------------------------------------------------------------------

struct PipelineOptions {
  fs::path out_dir = "experiment";
  bool resume = false;
  std::ostream* log = &std::cerr;  // progress messages; nullptr silences
};

// Shared state of one experiment run.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, PipelineOptions opts)
      : cfg_(std::move(cfg)), opts_(std::move(opts)), space_(cfg_.space.build()) {
    cfg_.validate();
    config_hash_ = cfg_.hash();
    policy_ = resolve_policy(space_, cfg_.sampler);
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const SearchSpaceSpec& space() const noexcept { return space_; }
  const SamplingPolicy& policy() const noexcept { return policy_; }
  std::uint64_t config_hash() const noexcept { return config_hash_; }
  const fs::path& root() const noexcept { return opts_.out_dir; }
  fs::path dir(Stage s) const { return opts_.out_dir / stage_name(s); }
  ArtifactTag tag(Stage s) const { return {config_hash_, space_.hash(), stage_name(s), kBuildId}; }

  void note(const std::string& msg) const {
    if (opts_.log) *opts_.log << "[topo-nas] " << msg << std::endl;
  }

  // Runs the given stages in order, skipping those already complete.
  void run(const std::vector<Stage>& stages) {
    DirectoryLock lock(opts_.out_dir);
    bind_directory();
    for (auto s : stages) run_stage(s);
  }

  bool stage_complete(Stage s) const { return marker_valid(s); }

  // Loaded lazily from the dataset stage.
  const DataSplits& data() {
    if (!data_) {
      require_complete(Stage::dataset);
      DataSplits d;
      ArtifactTag t1, t2;
      std::tie(d.train, t1) = load_split(dir(Stage::dataset) / "train.split");
      std::tie(d.val, t2) = load_split(dir(Stage::dataset) / "val.split");
      check_tag(t1, dir(Stage::dataset) / "train.split");
      check_tag(t2, dir(Stage::dataset) / "val.split");
      data_ = std::move(d);
    }
    return *data_;
  }

  std::vector<ArchitectureGenome> ground_truth_genomes() const {
    std::vector<ArchitectureGenome> out;
    const auto seed = stage_seed(cfg_.seed, Stage::ground_truth);
    for (std::size_t i = 0; i < cfg_.ground_truth.architectures; ++i)
      out.push_back(sample_architecture(space_, policy_, seed, i));
    return out;
  }

  std::size_t steps_per_epoch() { return (data().train.size() + cfg_.supernet.batch_size - 1) / cfg_.supernet.batch_size; }

  // Epochs of supernet training kept as tail checkpoints.
  std::size_t tail_keep() const {
    return static_cast<std::size_t>(std::min<std::uint64_t>(
        cfg_.supernet.epochs, std::max<std::uint64_t>(cfg_.estimation.tail, cfg_.sgld.epochs)));
  }

  static std::string epoch_label(std::uint64_t e) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04" PRIu64, e);
    return buf;
  }
  static std::string snapshot_label(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "snapshot_%02zu", k);
    return buf;
  }

  void check_tag(const ArtifactTag& t, const fs::path& path) const {
    if (t.config_hash != config_hash_)
      fail(ErrorCategory::mismatch, "'" + path.string() + "' belongs to config " + hex64(t.config_hash) +
                                        ", this experiment is " + hex64(config_hash_));
    if (t.space_hash != space_.hash())
      fail(ErrorCategory::mismatch, "'" + path.string() + "' belongs to a different search space");
  }

  TextArtifact read_checked(const fs::path& path) const {
    auto a = read_text_artifact(path);
    check_tag(a.tag, path);
    return a;
  }

  SharedParameterStore load_store(const fs::path& path) const {
    auto ck = load_checkpoint(path.string(), space_);
    ArtifactTag t = ck.tag;
    t.space_hash = space_.hash();
    check_tag(t, path);
    return std::move(ck.store);
  }

  void require_complete(Stage s) const {
    if (!marker_valid(s))
      fail(ErrorCategory::stage_failed, std::string("stage '") + stage_name(s) + "' has not completed in " +
                                            opts_.out_dir.string());
  }

  // ---- stage bodies (public for tests) ----
  void stage_dataset();
  void stage_supernet();
  void stage_sgld();
  void stage_ground_truth();
  void stage_rank();
  void stage_search();
  void stage_report();

 private:
  // Records the config in the directory, refusing a directory that belongs to
  // another config.
  void bind_directory() {
    const auto path = opts_.out_dir / "config.ini";
    if (fs::exists(path)) {
      const auto a = read_text_artifact(path);
      if (a.tag.config_hash != config_hash_)
        fail(ErrorCategory::mismatch, "'" + opts_.out_dir.string() + "' holds experiment " + hex64(a.tag.config_hash) +
                                          "; refusing to mix it with config " + hex64(config_hash_));
      return;
    }
    write_text_artifact(path, {config_hash_, space_.hash(), "config", kBuildId}, cfg_.canonical());
  }

  fs::path marker_path(Stage s) const { return dir(s) / "DONE"; }

  // DONE lists every output file with its size; a stage counts as complete
  // only if all of them are still present and unchanged in size.
  bool marker_valid(Stage s) const {
    const auto path = marker_path(s);
    if (!fs::exists(path)) return false;
    TextArtifact a;
    try {
      a = read_text_artifact(path);
    } catch (const Error&) {
      return false;
    }
    if (a.tag.config_hash != config_hash_ || a.tag.build != kBuildId) return false;
    for (const auto& l : a.lines) {
      std::istringstream is(l);
      std::string kind, rel;
      std::uintmax_t size = 0;
      if (!(is >> kind >> rel >> size) || kind != "file") return false;
      std::error_code ec;
      const auto got = fs::file_size(dir(s) / rel, ec);
      if (ec || got != size) return false;
    }
    return true;
  }

  void write_marker(Stage s, const std::vector<std::string>& files) const {
    std::ostringstream os;
    for (const auto& f : files) os << "file " << f << " " << fs::file_size(dir(s) / f) << "\n";
    write_text_artifact(marker_path(s), tag(s), os.str());
  }

  void run_stage(Stage s) {
    if (marker_valid(s)) {
      note(std::string("stage ") + stage_name(s) + ": up to date");
      return;
    }
    fs::create_directories(dir(s));
    fs::remove(marker_path(s));
    fs::remove(dir(s) / "FAILED");
    note(std::string("stage ") + stage_name(s) + ": running");
    try {
      switch (s) {
        case Stage::dataset: stage_dataset(); break;
        case Stage::supernet: stage_supernet(); break;
        case Stage::sgld: stage_sgld(); break;
        case Stage::ground_truth: stage_ground_truth(); break;
        case Stage::rank: stage_rank(); break;
        case Stage::search: stage_search(); break;
        case Stage::report: stage_report(); break;
      }
    } catch (const Error& e) {
      write_file_atomic(dir(s) / "FAILED", std::string(category_name(e.category())) + ": " + e.what() + "\n");
      throw;
    }
    note(std::string("stage ") + stage_name(s) + ": done");
  }

  std::vector<ScoreRecord> read_scores(const fs::path& path, const std::vector<std::uint64_t>& hashes) const;
  void write_scores(const fs::path& path, const std::vector<ScoreRecord>& records) const;
  std::vector<double> read_ground_truth() const;

  ExperimentConfig cfg_;
  PipelineOptions opts_;
  SearchSpaceSpec space_;
  SamplingPolicy policy_;
  std::uint64_t config_hash_ = 0;
  std::optional<DataSplits> data_;

  friend struct ExperimentTestAccess;
};

// ---------------------------------------------------------------------------

inline void Experiment::stage_dataset() {
  const auto splits = make_dataset(cfg_.dataset, cfg_.seed);
  save_split(dir(Stage::dataset) / "train.split", splits.train, tag(Stage::dataset));
  save_split(dir(Stage::dataset) / "val.split", splits.val, tag(Stage::dataset));
  std::ostringstream os;
  os << "kind=" << dataset_kind_name(cfg_.dataset.kind) << "\n"
     << "classes=" << splits.train.num_classes << "\n"
     << "width=" << splits.train.width() << "\n"
     << "train_size=" << splits.train.size() << " train_hash=" << hex64(splits.train.hash()) << "\n"
     << "val_size=" << splits.val.size() << " val_hash=" << hex64(splits.val.hash()) << "\n";
  write_text_artifact(dir(Stage::dataset) / "summary.txt", tag(Stage::dataset), os.str());
  data_.reset();
  write_marker(Stage::dataset, {"train.split", "val.split", "summary.txt"});
}

inline void Experiment::stage_supernet() {
  const auto& train = data().train;
  const auto d = dir(Stage::supernet);
  fs::create_directories(d / "tail");
  const auto seed = stage_seed(cfg_.seed, Stage::supernet);
  BatchStream stream(train, cfg_.supernet.batch_size, seed);
  const auto spe = stream.steps_per_epoch();
  const TrainSchedule sched{cfg_.supernet.epochs * spe, cfg_.supernet.batch_size, cfg_.supernet.kind,
                            cfg_.supernet.lr0,          cfg_.supernet.lr_final,   cfg_.supernet.l2,
                            seed};
  sched.validate();

  std::uint64_t start = 0;
  std::optional<SharedParameterStore> store;
  const auto resume_path = d / "resume.ckpt";
  if (opts_.resume && fs::exists(resume_path)) {
    auto ck = load_checkpoint(resume_path.string(), space_);
    ArtifactTag t = ck.tag;
    t.space_hash = space_.hash();
    check_tag(t, resume_path);
    start = ck.step;
    store = std::move(ck.store);
    note("supernet: resuming at step " + std::to_string(start));
  } else {
    for (const auto& e : fs::directory_iterator(d / "tail")) fs::remove(e.path());
    store = SharedParameterStore::initialized(space_, train.num_classes, seed, cfg_.init);
  }

  const auto keep = tail_keep();
  const auto total_epochs = cfg_.supernet.epochs;
  MetricsLog log(d / "metrics.log", tag(Stage::supernet), start);
  TrainObserver obs;
  obs.on_step = [&](const StepRecord& r) { log.record(r); };
  obs.checkpoint_every = spe;
  obs.on_checkpoint = [&](std::uint64_t done, const SharedParameterStore& s) {
    const auto epoch = done / spe;
    if (epoch + keep > total_epochs)
      save_checkpoint((d / "tail" / (epoch_label(epoch) + ".ckpt")).string(), s, done, tag(Stage::supernet));
    if (epoch % 5 == 0 && epoch < total_epochs) {
      log.flush();
      save_checkpoint(resume_path.string(), s, done, tag(Stage::supernet));
    }
  };
  run_sampled_training(*store, space_, policy_, stream,
                       {sched.steps, seed, [&](std::uint64_t t) { return sched.lr(t); }, sched.l2, 0.0, start}, obs);
  log.flush();
  save_checkpoint((d / "theta_T.ckpt").string(), *store, sched.steps, tag(Stage::supernet));
  fs::remove(resume_path);

  std::vector<std::string> files{"theta_T.ckpt", "metrics.log"};
  for (std::uint64_t e = total_epochs - keep + 1; e <= total_epochs; ++e) files.push_back("tail/" + epoch_label(e) + ".ckpt");
  write_marker(Stage::supernet, files);
}

inline void Experiment::stage_sgld() {
  require_complete(Stage::supernet);
  const auto& train = data().train;
  const auto d = dir(Stage::sgld);
  const auto seed = stage_seed(cfg_.seed, Stage::sgld);
  BatchStream stream(train, cfg_.supernet.batch_size, seed);
  const auto spe = stream.steps_per_epoch();
  const SgldConfig sc{cfg_.sgld_alpha(), cfg_.sgld.epochs * spe, spe, cfg_.sgld.l2, seed, cfg_.sgld.noise_scale};

  // Resume from the last snapshot on disk; the chain state there is exact.
  std::size_t have = 0;
  if (opts_.resume)
    while (have < cfg_.sgld.epochs && fs::exists(d / (snapshot_label(have + 1) + ".ckpt"))) ++have;
  SharedParameterStore store = have ? load_store(d / (snapshot_label(have) + ".ckpt"))
                                    : load_store(dir(Stage::supernet) / "theta_T.ckpt");
  if (have) note("sgld: resuming after snapshot " + std::to_string(have));

  MetricsLog log(d / "metrics.log", tag(Stage::sgld), have * spe);
  run_sgld(
      store, space_, policy_, stream, sc,
      [&](std::size_t k, const SharedParameterStore& s) {
        log.flush();
        save_checkpoint((d / (snapshot_label(k) + ".ckpt")).string(), s, k * spe, tag(Stage::sgld));
      },
      [&](const StepRecord& r) { log.record(r); }, have * spe);
  log.flush();

  std::vector<std::string> files{"metrics.log"};
  for (std::size_t k = 1; k <= cfg_.sgld.epochs; ++k) files.push_back(snapshot_label(k) + ".ckpt");
  write_marker(Stage::sgld, files);
}

inline void Experiment::stage_ground_truth() {
  const auto& splits = data();
  const auto d = dir(Stage::ground_truth);
  fs::create_directories(d / "runs");
  const auto genomes = ground_truth_genomes();
  const auto& gs = cfg_.ground_truth.schedule;

  {
    std::ostringstream os;
    os << "index,genome_hash,cost,genome\n";
    for (std::size_t i = 0; i < genomes.size(); ++i)
      os << i << "," << hex64(genomes[i].hash()) << "," << fmt_g17(genome_cost(space_, genomes[i])) << ","
         << genomes[i].to_string() << "\n";
    write_text_artifact(d / "architectures.csv", tag(Stage::ground_truth), os.str());
  }

  auto result_path = [&](std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "arch_%02zu.result", i);
    return d / "runs" / buf;
  };
  auto log_path = [&](std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "arch_%02zu.log", i);
    return d / "runs" / buf;
  };
  auto finished = [&](std::size_t i) -> std::optional<double> {
    if (!opts_.resume || !fs::exists(result_path(i))) return std::nullopt;
    const auto a = read_checked(result_path(i));
    if (a.lines.size() != 1) return std::nullopt;
    return parse_double_field(a.lines[0], result_path(i));
  };

  std::vector<double> acc(genomes.size(), 0.0);
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < genomes.size(); ++i) {
    if (auto v = finished(i))
      acc[i] = *v;
    else
      todo.push_back(i);
  }

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::optional<Error> first_error;
  std::mutex note_mu;
  auto worker = [&] {
    for (std::size_t k = next++; k < todo.size(); k = next++) {
      const auto i = todo[k];
      try {
        const auto seed = stage_seed(cfg_.seed, Stage::ground_truth, i + 1);
        BatchStream stream(splits.train, gs.batch_size, seed);
        const TrainSchedule sched{gs.epochs * stream.steps_per_epoch(), gs.batch_size, gs.kind, gs.lr0,
                                  gs.lr_final,                          gs.l2,         seed};
        MetricsLog log(log_path(i), tag(Stage::ground_truth));
        TrainObserver obs;
        obs.on_step = [&](const StepRecord& r) { log.record(r); };
        const auto r = train_independent(space_, genomes[i], stream, splits.val, sched, cfg_.init, obs);
        log.flush();
        acc[i] = r.val_accuracy;
        write_text_artifact(result_path(i), tag(Stage::ground_truth), fmt_g17(r.val_accuracy) + "\n");
        std::lock_guard<std::mutex> g(note_mu);
        note("ground_truth: architecture " + std::to_string(i) + " accuracy " + fmt_g17(r.val_accuracy));
      } catch (const Error& e) {
        std::lock_guard<std::mutex> g(err_mu);
        if (!first_error) first_error = e;
        next = todo.size();
      }
    }
  };
  const auto n_threads = std::min<std::size_t>(cfg_.ground_truth.threads, std::max<std::size_t>(todo.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (first_error) throw *first_error;

  std::ostringstream os;
  os << "index,genome_hash,accuracy\n";
  for (std::size_t i = 0; i < genomes.size(); ++i) os << i << "," << hex64(genomes[i].hash()) << "," << fmt_g17(acc[i]) << "\n";
  write_text_artifact(d / "ground_truth.csv", tag(Stage::ground_truth), os.str());

  std::vector<std::string> files{"architectures.csv", "ground_truth.csv"};
  for (std::size_t i = 0; i < genomes.size(); ++i) {
    files.push_back(fs::relative(result_path(i), d).string());
    files.push_back(fs::relative(log_path(i), d).string());
  }
  write_marker(Stage::ground_truth, files);
}

inline std::vector<double> Experiment::read_ground_truth() const {
  const auto path = dir(Stage::ground_truth) / "ground_truth.csv";
  const auto rows = csv_rows(read_checked(path), "index,genome_hash,accuracy", path);
  const auto genomes = ground_truth_genomes();
  if (rows.size() != genomes.size()) fail(ErrorCategory::mismatch, "'" + path.string() + "' has the wrong row count");
  std::vector<double> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i][1] != hex64(genomes[i].hash()))
      fail(ErrorCategory::mismatch, "'" + path.string() + "': row " + std::to_string(i) + " is for another genome");
    out.push_back(parse_double_field(rows[i][2], path));
  }
  return out;
}

inline constexpr const char* kScoreColumns = "genome_hash,estimator,checkpoint,score,eval_hash";

inline void Experiment::write_scores(const fs::path& path, const std::vector<ScoreRecord>& records) const {
  std::ostringstream os;
  os << kScoreColumns << "\n";
  for (const auto& r : records)
    os << hex64(r.genome_hash) << "," << estimator_name(r.estimator) << "," << r.checkpoint << "," << fmt_g17(r.score)
       << "," << hex64(r.eval_hash) << "\n";
  write_text_artifact(path, tag(Stage::rank), os.str());
}

inline std::vector<ScoreRecord> Experiment::read_scores(const fs::path& path,
                                                        const std::vector<std::uint64_t>& hashes) const {
  std::vector<ScoreRecord> out;
  for (const auto& row : csv_rows(read_checked(path), kScoreColumns, path)) {
    ScoreRecord r;
    try {
      r.genome_hash = parse_hex64(row[0]);
      r.eval_hash = parse_hex64(row[4]);
    } catch (const std::invalid_argument&) {
      fail(ErrorCategory::parse, "'" + path.string() + "': bad hash field");
    }
    r.estimator = parse_estimator(row[1]);
    r.checkpoint = row[2];
    r.score = parse_double_field(row[3], path);
    out.push_back(std::move(r));
  }
  group_scores(out, hashes);  // validates completeness
  return out;
}

inline void Experiment::stage_rank() {
  require_complete(Stage::supernet);
  require_complete(Stage::sgld);
  require_complete(Stage::ground_truth);
  const auto d = dir(Stage::rank);
  const auto genomes = ground_truth_genomes();
  std::vector<std::uint64_t> hashes;
  for (const auto& g : genomes) hashes.push_back(g.hash());
  const auto scores_path = d / "scores.csv";

  std::vector<ScoreRecord> records;
  bool have_scores = false;
  if (fs::exists(scores_path)) {
    try {
      records = read_scores(scores_path, hashes);
      have_scores = true;
      note("rank: reusing persisted scores");
    } catch (const Error& e) {
      note(std::string("rank: rescoring (") + e.what() + ")");
    }
  }
  if (!have_scores) {
    const auto& splits = data();
    const auto eval_hash = splits.val.hash();
    auto emit = [&](EstimatorTag t, const std::string& ck, const std::vector<double>& v) {
      for (std::size_t m = 0; m < v.size(); ++m) records.push_back({hashes[m], t, ck, v[m], eval_hash});
    };

    // Tail-of-training checkpoints: single-checkpoint scores and the tail_* averages.
    const auto E = cfg_.supernet.epochs;
    const auto keep = tail_keep();
    const auto k_avg = std::min<std::uint64_t>(cfg_.sgld.epochs, E);
    SnapshotScorer tail(space_, genomes, splits.val);
    for (std::uint64_t e = E - keep + 1; e <= E; ++e) {
      const auto store = load_store(dir(Stage::supernet) / "tail" / (epoch_label(e) + ".ckpt"));
      if (e + k_avg > E) {
        emit(EstimatorTag::single, epoch_label(e), tail.add(store));
      } else {
        std::vector<double> v;
        for (const auto& g : genomes) v.push_back(accuracy(store, space_, g, splits.val));
        emit(EstimatorTag::single, epoch_label(e), v);
      }
    }
    emit(EstimatorTag::tail_acc, "-", tail.score_expectation());
    emit(EstimatorTag::tail_param, "-", tail.parameter_expectation());

    SnapshotScorer chain(space_, genomes, splits.val);
    for (std::size_t k = 1; k <= cfg_.sgld.epochs; ++k)
      emit(EstimatorTag::snapshot, snapshot_label(k),
           chain.add(load_store(dir(Stage::sgld) / (snapshot_label(k) + ".ckpt"))));
    emit(EstimatorTag::sgld_acc, "-", chain.score_expectation());
    emit(EstimatorTag::sgld_param, "-", chain.parameter_expectation());

    const auto theta = load_store(dir(Stage::supernet) / "theta_T.ckpt");
    std::vector<double> ft;
    for (std::size_t m = 0; m < genomes.size(); ++m) {
      BatchStream stream(splits.train, cfg_.supernet.batch_size, stage_seed(cfg_.seed, Stage::rank, m + 1));
      ft.push_back(fine_tune(theta, space_, genomes[m], stream, splits.val,
                             {cfg_.estimation.finetune_lr, cfg_.estimation.finetune_steps, cfg_.supernet.l2}));
    }
    emit(EstimatorTag::finetune, "-", ft);
    emit(EstimatorTag::ground_truth, "-", read_ground_truth());
    write_scores(scores_path, records);
  }

  const auto rows = tau_table(records, hashes, cfg_.estimation.tail);
  std::ostringstream os;
  os << "estimator,checkpoint,tau\n";
  for (const auto& r : rows) os << r.estimator << "," << r.checkpoint << "," << fmt_g17(r.tau) << "\n";
  write_text_artifact(d / "tau.csv", tag(Stage::rank), os.str());
  write_marker(Stage::rank, {"scores.csv", "tau.csv"});
}

inline void Experiment::stage_search() {
  require_complete(Stage::supernet);
  const auto& splits = data();
  const auto d = dir(Stage::search);
  const auto est = cfg_.evolution.estimator;

  // Stores the scorer needs; S_s-type scorers keep every snapshot in memory.
  std::vector<SharedParameterStore> stores;
  auto chain_paths = [&] {
    require_complete(Stage::sgld);
    std::vector<fs::path> p;
    for (std::size_t k = 1; k <= cfg_.sgld.epochs; ++k) p.push_back(dir(Stage::sgld) / (snapshot_label(k) + ".ckpt"));
    return p;
  };
  auto tail_paths = [&] {
    std::vector<fs::path> p;
    const auto E = cfg_.supernet.epochs;
    for (std::uint64_t e = E - std::min<std::uint64_t>(cfg_.sgld.epochs, E) + 1; e <= E; ++e)
      p.push_back(dir(Stage::supernet) / "tail" / (epoch_label(e) + ".ckpt"));
    return p;
  };
  switch (est) {
    case EstimatorTag::single:
    case EstimatorTag::finetune:
      stores.push_back(load_store(dir(Stage::supernet) / "theta_T.ckpt"));
      break;
    case EstimatorTag::sgld_param:
    case EstimatorTag::tail_param: {
      ParameterSum sum;
      for (const auto& p : est == EstimatorTag::sgld_param ? chain_paths() : tail_paths()) sum.add(load_store(p));
      stores.push_back(sum.mean());
      break;
    }
    case EstimatorTag::sgld_acc:
    case EstimatorTag::tail_acc:
    case EstimatorTag::snapshot:
      for (const auto& p : est == EstimatorTag::tail_acc ? tail_paths() : chain_paths()) stores.push_back(load_store(p));
      break;
    case EstimatorTag::ground_truth:
      fail(ErrorCategory::invalid_argument, "ground truth cannot drive the search");
  }

  const auto ft_seed = stage_seed(cfg_.seed, Stage::search, 1);
  const Scorer scorer = [&](const ArchitectureGenome& g) -> double {
    if (est == EstimatorTag::finetune) {
      BatchStream stream(splits.train, cfg_.supernet.batch_size, ft_seed ^ g.hash());
      return fine_tune(stores.front(), space_, g, stream, splits.val,
                       {cfg_.estimation.finetune_lr, cfg_.estimation.finetune_steps, cfg_.supernet.l2});
    }
    double sum = 0.0;
    for (const auto& s : stores) sum += accuracy(s, space_, g, splits.val);
    return sum / static_cast<double>(stores.size());
  };

  SearchConfig sc{cfg_.evolution.population, cfg_.evolution.generations, cfg_.evolution.mutation_rate,
                  stage_seed(cfg_.seed, Stage::search), cfg_.evolution.bands};
  std::ostringstream gens;
  gens << "generation,evaluations,scorer_calls,memo_hits,rank,crowding,cost,score,genome\n";
  const auto result = search(space_, scorer, sc, [&](const GenerationLog& g) {
    for (const auto& ind : g.population)
      gens << g.generation << "," << g.evaluations << "," << g.scorer_calls << "," << g.memo_hits << "," << ind.rank
           << "," << (std::isinf(ind.crowding) ? std::string("inf") : fmt_g17(ind.crowding)) << ","
           << fmt_g17(ind.cost) << "," << fmt_g17(ind.score) << "," << ind.genome.to_string() << "\n";
    note("search: generation " + std::to_string(g.generation) + " evaluations " + std::to_string(g.evaluations));
  });
  write_text_artifact(d / "generations.csv", tag(Stage::search), gens.str());

  std::ostringstream arch;
  arch << "cost,score,genome_hash,genome\n";
  for (const auto& ind : result.archive)
    arch << fmt_g17(ind.cost) << "," << fmt_g17(ind.score) << "," << hex64(ind.genome.hash()) << ","
         << ind.genome.to_string() << "\n";
  write_text_artifact(d / "archive.csv", tag(Stage::search), arch.str());

  std::ostringstream picks;
  picks << "band_lo,band_hi,cost,score,genome\n";
  for (std::size_t b = 0; b < result.picks.size(); ++b) {
    const auto& band = cfg_.evolution.bands[b];
    picks << fmt_g17(band.lo) << "," << (std::isinf(band.hi) ? std::string("inf") : fmt_g17(band.hi)) << ",";
    if (result.picks[b])
      picks << fmt_g17(result.picks[b]->cost) << "," << fmt_g17(result.picks[b]->score) << ","
            << result.picks[b]->genome.to_string() << "\n";
    else
      picks << "-,-,-\n";
  }
  write_text_artifact(d / "picks.csv", tag(Stage::search), picks.str());

  std::ostringstream summary;
  summary << "evaluations=" << result.evaluations << " scorer_calls=" << result.scorer_calls
          << " memo_hits=" << result.memo_hits << " failures=" << result.failures.size() << "\n";
  for (const auto& f : result.failures) summary << "failure genome=" << f.genome.to_string() << " error=" << f.message << "\n";
  write_text_artifact(d / "summary.txt", tag(Stage::search), summary.str());
  write_marker(Stage::search, {"generations.csv", "archive.csv", "picks.csv", "summary.txt"});
}

inline void Experiment::stage_report() {
  require_complete(Stage::rank);
  const auto d = dir(Stage::report);
  const auto genomes = ground_truth_genomes();
  std::vector<std::uint64_t> hashes;
  for (const auto& g : genomes) hashes.push_back(g.hash());

  // Every artifact that feeds the report must come from this config.
  std::vector<fs::path> inputs{dir(Stage::dataset) / "summary.txt", dir(Stage::ground_truth) / "ground_truth.csv",
                               dir(Stage::rank) / "scores.csv", dir(Stage::rank) / "tau.csv"};
  const bool searched = stage_complete(Stage::search);
  if (searched) {
    inputs.push_back(dir(Stage::search) / "archive.csv");
    inputs.push_back(dir(Stage::search) / "picks.csv");
    inputs.push_back(dir(Stage::search) / "summary.txt");
  }
  std::map<fs::path, TextArtifact> art;
  for (const auto& p : inputs) {
    auto a = read_text_artifact(p);
    if (a.tag.config_hash != config_hash_)
      fail(ErrorCategory::mismatch, "refusing to aggregate '" + p.string() + "': config hash " +
                                        hex64(a.tag.config_hash) + " differs from " + hex64(config_hash_));
    art.emplace(p, std::move(a));
  }

  const auto records = read_scores(dir(Stage::rank) / "scores.csv", hashes);
  std::ostringstream traj;
  traj << "source,checkpoint,genome_hash,score,rank\n";
  for (const auto& t : rank_trajectories(records, hashes))
    traj << t.source << "," << t.checkpoint << "," << hex64(t.genome_hash) << "," << fmt_g17(t.score) << "," << t.rank
         << "\n";
  write_text_artifact(d / "rank_trajectories.csv", tag(Stage::report), traj.str());

  const auto tau_path = dir(Stage::rank) / "tau.csv";
  std::vector<TauRow> taus;
  for (const auto& row : csv_rows(art.at(tau_path), "estimator,checkpoint,tau", tau_path))
    taus.push_back({row[0], row[1], parse_double_field(row[2], tau_path)});

  std::ostringstream os;
  os << "config_hash=" << hex64(config_hash_) << " space_hash=" << hex64(space_.hash()) << " seed=" << cfg_.seed << "\n";
  os << "architectures=" << genomes.size() << " snapshots=" << cfg_.sgld.epochs << " tail=" << cfg_.estimation.tail << "\n";
  os << "tau:\n";
  for (const auto& r : taus)
    if (r.checkpoint == "-" || r.checkpoint == "median")
      os << "  " << r.estimator << (r.checkpoint == "median" ? " (median)" : "") << " " << fmt_g17(r.tau) << "\n";
  const auto single = find_tau(taus, "single", "median");
  const auto ss = find_tau(taus, "sgld_acc", "-");
  const auto sp = find_tau(taus, "sgld_param", "-");
  const auto tss = find_tau(taus, "tail_acc", "-");
  const auto tsp = find_tau(taus, "tail_param", "-");
  if (single && ss && sp)
    os << "sgld_vs_single=" << (std::max(*ss, *sp) >= *single ? "higher_or_equal" : "lower") << "\n";
  if (single && tss && tsp)
    os << "tail_vs_single=" << (std::max(*tss, *tsp) >= *single ? "higher_or_equal" : "lower") << "\n";
  if (searched) {
    const auto arch_path = dir(Stage::search) / "archive.csv";
    const auto rows = csv_rows(art.at(arch_path), "cost,score,genome_hash,genome", arch_path);
    os << "pareto_front=" << rows.size() << "\n";
    for (const auto& l : art.at(dir(Stage::search) / "summary.txt").lines)
      if (l.rfind("evaluations=", 0) == 0) os << l << "\n";
  }
  write_text_artifact(d / "summary.txt", tag(Stage::report), os.str());
  write_marker(Stage::report, {"rank_trajectories.csv", "summary.txt"});
}

// Stages a CLI subcommand runs: run-all covers everything up to `last`.
inline std::vector<Stage> stages_through(Stage last) {
  std::vector<Stage> out;
  for (auto s : kStages) {
    out.push_back(s);
    if (s == last) break;
  }
  return out;
}

inline void run_pipeline(const ExperimentConfig& cfg, const PipelineOptions& opts,
                         const std::vector<Stage>& stages = std::vector<Stage>(std::begin(kStages), std::end(kStages))) {
  Experiment ex(cfg, opts);
  ex.run(stages);
}

}  // namespace topo_nas
