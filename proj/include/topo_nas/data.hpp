#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "topo_nas/backend.hpp"
#include "topo_nas/binary_io.hpp"
#include "topo_nas/errors.hpp"
#include "topo_nas/hash.hpp"
#include "topo_nas/rng.hpp"

namespace topo_nas {

struct Dataset {
  Matrix features;  // width x N, one sample per column
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t width() const noexcept { return static_cast<std::size_t>(features.rows()); }

  std::uint64_t hash() const {
    Fnv1a h;
    h.value(static_cast<std::uint64_t>(features.rows())).value(static_cast<std::uint64_t>(features.cols()));
    h.bytes(features.data(), sizeof(double) * static_cast<std::size_t>(features.size()));
    h.values(std::span<const int>(labels));
    h.value(static_cast<std::uint64_t>(num_classes));
    return h.digest();
  }

  Batch gather(std::span<const std::size_t> idx) const {
    Batch b;
    b.inputs.resize(features.rows(), static_cast<Eigen::Index>(idx.size()));
    b.labels.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      b.inputs.col(static_cast<Eigen::Index>(k)) = features.col(static_cast<Eigen::Index>(idx[k]));
      b.labels[k] = labels[idx[k]];
    }
    return b;
  }

  Batch all() const { return {features, labels}; }
};

struct DataSplits {
  Dataset train;
  Dataset val;
};

enum class DatasetKind { gaussian_mixture, composed_transform, file };

inline const char* dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::gaussian_mixture: return "gaussian-mixture";
    case DatasetKind::composed_transform: return "composed-transform";
    case DatasetKind::file: return "file";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "gaussian-mixture") return DatasetKind::gaussian_mixture;
  if (s == "composed-transform") return DatasetKind::composed_transform;
  if (s == "file") return DatasetKind::file;
  fail(ErrorCategory::parse, "unknown dataset generator '" + s + "'");
}

struct DatasetDescriptor {
  DatasetKind kind = DatasetKind::composed_transform;
  std::size_t num_classes = 4;
  std::size_t train_size = 4096;
  std::size_t val_size = 1024;
  std::size_t width = 8;          // must equal the search space's input width
  double separation = 4.0;        // gaussian-mixture: distance of class means from the origin
  std::size_t teacher_depth = 3;  // composed-transform: number of composed random tanh maps
  std::size_t teacher_width = 16;
  std::string path;               // file: external matrix container
};

namespace detail {

inline std::vector<std::size_t> class_quotas(std::size_t total, std::size_t classes) {
  std::vector<std::size_t> q(classes, total / classes);
  for (std::size_t c = 0; c < total % classes; ++c) ++q[c];
  return q;
}

// Draws samples from `draw` until each class quota is met; samples of a
// class whose quota is full are discarded.
template <typename Draw>
Dataset balanced_draw(std::size_t total, std::size_t classes, std::size_t width, Draw&& draw) {
  Dataset d;
  d.num_classes = classes;
  d.features.resize(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(total));
  d.labels.reserve(total);
  auto quota = class_quotas(total, classes);
  Vector x(static_cast<Eigen::Index>(width));
  std::size_t attempts = 0;
  while (d.labels.size() < total) {
    if (++attempts > 10000 * (total + 10))
      fail(ErrorCategory::infeasible, "dataset generator cannot fill a class-balanced split");
    const int y = draw(x);
    if (quota[static_cast<std::size_t>(y)] == 0) continue;
    --quota[static_cast<std::size_t>(y)];
    d.features.col(static_cast<Eigen::Index>(d.labels.size())) = x;
    d.labels.push_back(y);
  }
  return d;
}

// Random composed map: x -> tanh(W_k ... tanh(W_1 x)) -> class scores.
struct Teacher {
  std::vector<Matrix> layers;
  Matrix readout;

  Teacher(const DatasetDescriptor& desc, std::uint64_t seed) {
    CounterRng rng(seed, purpose::dataset, {0});
    std::size_t in = desc.width;
    auto gaussian = [&](std::size_t r, std::size_t c, double scale) {
      Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * rng.normal();
      return m;
    };
    for (std::size_t l = 0; l < desc.teacher_depth; ++l) {
      layers.push_back(gaussian(desc.teacher_width, in, 2.0 / std::sqrt(static_cast<double>(in))));
      in = desc.teacher_width;
    }
    readout = gaussian(desc.num_classes, in, 1.0 / std::sqrt(static_cast<double>(in)));
  }

  int label(const Vector& x) const {
    Vector h = x;
    for (const auto& w : layers) h = (w * h).array().tanh().matrix();
    Eigen::Index arg = 0;
    (readout * h).maxCoeff(&arg);
    return static_cast<int>(arg);
  }
};

}  // namespace detail

inline void check_descriptor(const DatasetDescriptor& d) {
  require(d.num_classes >= 2, "dataset needs at least two classes");
  require(d.train_size >= d.num_classes && d.val_size >= d.num_classes,
          "each split must hold at least one sample per class");
  require(d.width > 0, "dataset width must be positive");
}

// External matrix container (little-endian):
//   char[8] "TNASMAT1", u32 dtype (1 = f64), u32 reserved (0),
//   u64 rows, u64 cols, rows*cols f64 row-major.
// A dataset file stores one sample per row with the class label in the last
// column.
inline constexpr char kMatrixMagic[8] = {'T', 'N', 'A', 'S', 'M', 'A', 'T', '1'};

inline void save_matrix_file(const std::string& path, const Matrix& rows_by_cols) {
  ByteWriter w;
  w.raw(kMatrixMagic, 8).put<std::uint32_t>(1).put<std::uint32_t>(0);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(rows_by_cols.rows()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(rows_by_cols.cols()));
  for (Eigen::Index i = 0; i < rows_by_cols.rows(); ++i)
    for (Eigen::Index j = 0; j < rows_by_cols.cols(); ++j) w.put<double>(rows_by_cols(i, j));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCategory::io, "cannot open '" + path + "' for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) fail(ErrorCategory::io, "short write to '" + path + "'");
}

inline Matrix load_matrix_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::io, "cannot open '" + path + "'");
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(std::move(data), path);
  char magic[8];
  r.raw(magic, 8);
  if (std::string(magic, 8) != std::string(kMatrixMagic, 8))
    fail(ErrorCategory::parse, "'" + path + "': bad magic at byte offset 0");
  if (const auto dtype = r.get<std::uint32_t>(); dtype != 1)
    fail(ErrorCategory::parse, "'" + path + "': unsupported dtype " + std::to_string(dtype) + " at byte offset 8");
  r.get<std::uint32_t>();
  const auto rows = r.get<std::uint64_t>();
  const auto cols = r.get<std::uint64_t>();
  if (rows == 0 || cols == 0 || rows > (1u << 30) || cols > (1u << 20))
    fail(ErrorCategory::parse, "'" + path + "': implausible dimensions at byte offset 16");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::uint64_t i = 0; i < rows; ++i)
    for (std::uint64_t j = 0; j < cols; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r.get<double>();
  if (!r.done()) fail(ErrorCategory::parse, "'" + path + "': trailing bytes at offset " + std::to_string(r.offset()));
  return m;
}

inline void save_dataset_file(const std::string& path, const Dataset& d) {
  Matrix m(static_cast<Eigen::Index>(d.size()), d.features.rows() + 1);
  m.leftCols(d.features.rows()) = d.features.transpose();
  for (std::size_t i = 0; i < d.size(); ++i) m(static_cast<Eigen::Index>(i), d.features.rows()) = d.labels[i];
  save_matrix_file(path, m);
}

inline Dataset load_dataset_file(const std::string& path, std::size_t num_classes) {
  const Matrix m = load_matrix_file(path);
  if (m.cols() < 2) fail(ErrorCategory::parse, "'" + path + "': need at least one feature column and a label");
  Dataset d;
  d.num_classes = num_classes;
  d.features = m.leftCols(m.cols() - 1).transpose();
  d.labels.resize(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double v = m(i, m.cols() - 1);
    if (v != std::floor(v) || v < 0 || v >= static_cast<double>(num_classes))
      fail(ErrorCategory::parse, "'" + path + "': row " + std::to_string(i) + " has invalid label " +
                                     std::to_string(v));
    d.labels[static_cast<std::size_t>(i)] = static_cast<int>(v);
  }
  return d;
}

inline DataSplits make_dataset(const DatasetDescriptor& desc, std::uint64_t seed) {
  check_descriptor(desc);
  const auto C = desc.num_classes;
  DataSplits s;
  switch (desc.kind) {
    case DatasetKind::gaussian_mixture: {
      Matrix means(static_cast<Eigen::Index>(desc.width), static_cast<Eigen::Index>(C));
      CounterRng mrng(seed, purpose::dataset, {0});
      for (std::size_t c = 0; c < C; ++c) {
        Vector v(static_cast<Eigen::Index>(desc.width));
        for (auto& x : v) x = mrng.normal();
        means.col(static_cast<Eigen::Index>(c)) = desc.separation * v.normalized();
      }
      auto split = [&](std::size_t n, std::uint64_t part) {
        CounterRng rng(seed, purpose::dataset, {part});
        return detail::balanced_draw(n, C, desc.width, [&](Vector& x) {
          const auto y = static_cast<int>(rng.below(C));
          for (auto& v : x) v = rng.normal();
          x += means.col(y);
          return y;
        });
      };
      s.train = split(desc.train_size, 1);
      s.val = split(desc.val_size, 2);
      break;
    }
    case DatasetKind::composed_transform: {
      const detail::Teacher teacher(desc, seed);
      auto split = [&](std::size_t n, std::uint64_t part) {
        CounterRng rng(seed, purpose::dataset, {part});
        return detail::balanced_draw(n, C, desc.width, [&](Vector& x) {
          for (auto& v : x) v = rng.normal();
          return teacher.label(x);
        });
      };
      s.train = split(desc.train_size, 1);
      s.val = split(desc.val_size, 2);
      break;
    }
    case DatasetKind::file: {
      Dataset all = load_dataset_file(desc.path, C);
      if (all.width() != desc.width)
        fail(ErrorCategory::mismatch, "dataset file width " + std::to_string(all.width()) +
                                          " differs from the configured input width " + std::to_string(desc.width));
      // Seeded shuffle, then a class-balanced validation split; the rest trains.
      std::vector<std::size_t> order(all.size());
      std::iota(order.begin(), order.end(), 0);
      CounterRng rng(seed, purpose::dataset, {3});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      auto quota = detail::class_quotas(desc.val_size, C);
      std::vector<std::size_t> val_idx, train_idx;
      for (auto i : order) {
        auto& q = quota[static_cast<std::size_t>(all.labels[i])];
        if (q > 0) {
          --q;
          val_idx.push_back(i);
        } else {
          train_idx.push_back(i);
        }
      }
      if (val_idx.size() != desc.val_size)
        fail(ErrorCategory::infeasible, "dataset file cannot supply a class-balanced validation split");
      auto take = [&](const std::vector<std::size_t>& idx) {
        Batch b = all.gather(idx);
        return Dataset{std::move(b.inputs), std::move(b.labels), C};
      };
      s.train = take(train_idx);
      s.val = take(val_idx);
      break;
    }
  }
  return s;
}

// Minibatches of a fixed split: one seeded permutation per epoch, consumed in
// ceil(N / B) batches (the last one may be short).
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(&data), batch_size_(batch_size), seed_(seed) {
    require(batch_size >= 1, "batch size must be at least 1");
    require(data.size() >= 1, "training split is empty");
  }

  std::size_t steps_per_epoch() const noexcept { return (data_->size() + batch_size_ - 1) / batch_size_; }
  std::size_t batch_size() const noexcept { return batch_size_; }
  const Dataset& data() const noexcept { return *data_; }

  Batch batch(std::uint64_t step) {
    const auto spe = steps_per_epoch();
    const auto epoch = step / spe;
    const auto pos = static_cast<std::size_t>(step % spe);
    if (epoch != cached_epoch_) {
      order_.resize(data_->size());
      std::iota(order_.begin(), order_.end(), 0);
      CounterRng rng(seed_, purpose::batch, {epoch});
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
      cached_epoch_ = epoch;
    }
    const auto begin = pos * batch_size_;
    const auto end = std::min(begin + batch_size_, data_->size());
    return data_->gather(std::span<const std::size_t>(order_.data() + begin, end - begin));
  }

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  std::vector<std::size_t> order_;
};

}  // namespace topo_nas
