#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "topo_nas/errors.hpp"
#include "topo_nas/hash.hpp"

namespace topo_nas {

static_assert(std::endian::native == std::endian::little, "binary containers are written little-endian");

// Append-only little-endian byte buffer.
class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  ByteWriter& put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
    return *this;
  }

  ByteWriter& raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
    return *this;
  }

  ByteWriter& string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    return raw(s.data(), s.size());
  }

  ByteWriter& matrix(const Eigen::MatrixXd& m) {
    put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    return raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }

  ByteWriter& vector(const Eigen::VectorXd& v) {
    put<std::uint32_t>(static_cast<std::uint32_t>(v.size()));
    return raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
  }

  const std::vector<char>& bytes() const noexcept { return buf_; }

  // Writes the buffer followed by an FNV-1a trailer over it.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCategory::io, "cannot open '" + path + "' for writing");
    const std::uint64_t trailer = Fnv1a{}.bytes(buf_.data(), buf_.size()).digest();
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    out.write(reinterpret_cast<const char*>(&trailer), sizeof(trailer));
    if (!out) fail(ErrorCategory::io, "short write to '" + path + "'");
  }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes, std::string origin = "<memory>")
      : buf_(std::move(bytes)), origin_(std::move(origin)) {}

  // Loads a file written by ByteWriter::save and verifies its trailer.
  static ByteReader load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCategory::io, "cannot open '" + path + "'");
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < sizeof(std::uint64_t)) fail(ErrorCategory::parse, "'" + path + "' is truncated");
    std::uint64_t trailer = 0;
    std::memcpy(&trailer, data.data() + data.size() - sizeof(trailer), sizeof(trailer));
    data.resize(data.size() - sizeof(trailer));
    if (Fnv1a{}.bytes(data.data(), data.size()).digest() != trailer)
      fail(ErrorCategory::parse, "'" + path + "' failed its integrity check");
    return ByteReader(std::move(data), path);
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }

  std::string string() {
    const auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  Eigen::MatrixXd matrix() {
    const auto r = get<std::uint32_t>();
    const auto c = get<std::uint32_t>();
    Eigen::MatrixXd m(r, c);
    raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
  }

  Eigen::VectorXd vector() {
    const auto n = get<std::uint32_t>();
    Eigen::VectorXd v(n);
    raw(v.data(), sizeof(double) * n);
    return v;
  }

  std::size_t offset() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size())
      fail(ErrorCategory::parse, "'" + origin_ + "' truncated at byte offset " + std::to_string(pos_));
  }

  std::vector<char> buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace topo_nas
