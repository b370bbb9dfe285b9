#pragma once

#include <cstdint>
#include <string>

#include "topo_nas/artifact.hpp"
#include "topo_nas/backend.hpp"
#include "topo_nas/binary_io.hpp"

namespace topo_nas {

// Checkpoint container, format version 1 (little-endian):
//   char[8]  magic "TNASCKPT"
//   u32      format version
//   u64      space hash
//   u64      training step count
//   u64      store version counter
//   u64      config hash
//   str      stage name            (u32 length + bytes)
//   str      build identifier
//   u32      class count
//   u32      block count, then per block:
//              u32 edge, u32 candidate, expand W, expand b, project W, project b
//   head W, head b
//   u64      FNV-1a of all preceding bytes
// Matrices are u32 rows, u32 cols, column-major f64; vectors are u32 n, f64.

inline constexpr char kCheckpointMagic[8] = {'T', 'N', 'A', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointFormat = 1;

struct Checkpoint {
  SharedParameterStore store;
  std::uint64_t step = 0;
  ArtifactTag tag;
};

inline void save_checkpoint(const std::string& path, const SharedParameterStore& store, std::uint64_t step,
                            const ArtifactTag& tag) {
  ByteWriter w;
  w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointFormat);
  w.put<std::uint64_t>(store.space_hash());
  w.put<std::uint64_t>(step);
  w.put<std::uint64_t>(store.version());
  w.put<std::uint64_t>(tag.config_hash);
  w.string(tag.stage);
  w.string(tag.build);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.num_classes()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.num_blocks()));
  for (const auto& id : store.block_ids()) {
    const auto& b = store.block(id);
    w.put<std::uint32_t>(id.edge).put<std::uint32_t>(id.candidate);
    w.matrix(b.expand.w).vector(b.expand.b).matrix(b.project.w).vector(b.project.b);
  }
  w.matrix(store.head().w).vector(store.head().b);
  w.save(path);
}

// Loads into a store shaped by `space`; refuses a checkpoint written for a
// different space.
inline Checkpoint load_checkpoint(const std::string& path, const SearchSpaceSpec& space) {
  auto r = ByteReader::load(path);
  char magic[8];
  r.raw(magic, sizeof(magic));
  if (std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    fail(ErrorCategory::parse, "'" + path + "' is not a checkpoint");
  if (const auto fmt = r.get<std::uint32_t>(); fmt != kCheckpointFormat)
    fail(ErrorCategory::parse, "'" + path + "' has unsupported format version " + std::to_string(fmt));
  Checkpoint ck;
  ck.tag.space_hash = r.get<std::uint64_t>();
  if (ck.tag.space_hash != space.hash())
    fail(ErrorCategory::mismatch, "'" + path + "' was written for space " + hex64(ck.tag.space_hash) +
                                      ", expected " + hex64(space.hash()));
  ck.step = r.get<std::uint64_t>();
  const auto version = r.get<std::uint64_t>();
  ck.tag.config_hash = r.get<std::uint64_t>();
  ck.tag.stage = r.string();
  ck.tag.build = r.string();
  const auto classes = r.get<std::uint32_t>();
  ck.store = SharedParameterStore(space, classes);
  ck.store.set_version(version);
  const auto n = r.get<std::uint32_t>();
  if (n != ck.store.num_blocks()) fail(ErrorCategory::mismatch, "'" + path + "' block count differs from space");
  auto check_shape = [&](const auto& got, const auto& want) {
    if (got.rows() != want.rows() || got.cols() != want.cols())
      fail(ErrorCategory::mismatch, "'" + path + "' tensor shape differs from space");
  };
  for (std::uint32_t k = 0; k < n; ++k) {
    BlockId id{r.get<std::uint32_t>(), r.get<std::uint32_t>()};
    auto& b = ck.store.block(id);
    ParameterBlock loaded{{r.matrix(), r.vector()}, {r.matrix(), r.vector()}};
    check_shape(loaded.expand.w, b.expand.w);
    check_shape(loaded.expand.b, b.expand.b);
    check_shape(loaded.project.w, b.project.w);
    check_shape(loaded.project.b, b.project.b);
    b = std::move(loaded);
  }
  Dense head{r.matrix(), r.vector()};
  check_shape(head.w, ck.store.head().w);
  check_shape(head.b, ck.store.head().b);
  ck.store.head() = std::move(head);
  if (!r.done()) fail(ErrorCategory::parse, "'" + path + "' has trailing bytes");
  return ck;
}

}  // namespace topo_nas
