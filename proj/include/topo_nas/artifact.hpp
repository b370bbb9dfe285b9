#pragma once

#include <cstdint>
#include <sstream>
#include <string>

#include "topo_nas/errors.hpp"
#include "topo_nas/hash.hpp"

#ifndef TOPO_NAS_BUILD_ID
#define TOPO_NAS_BUILD_ID "topo-nas-0.1.0"
#endif

namespace topo_nas {

inline constexpr const char* kBuildId = TOPO_NAS_BUILD_ID;

// Provenance stamped into every artifact the pipeline writes.
struct ArtifactTag {
  std::uint64_t config_hash = 0;
  std::uint64_t space_hash = 0;
  std::string stage;
  std::string build = kBuildId;

  // One-line text form, used as the first line of text artifacts.
  std::string header_line() const {
    return "# config_hash=" + hex64(config_hash) + " space_hash=" + hex64(space_hash) + " stage=" + stage +
           " build=" + build;
  }

  static ArtifactTag parse_header_line(const std::string& line) {
    ArtifactTag t;
    std::istringstream is(line);
    std::string tok;
    is >> tok;
    if (tok != "#") fail(ErrorCategory::parse, "artifact header missing: '" + line + "'");
    bool has_config = false;
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const auto key = tok.substr(0, eq);
      const auto val = tok.substr(eq + 1);
      try {
        if (key == "config_hash") {
          t.config_hash = parse_hex64(val);
          has_config = true;
        } else if (key == "space_hash") {
          t.space_hash = parse_hex64(val);
        } else if (key == "stage") {
          t.stage = val;
        } else if (key == "build") {
          t.build = val;
        }
      } catch (const std::invalid_argument&) {
        fail(ErrorCategory::parse, "bad hash in artifact header: '" + line + "'");
      }
    }
    if (!has_config) fail(ErrorCategory::parse, "artifact header lacks config_hash: '" + line + "'");
    return t;
  }

  friend bool operator==(const ArtifactTag&, const ArtifactTag&) = default;
};

}  // namespace topo_nas
