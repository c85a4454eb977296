#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

// Run provenance: config hashing and the per-run report written next to
// every reconstruction output.

namespace qsm {

std::uint64_t fnv1a64(std::string_view bytes);
std::string fnv1a64_hex(std::string_view bytes);
std::uint64_t file_fnv64(const std::string& path);
std::string file_fnv64_hex(const std::string& path);

// Deterministic double formatting for CSV output (shortest round-trip is
// left to JSON; CSV uses %.17g).
std::string format_g17(double v);

struct ReconReport {
  std::string method;
  std::string config_hash;  // fnv64 hex of the resolved config JSON
  std::uint64_t seed = 0;
  int iterations = 0;
  bool converged = false;
  double final_objective = 0.0;
  nlohmann::json extra;  // per-method details

  nlohmann::json to_json() const;
  void save(const std::string& path) const;
};

}  // namespace qsm
