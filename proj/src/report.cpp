#include "qsm/report.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace qsm {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a64_hex(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

std::uint64_t file_fnv64(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (n < static_cast<std::streamsize>(sizeof buf)) break;
  }
  return h;
}

std::string file_fnv64_hex(const std::string& path) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(file_fnv64(path)));
  return buf;
}

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json ReconReport::to_json() const {
  nlohmann::json j = {{"method", method},
                      {"config_hash", config_hash},
                      {"seed", seed},
                      {"iterations", iterations},
                      {"converged", converged},
                      {"final_objective", final_objective}};
  if (!extra.is_null()) j["extra"] = extra;
  return j;
}

void ReconReport::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace qsm
