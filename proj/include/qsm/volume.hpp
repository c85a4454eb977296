#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

// Core 3D volume types and plumbing shared by all other modules.
//
// Voxel layout is fixed: x fastest, z slowest, i.e.
//   idx = x + nx*(y + ny*z)
// The same linearization is used by the FFT grid and the .vol file format.

namespace qsm {

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const { return std::size_t(nx) * ny * nz; }
  std::size_t idx(int x, int y, int z) const {
    return std::size_t(x) + std::size_t(nx) * (std::size_t(y) + std::size_t(ny) * z);
  }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

using Vec3 = std::array<double, 3>;

struct Volume {
  Dims dims;
  Vec3 voxel_size{1.0, 1.0, 1.0};  // mm
  std::vector<double> data;

  Volume() = default;
  Volume(Dims d, Vec3 vs, double fill = 0.0);

  double& at(int x, int y, int z) { return data[dims.idx(x, y, z)]; }
  double at(int x, int y, int z) const { return data[dims.idx(x, y, z)]; }
  std::size_t size() const { return data.size(); }

  // Throws if data length disagrees with dims, a voxel size is not
  // strictly positive, or any value is non-finite.
  void validate(const char* context = "volume") const;
};

struct ComplexVolume {
  Dims dims;
  Vec3 voxel_size{1.0, 1.0, 1.0};
  std::vector<std::complex<double>> data;

  ComplexVolume() = default;
  ComplexVolume(Dims d, Vec3 vs);

  std::complex<double>& at(int x, int y, int z) { return data[dims.idx(x, y, z)]; }
  const std::complex<double>& at(int x, int y, int z) const { return data[dims.idx(x, y, z)]; }

  void validate(const char* context = "complex volume") const;
};

struct BinaryMask {
  Dims dims;
  std::vector<std::uint8_t> data;  // 0 or 1

  BinaryMask() = default;
  explicit BinaryMask(Dims d, bool fill = false);

  bool at(int x, int y, int z) const { return data[dims.idx(x, y, z)] != 0; }
  void set(int x, int y, int z, bool v) { data[dims.idx(x, y, z)] = v ? 1 : 0; }
  std::size_t count_true() const;
};

// Counter-free seeded stream (splitmix64) with Box-Muller normals.
// Identical seed gives an identical sample sequence on every platform;
// std::random distributions are implementation-defined so they are not used.
// A stream has a single owner; parallel code derives child streams via
// child(stream_id) instead of sharing one stream.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();        // [0, 1)
  double uniform_pos();    // (0, 1]
  double normal();         // standard normal, Box-Muller with cached spare

  SeededRng child(std::uint64_t stream_id) const;
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// .vol file format: one UTF-8 JSON header line terminated by '\n' --
//   {"dims":[nx,ny,nz],"voxel_size_mm":[dx,dy,dz],"dtype":"f32le","kind":"real"}
// -- followed by raw little-endian 32-bit floats in x-fastest order.
// Complex volumes use kind "complex" with interleaved (re, im) pairs.
Volume load_volume(const std::string& path);
void save_volume(const Volume& v, const std::string& path);

ComplexVolume load_complex_volume(const std::string& path);
void save_complex_volume(const ComplexVolume& v, const std::string& path);

// Masks are stored as real .vol files with exact 0/1 values.
BinaryMask load_mask(const std::string& path);
void save_mask(const BinaryMask& m, const std::string& path);

// Writes one axis-aligned slice as a binary P5 PGM, maxval 255.
// Values are clamped to [lo, hi] then mapped linearly to 0..255 with
// round-half-away-from-zero, so the window midpoint maps to 128.
// axis 0 gives a (ny x nz) image, axis 1 (nx x nz), axis 2 (nx x ny);
// the faster-varying remaining axis runs along image rows.
void slice_to_pgm(const Volume& v, int axis, int index, double lo, double hi,
                  const std::string& path);

}  // namespace qsm
