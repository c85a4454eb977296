#include "qsm/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "the .vol reader/writer assumes a little-endian host");

namespace qsm {

std::string to_string(const Dims& d) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "(%d,%d,%d)", d.nx, d.ny, d.nz);
  return buf;
}

Volume::Volume(Dims d, Vec3 vs, double fill)
    : dims(d), voxel_size(vs), data(d.count(), fill) {}

void Volume::validate(const char* context) const {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0)
    throw std::runtime_error(std::string(context) + ": non-positive dims " + to_string(dims));
  if (data.size() != dims.count())
    throw std::runtime_error(std::string(context) + ": data length " +
                             std::to_string(data.size()) + " does not match dims " +
                             to_string(dims));
  for (double s : voxel_size)
    if (!(s > 0.0) || !std::isfinite(s))
      throw std::runtime_error(std::string(context) + ": voxel size must be strictly positive");
  for (double v : data)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(context) + ": non-finite value");
}

ComplexVolume::ComplexVolume(Dims d, Vec3 vs)
    : dims(d), voxel_size(vs), data(d.count()) {}

void ComplexVolume::validate(const char* context) const {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0)
    throw std::runtime_error(std::string(context) + ": non-positive dims " + to_string(dims));
  if (data.size() != dims.count())
    throw std::runtime_error(std::string(context) + ": data length does not match dims");
  for (double s : voxel_size)
    if (!(s > 0.0) || !std::isfinite(s))
      throw std::runtime_error(std::string(context) + ": voxel size must be strictly positive");
  for (const auto& v : data)
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
      throw std::runtime_error(std::string(context) + ": non-finite value");
}

BinaryMask::BinaryMask(Dims d, bool fill) : dims(d), data(d.count(), fill ? 1 : 0) {}

std::size_t BinaryMask::count_true() const {
  return std::count_if(data.begin(), data.end(), [](std::uint8_t b) { return b != 0; });
}

// ---------------------------------------------------------------------------
// SeededRng

namespace {
std::uint64_t splitmix64(std::uint64_t& s) {
  s += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), state_(seed) {}

std::uint64_t SeededRng::next_u64() { return splitmix64(state_); }

double SeededRng::uniform() {
  return double(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform_pos() {
  return double((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double SeededRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform_pos();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

SeededRng SeededRng::child(std::uint64_t stream_id) const {
  // Mix (seed, stream_id) through the splitmix finalizer twice so that
  // nearby stream ids land far apart.
  std::uint64_t s = seed_ ^ 0x6a09e667f3bcc909ULL;
  splitmix64(s);
  s ^= stream_id;
  const std::uint64_t child_seed = splitmix64(s);
  return SeededRng(child_seed);
}

// ---------------------------------------------------------------------------
// .vol I/O

namespace {

struct VolHeader {
  Dims dims;
  Vec3 voxel_size;
  bool is_complex = false;
};

VolHeader read_header(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error(path + ": missing .vol header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": malformed .vol header: " + e.what());
  }
  VolHeader out;
  try {
    auto dims = h.at("dims");
    auto vs = h.at("voxel_size_mm");
    if (!dims.is_array() || dims.size() != 3 || !vs.is_array() || vs.size() != 3)
      throw std::runtime_error("dims and voxel_size_mm must be 3-element arrays");
    out.dims = {dims[0].get<int>(), dims[1].get<int>(), dims[2].get<int>()};
    out.voxel_size = {vs[0].get<double>(), vs[1].get<double>(), vs[2].get<double>()};
    const std::string dtype = h.at("dtype").get<std::string>();
    if (dtype != "f32le")
      throw std::runtime_error("unsupported dtype '" + dtype + "'");
    const std::string kind = h.at("kind").get<std::string>();
    if (kind == "real")
      out.is_complex = false;
    else if (kind == "complex")
      out.is_complex = true;
    else
      throw std::runtime_error("unsupported kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": malformed .vol header: " + e.what());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path + ": malformed .vol header: " + e.what());
  }
  if (out.dims.nx <= 0 || out.dims.ny <= 0 || out.dims.nz <= 0)
    throw std::runtime_error(path + ": malformed .vol header: non-positive dims");
  for (double s : out.voxel_size)
    if (!(s > 0.0))
      throw std::runtime_error(path + ": malformed .vol header: non-positive voxel size");
  return out;
}

std::vector<float> read_payload(std::istream& in, std::size_t n_floats,
                                const std::string& path) {
  std::vector<float> buf(n_floats);
  in.read(reinterpret_cast<char*>(buf.data()),
          std::streamsize(n_floats * sizeof(float)));
  if (std::size_t(in.gcount()) != n_floats * sizeof(float))
    throw std::runtime_error(path + ": payload size mismatch (file too short)");
  // Any trailing byte is also a size mismatch.
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error(path + ": payload size mismatch (trailing bytes)");
  return buf;
}

void write_header(std::ostream& out, const Dims& d, const Vec3& vs, bool complex_kind) {
  nlohmann::json h;
  h["dims"] = {d.nx, d.ny, d.nz};
  h["voxel_size_mm"] = {vs[0], vs[1], vs[2]};
  h["dtype"] = "f32le";
  h["kind"] = complex_kind ? "complex" : "real";
  out << h.dump() << '\n';
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open for reading");
  return in;
}

}  // namespace

Volume load_volume(const std::string& path) {
  std::ifstream in = open_in(path);
  const VolHeader h = read_header(in, path);
  if (h.is_complex)
    throw std::runtime_error(path + ": expected kind \"real\", file is complex");
  const std::vector<float> buf = read_payload(in, h.dims.count(), path);
  Volume v(h.dims, h.voxel_size);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    if (!std::isfinite(buf[i]))
      throw std::runtime_error(path + ": non-finite value in payload");
    v.data[i] = buf[i];
  }
  return v;
}

void save_volume(const Volume& v, const std::string& path) {
  v.validate("save_volume");
  std::ofstream out = open_out(path);
  write_header(out, v.dims, v.voxel_size, false);
  std::vector<float> buf(v.data.begin(), v.data.end());
  out.write(reinterpret_cast<const char*>(buf.data()),
            std::streamsize(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error(path + ": write failed");
}

ComplexVolume load_complex_volume(const std::string& path) {
  std::ifstream in = open_in(path);
  const VolHeader h = read_header(in, path);
  if (!h.is_complex)
    throw std::runtime_error(path + ": expected kind \"complex\", file is real");
  const std::vector<float> buf = read_payload(in, 2 * h.dims.count(), path);
  ComplexVolume v(h.dims, h.voxel_size);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    const float re = buf[2 * i], im = buf[2 * i + 1];
    if (!std::isfinite(re) || !std::isfinite(im))
      throw std::runtime_error(path + ": non-finite value in payload");
    v.data[i] = {double(re), double(im)};
  }
  return v;
}

void save_complex_volume(const ComplexVolume& v, const std::string& path) {
  v.validate("save_complex_volume");
  std::ofstream out = open_out(path);
  write_header(out, v.dims, v.voxel_size, true);
  std::vector<float> buf(2 * v.data.size());
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    buf[2 * i] = float(v.data[i].real());
    buf[2 * i + 1] = float(v.data[i].imag());
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            std::streamsize(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error(path + ": write failed");
}

BinaryMask load_mask(const std::string& path) {
  const Volume v = load_volume(path);
  BinaryMask m(v.dims);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    if (v.data[i] != 0.0 && v.data[i] != 1.0)
      throw std::runtime_error(path + ": mask values must be exactly 0 or 1");
    m.data[i] = v.data[i] != 0.0 ? 1 : 0;
  }
  return m;
}

void save_mask(const BinaryMask& m, const std::string& path) {
  Volume v(m.dims, {1.0, 1.0, 1.0});
  for (std::size_t i = 0; i < m.data.size(); ++i) v.data[i] = m.data[i] ? 1.0 : 0.0;
  save_volume(v, path);
}

void slice_to_pgm(const Volume& v, int axis, int index, double lo, double hi,
                  const std::string& path) {
  v.validate("slice_to_pgm");
  if (axis < 0 || axis > 2) throw std::invalid_argument("slice_to_pgm: axis must be 0, 1 or 2");
  if (!(lo < hi)) throw std::invalid_argument("slice_to_pgm: degenerate window (lo must be < hi)");
  const int extent = axis == 0 ? v.dims.nx : axis == 1 ? v.dims.ny : v.dims.nz;
  if (index < 0 || index >= extent)
    throw std::invalid_argument("slice_to_pgm: slice index out of range");

  int w, h;
  switch (axis) {
    case 0: w = v.dims.ny; h = v.dims.nz; break;
    case 1: w = v.dims.nx; h = v.dims.nz; break;
    default: w = v.dims.nx; h = v.dims.ny; break;
  }

  std::vector<std::uint8_t> pix(std::size_t(w) * h);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double val;
      switch (axis) {
        case 0: val = v.at(index, c, r); break;
        case 1: val = v.at(c, index, r); break;
        default: val = v.at(c, r, index); break;
      }
      double t = (val - lo) / (hi - lo);
      t = std::clamp(t, 0.0, 1.0);
      pix[std::size_t(r) * w + c] = std::uint8_t(std::lround(t * 255.0));
    }
  }

  std::ofstream out = open_out(path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pix.data()), std::streamsize(pix.size()));
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace qsm
