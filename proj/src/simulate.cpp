#include "qsm/simulate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace qsm {

namespace {

int margin_voxels(int n, double margin) { return int(std::lround(margin * n)); }

struct Box {
  Vec3 lo, hi;  // mm, inclusive bounds
};

// Support box in mm, voxel centers at (i + 0.5 - n/2) * voxel_size.
Box support_box_mm(const PhantomSpec& s) {
  Box b;
  for (int a = 0; a < 3; ++a) {
    const int n = a == 0 ? s.dims.nx : a == 1 ? s.dims.ny : s.dims.nz;
    const int m = margin_voxels(n, s.support_margin);
    b.lo[a] = (m - n / 2.0) * s.voxel_size[a];
    b.hi[a] = (n - m - n / 2.0) * s.voxel_size[a];
  }
  return b;
}

Box bounding_box(const Primitive& p) {
  Box b;
  for (int a = 0; a < 3; ++a) {
    double half = 0.0;
    switch (p.shape) {
      case Primitive::Shape::Sphere: half = p.radius_mm; break;
      case Primitive::Shape::Cylinder:
        half = a == 2 ? p.length_mm / 2.0 : p.radius_mm;
        break;
      case Primitive::Shape::Cuboid: half = p.size_mm[a] / 2.0; break;
    }
    b.lo[a] = p.center_mm[a] - half;
    b.hi[a] = p.center_mm[a] + half;
  }
  return b;
}

bool contains(const Primitive& p, const Vec3& q) {
  const double dx = q[0] - p.center_mm[0];
  const double dy = q[1] - p.center_mm[1];
  const double dz = q[2] - p.center_mm[2];
  switch (p.shape) {
    case Primitive::Shape::Sphere:
      return dx * dx + dy * dy + dz * dz <= p.radius_mm * p.radius_mm;
    case Primitive::Shape::Cylinder:
      return dx * dx + dy * dy <= p.radius_mm * p.radius_mm &&
             std::abs(dz) <= p.length_mm / 2.0;
    case Primitive::Shape::Cuboid:
      return std::abs(dx) <= p.size_mm[0] / 2.0 && std::abs(dy) <= p.size_mm[1] / 2.0 &&
             std::abs(dz) <= p.size_mm[2] / 2.0;
  }
  return false;
}

double wrap_to_pi(double x) {
  x = std::fmod(x + M_PI, 2.0 * M_PI);
  if (x < 0) x += 2.0 * M_PI;
  return x - M_PI;
}

}  // namespace

void PhantomSpec::validate() const {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0)
    throw std::invalid_argument("phantom spec: non-positive dims");
  for (double s : voxel_size)
    if (!(s > 0.0)) throw std::invalid_argument("phantom spec: non-positive voxel size");
  if (!(support_margin >= 0.0) || support_margin >= 0.5)
    throw std::invalid_argument("phantom spec: support_margin must be in [0, 0.5)");
  if (background_m0 < 0.0 || background_r2star < 0.0)
    throw std::invalid_argument("phantom spec: background m0 and r2star must be >= 0");
  for (const Primitive& p : primitives) {
    if (p.chi_ppm < -1.0 || p.chi_ppm > 2.0)
      throw std::invalid_argument("phantom spec: susceptibility outside [-1, 2] ppm");
    if (p.m0 < 0.0 || p.r2star_per_ms < 0.0)
      throw std::invalid_argument("phantom spec: m0 and r2star must be >= 0");
  }
}

void EchoConfig::validate() const {
  if (echo_times_ms.size() < 2)
    throw std::invalid_argument("echo config: need at least 2 echoes");
  for (std::size_t j = 1; j < echo_times_ms.size(); ++j)
    if (!(echo_times_ms[j] > echo_times_ms[j - 1]))
      throw std::invalid_argument("echo config: echo times must be strictly increasing");
  if (noise_sd < 0.0) throw std::invalid_argument("echo config: noise_sd must be >= 0");
  if (!(phase_scale > 0.0)) throw std::invalid_argument("echo config: phase_scale must be > 0");
  if (!(sd_floor > 0.0)) throw std::invalid_argument("echo config: sd_floor must be > 0");
}

TissueMaps build_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Box support = support_box_mm(spec);
  for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
    const Box bb = bounding_box(spec.primitives[i]);
    for (int a = 0; a < 3; ++a)
      if (bb.lo[a] < support.lo[a] || bb.hi[a] > support.hi[a])
        throw std::invalid_argument("phantom spec: primitive " + std::to_string(i) +
                                    " extends outside the support box");
  }

  const Dims d = spec.dims;
  TissueMaps maps{Volume(d, spec.voxel_size), Volume(d, spec.voxel_size),
                  Volume(d, spec.voxel_size), BinaryMask(d)};

  const int mx = margin_voxels(d.nx, spec.support_margin);
  const int my = margin_voxels(d.ny, spec.support_margin);
  const int mz = margin_voxels(d.nz, spec.support_margin);

  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        const bool in_support = x >= mx && x < d.nx - mx && y >= my && y < d.ny - my &&
                                z >= mz && z < d.nz - mz;
        if (!in_support) continue;
        maps.support.set(x, y, z, true);
        const std::size_t i = d.idx(x, y, z);
        maps.m0.data[i] = spec.background_m0;
        maps.r2star.data[i] = spec.background_r2star;
        const Vec3 q{(x + 0.5 - d.nx / 2.0) * spec.voxel_size[0],
                     (y + 0.5 - d.ny / 2.0) * spec.voxel_size[1],
                     (z + 0.5 - d.nz / 2.0) * spec.voxel_size[2]};
        for (const Primitive& p : spec.primitives) {
          if (contains(p, q)) {
            maps.chi.data[i] = p.chi_ppm;
            maps.m0.data[i] = p.m0;
            maps.r2star.data[i] = p.r2star_per_ms;
          }
        }
      }
    }
  }
  return maps;
}

Volume synthesize_field(const TissueMaps& maps, const KSpaceKernel& kernel) {
  return forward_field(maps.chi, kernel);
}

std::vector<ComplexVolume> synthesize_echoes(const TissueMaps& maps, const Volume& field,
                                             const EchoConfig& cfg, SeededRng& rng) {
  cfg.validate();
  if (field.dims != maps.chi.dims)
    throw std::invalid_argument("synthesize_echoes: field dims do not match maps");

  std::vector<ComplexVolume> echoes;
  echoes.reserve(cfg.echo_times_ms.size());
  for (double t : cfg.echo_times_ms) {
    ComplexVolume e(field.dims, field.voxel_size);
    for (std::size_t i = 0; i < e.data.size(); ++i) {
      const double mag = maps.m0.data[i] * std::exp(-maps.r2star.data[i] * t);
      const double phase = field.data[i] * cfg.phase_scale * t;
      std::complex<double> s(mag * std::cos(phase), mag * std::sin(phase));
      if (cfg.noise_sd > 0.0) {
        const double nre = cfg.noise_sd * rng.normal();
        const double nim = cfg.noise_sd * rng.normal();
        s += std::complex<double>(nre, nim);
      }
      e.data[i] = s;
    }
    echoes.push_back(std::move(e));
  }
  return echoes;
}

FitResult fit_field(const std::vector<ComplexVolume>& echoes, const EchoConfig& cfg) {
  cfg.validate();
  const std::size_t nj = cfg.echo_times_ms.size();
  if (echoes.size() != nj)
    throw std::invalid_argument("fit_field: echo count does not match config");
  for (const auto& e : echoes)
    if (e.dims != echoes[0].dims) throw std::invalid_argument("fit_field: echo dims differ");

  const Dims d = echoes[0].dims;
  FitResult out{Volume(d, echoes[0].voxel_size), Volume(d, echoes[0].voxel_size, cfg.sd_floor),
                BinaryMask(d)};

  std::vector<double> psi(nj), w(nj);
  const std::vector<double>& t = cfg.echo_times_ms;

  for (std::size_t i = 0; i < d.count(); ++i) {
    bool degenerate = false;
    int live = 0;
    for (std::size_t j = 0; j < nj; ++j) {
      const std::complex<double>& s = echoes[j].data[i];
      const double mag2 = std::norm(s);
      w[j] = mag2;
      if (mag2 > 0.0) ++live;
      psi[j] = std::arg(s);
    }
    if (live < 2) degenerate = true;

    if (!degenerate) {
      // Temporal unwrapping of successive phase differences.
      for (std::size_t j = 1; j < nj; ++j)
        psi[j] = psi[j - 1] + wrap_to_pi(psi[j] - psi[j - 1]);

      double sw = 0, swt = 0, swp = 0;
      for (std::size_t j = 0; j < nj; ++j) {
        sw += w[j];
        swt += w[j] * t[j];
        swp += w[j] * psi[j];
      }
      const double tbar = swt / sw, pbar = swp / sw;
      double stt = 0, stp = 0;
      for (std::size_t j = 0; j < nj; ++j) {
        stt += w[j] * (t[j] - tbar) * (t[j] - tbar);
        stp += w[j] * (t[j] - tbar) * (psi[j] - pbar);
      }
      if (stt <= 0.0) {
        degenerate = true;
      } else {
        const double slope = stp / stt;
        const double icept = pbar - slope * tbar;
        double wrss = 0.0;
        for (std::size_t j = 0; j < nj; ++j) {
          const double r = psi[j] - icept - slope * t[j];
          wrss += w[j] * r * r;
        }
        const double sigma2 = nj > 2 ? wrss / double(nj - 2) : 0.0;
        out.field.data[i] = slope / cfg.phase_scale;
        out.sd.data[i] = std::max(std::sqrt(sigma2 / stt) / cfg.phase_scale, cfg.sd_floor);
      }
    }
    if (degenerate) {
      out.field.data[i] = 0.0;
      out.sd.data[i] = cfg.sd_floor;
      out.flagged.data[i] = 1;
    }
  }
  return out;
}

std::vector<FitResult> run_ensemble(const TissueMaps& maps, const KSpaceKernel& kernel,
                                    const EchoConfig& cfg, int n_repeats,
                                    std::uint64_t base_seed, int threads) {
  if (n_repeats < 1) throw std::invalid_argument("run_ensemble: n_repeats must be >= 1");
  const Volume field = synthesize_field(maps, kernel);
  const SeededRng base(base_seed);
  std::vector<FitResult> results(n_repeats);
  auto run_one = [&](int i) {
    SeededRng rng = base.child(std::uint64_t(i));
    const auto echoes = synthesize_echoes(maps, field, cfg, rng);
    results[i] = fit_field(echoes, cfg);
  };
  threads = std::max(1, std::min(threads, n_repeats));
  if (threads == 1) {
    for (int i = 0; i < n_repeats; ++i) run_one(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (int i = next.fetch_add(1); i < n_repeats; i = next.fetch_add(1))
          run_one(i);
      });
    for (auto& th : pool) th.join();
  }
  return results;
}

PhantomSpec random_phantom_spec(Dims dims, Vec3 voxel_size, std::uint64_t seed,
                                const RandomPhantomOptions& opt) {
  SeededRng rng = SeededRng(seed).child(0x9a0704);
  PhantomSpec spec;
  spec.dims = dims;
  spec.voxel_size = voxel_size;

  const Box support = support_box_mm(spec);
  const int count =
      opt.min_primitives +
      int(rng.next_u64() % std::uint64_t(opt.max_primitives - opt.min_primitives + 1));

  auto uniform_in = [&rng](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };

  for (int i = 0; i < count; ++i) {
    Primitive p;
    const int shape = int(rng.next_u64() % 3);
    const double span = std::min({support.hi[0] - support.lo[0], support.hi[1] - support.lo[1],
                                  support.hi[2] - support.lo[2]});
    const double rad = uniform_in(0.12, 0.24) * span;
    switch (shape) {
      case 0:
        p.shape = Primitive::Shape::Sphere;
        p.radius_mm = rad;
        break;
      case 1:
        p.shape = Primitive::Shape::Cylinder;
        p.radius_mm = 0.7 * rad;
        p.length_mm = 2.2 * rad;
        break;
      default:
        p.shape = Primitive::Shape::Cuboid;
        p.size_mm = {1.6 * rad, 1.3 * rad, 1.1 * rad};
        break;
    }
    const Box bb0 = bounding_box(p);  // centered at origin so far
    for (int a = 0; a < 3; ++a) {
      const double half = bb0.hi[a];
      p.center_mm[a] = uniform_in(support.lo[a] + half, support.hi[a] - half);
    }
    p.chi_ppm = uniform_in(opt.chi_lo, opt.chi_hi);
    p.m0 = uniform_in(opt.m0_lo, opt.m0_hi);
    p.r2star_per_ms = uniform_in(opt.r2star_lo, opt.r2star_hi);
    spec.primitives.push_back(p);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// JSON config parsing. Errors carry the JSON pointer of the offending field.

namespace {

const nlohmann::json& field_at(const nlohmann::json& j, const char* key,
                               const std::string& ptr) {
  auto it = j.find(key);
  if (it == j.end()) throw std::runtime_error(ptr + "/" + key + ": missing field");
  return *it;
}

double num_at(const nlohmann::json& j, const char* key, const std::string& ptr) {
  const auto& f = field_at(j, key, ptr);
  if (!f.is_number()) throw std::runtime_error(ptr + "/" + key + ": expected number");
  return f.get<double>();
}

double num_or(const nlohmann::json& j, const char* key, const std::string& ptr, double dflt) {
  if (!j.contains(key)) return dflt;
  return num_at(j, key, ptr);
}

Vec3 vec3_at(const nlohmann::json& j, const char* key, const std::string& ptr) {
  const auto& f = field_at(j, key, ptr);
  if (!f.is_array() || f.size() != 3)
    throw std::runtime_error(ptr + "/" + key + ": expected array of 3 numbers");
  Vec3 v;
  for (int a = 0; a < 3; ++a) {
    if (!f[a].is_number())
      throw std::runtime_error(ptr + "/" + key + "/" + std::to_string(a) + ": expected number");
    v[a] = f[a].get<double>();
  }
  return v;
}

}  // namespace

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::runtime_error(": expected object");
  PhantomSpec spec;
  const auto& dims = field_at(j, "dims", "");
  if (!dims.is_array() || dims.size() != 3 || !dims[0].is_number_integer() ||
      !dims[1].is_number_integer() || !dims[2].is_number_integer())
    throw std::runtime_error("/dims: expected array of 3 integers");
  spec.dims = {dims[0].get<int>(), dims[1].get<int>(), dims[2].get<int>()};
  spec.voxel_size = vec3_at(j, "voxel_size_mm", "");
  spec.support_margin = num_or(j, "support_margin", "", spec.support_margin);
  if (j.contains("background")) {
    const auto& bg = j["background"];
    if (!bg.is_object()) throw std::runtime_error("/background: expected object");
    spec.background_m0 = num_or(bg, "m0", "/background", spec.background_m0);
    spec.background_r2star =
        num_or(bg, "r2star_per_ms", "/background", spec.background_r2star);
  }
  if (j.contains("primitives")) {
    const auto& prims = j["primitives"];
    if (!prims.is_array()) throw std::runtime_error("/primitives: expected array");
    for (std::size_t i = 0; i < prims.size(); ++i) {
      const std::string ptr = "/primitives/" + std::to_string(i);
      const auto& pj = prims[i];
      if (!pj.is_object()) throw std::runtime_error(ptr + ": expected object");
      Primitive p;
      const auto& shape = field_at(pj, "shape", ptr);
      if (!shape.is_string()) throw std::runtime_error(ptr + "/shape: expected string");
      const std::string s = shape.get<std::string>();
      if (s == "sphere") {
        p.shape = Primitive::Shape::Sphere;
        p.radius_mm = num_at(pj, "radius_mm", ptr);
      } else if (s == "cylinder") {
        p.shape = Primitive::Shape::Cylinder;
        p.radius_mm = num_at(pj, "radius_mm", ptr);
        p.length_mm = num_at(pj, "length_mm", ptr);
      } else if (s == "cuboid") {
        p.shape = Primitive::Shape::Cuboid;
        p.size_mm = vec3_at(pj, "size_mm", ptr);
      } else {
        throw std::runtime_error(ptr + "/shape: must be sphere, cylinder or cuboid");
      }
      p.center_mm = vec3_at(pj, "center_mm", ptr);
      p.chi_ppm = num_at(pj, "chi_ppm", ptr);
      p.m0 = num_or(pj, "m0", ptr, p.m0);
      p.r2star_per_ms = num_or(pj, "r2star_per_ms", ptr, p.r2star_per_ms);
      spec.primitives.push_back(p);
    }
  }
  spec.validate();
  return spec;
}

nlohmann::json phantom_spec_to_json(const PhantomSpec& spec) {
  nlohmann::json j;
  j["dims"] = {spec.dims.nx, spec.dims.ny, spec.dims.nz};
  j["voxel_size_mm"] = {spec.voxel_size[0], spec.voxel_size[1], spec.voxel_size[2]};
  j["support_margin"] = spec.support_margin;
  j["background"] = {{"m0", spec.background_m0}, {"r2star_per_ms", spec.background_r2star}};
  j["primitives"] = nlohmann::json::array();
  for (const Primitive& p : spec.primitives) {
    nlohmann::json pj;
    switch (p.shape) {
      case Primitive::Shape::Sphere:
        pj["shape"] = "sphere";
        pj["radius_mm"] = p.radius_mm;
        break;
      case Primitive::Shape::Cylinder:
        pj["shape"] = "cylinder";
        pj["radius_mm"] = p.radius_mm;
        pj["length_mm"] = p.length_mm;
        break;
      case Primitive::Shape::Cuboid:
        pj["shape"] = "cuboid";
        pj["size_mm"] = {p.size_mm[0], p.size_mm[1], p.size_mm[2]};
        break;
    }
    pj["center_mm"] = {p.center_mm[0], p.center_mm[1], p.center_mm[2]};
    pj["chi_ppm"] = p.chi_ppm;
    pj["m0"] = p.m0;
    pj["r2star_per_ms"] = p.r2star_per_ms;
    j["primitives"].push_back(pj);
  }
  return j;
}

EchoConfig echo_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::runtime_error(": expected object");
  EchoConfig cfg;
  if (j.contains("echo_times_ms")) {
    const auto& ts = j["echo_times_ms"];
    if (!ts.is_array() || ts.empty())
      throw std::runtime_error("/echo_times_ms: expected non-empty array");
    cfg.echo_times_ms.clear();
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (!ts[i].is_number())
        throw std::runtime_error("/echo_times_ms/" + std::to_string(i) + ": expected number");
      cfg.echo_times_ms.push_back(ts[i].get<double>());
    }
  }
  cfg.noise_sd = num_or(j, "noise_sd", "", cfg.noise_sd);
  cfg.phase_scale = num_or(j, "phase_scale_rad_per_ms", "", cfg.phase_scale);
  cfg.sd_floor = num_or(j, "sd_floor", "", cfg.sd_floor);
  cfg.validate();
  return cfg;
}

nlohmann::json echo_config_to_json(const EchoConfig& cfg) {
  nlohmann::json j;
  j["echo_times_ms"] = cfg.echo_times_ms;
  j["noise_sd"] = cfg.noise_sd;
  j["phase_scale_rad_per_ms"] = cfg.phase_scale;
  j["sd_floor"] = cfg.sd_floor;
  return j;
}

}  // namespace qsm
