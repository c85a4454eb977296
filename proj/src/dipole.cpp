#include "qsm/dipole.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>

namespace qsm {

void NoiseModel::validate() const {
  sd.validate("noise sd map");
  if (sd.dims != support.dims)
    throw std::runtime_error("noise model: sd and support dims differ");
  for (std::size_t i = 0; i < sd.data.size(); ++i)
    if (support.data[i] && !(sd.data[i] > 0.0))
      throw std::runtime_error("noise model: sd must be strictly positive inside support");
}

void NoiseModel::validate(const Dims& expect) const {
  validate();
  if (sd.dims != expect)
    throw std::runtime_error("noise model: dims do not match the field grid");
}

namespace {

// Plans are cached per grid size; fftw planning is not thread-safe so the
// cache is mutex-guarded. Transforms run out-of-place on per-call buffers
// via the new-array interface, planned FFTW_UNALIGNED so buffer alignment
// does not matter.
struct PlanPair {
  fftw_plan fwd = nullptr;
  fftw_plan inv = nullptr;
};

PlanPair& plans_for(const Dims& d) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, PlanPair> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(d.nx, d.ny, d.nz);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  std::vector<std::complex<double>> a(d.count()), b(d.count());
  auto* pa = reinterpret_cast<fftw_complex*>(a.data());
  auto* pb = reinterpret_cast<fftw_complex*>(b.data());
  PlanPair p;
  // fftw is row-major with the last dimension fastest; our layout is
  // x-fastest, so x is fftw's last dimension.
  p.fwd = fftw_plan_dft_3d(d.nz, d.ny, d.nx, pa, pb, FFTW_FORWARD,
                           FFTW_ESTIMATE | FFTW_UNALIGNED);
  p.inv = fftw_plan_dft_3d(d.nz, d.ny, d.nx, pa, pb, FFTW_BACKWARD,
                           FFTW_ESTIMATE | FFTW_UNALIGNED);
  if (!p.fwd || !p.inv) throw std::runtime_error("fftw plan creation failed");
  return cache.emplace(key, p).first->second;
}

void exec(fftw_plan plan, std::vector<std::complex<double>>& in,
          std::vector<std::complex<double>>& out) {
  fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(in.data()),
                   reinterpret_cast<fftw_complex*>(out.data()));
}

int freq_index(int i, int n) { return i <= n / 2 ? i : i - n; }

}  // namespace

KSpaceKernel build_dipole_kernel(Dims dims, Vec3 voxel_size, Vec3 b0_dir) {
  if (dims.nx < 2 || dims.ny < 2 || dims.nz < 2)
    throw std::invalid_argument("build_dipole_kernel: dims must be >= 2 per axis");
  for (double s : voxel_size)
    if (!(s > 0.0) || !std::isnormal(s))
      throw std::invalid_argument("build_dipole_kernel: zero/denormal voxel size");
  const double norm = std::sqrt(b0_dir[0] * b0_dir[0] + b0_dir[1] * b0_dir[1] +
                                b0_dir[2] * b0_dir[2]);
  if (std::abs(norm - 1.0) > 1e-9)
    throw std::invalid_argument("build_dipole_kernel: b0_dir must be a unit vector");

  KSpaceKernel k;
  k.dims = dims;
  k.voxel_size = voxel_size;
  k.b0_dir = b0_dir;
  k.d_values.resize(dims.count());

  // A Nyquist index (n even, i = n/2) aliases the frequencies +n/2 and
  // -n/2 onto one bin, so for oblique b0 the cross terms of (k.b0)^2 have
  // no well-defined sign there and naive evaluation breaks the d[i] ==
  // d[n-i] symmetry that keeps the operator real and self-adjoint.  The
  // multiplier is therefore averaged over the aliased sign choices: cross
  // terms involving Nyquist axes cancel and their squares remain, which
  // leaves axis-aligned b0 unchanged and restores exact grid evenness.
  for (int iz = 0; iz < dims.nz; ++iz) {
    const bool nyq_z = dims.nz % 2 == 0 && iz == dims.nz / 2;
    const double kz = freq_index(iz, dims.nz) / (dims.nz * voxel_size[2]);
    for (int iy = 0; iy < dims.ny; ++iy) {
      const bool nyq_y = dims.ny % 2 == 0 && iy == dims.ny / 2;
      const double ky = freq_index(iy, dims.ny) / (dims.ny * voxel_size[1]);
      for (int ix = 0; ix < dims.nx; ++ix) {
        const bool nyq_x = dims.nx % 2 == 0 && ix == dims.nx / 2;
        const double kx = freq_index(ix, dims.nx) / (dims.nx * voxel_size[0]);
        const double k2 = kx * kx + ky * ky + kz * kz;
        double d = 0.0;
        if (k2 > 0.0) {
          const double px = kx * b0_dir[0];
          const double py = ky * b0_dir[1];
          const double pz = kz * b0_dir[2];
          double signed_sum = 0.0, nyq_sq = 0.0;
          if (nyq_x) nyq_sq += px * px; else signed_sum += px;
          if (nyq_y) nyq_sq += py * py; else signed_sum += py;
          if (nyq_z) nyq_sq += pz * pz; else signed_sum += pz;
          d = 1.0 / 3.0 - (signed_sum * signed_sum + nyq_sq) / k2;
        }
        k.d_values[dims.idx(ix, iy, iz)] = d;
      }
    }
  }
  return k;
}

Volume forward_field(const Volume& chi, const KSpaceKernel& kernel) {
  if (chi.dims != kernel.dims)
    throw std::invalid_argument("forward_field: volume dims " + to_string(chi.dims) +
                                " do not match kernel dims " + to_string(kernel.dims));
  const std::size_t n = chi.dims.count();
  PlanPair& plans = plans_for(chi.dims);

  std::vector<std::complex<double>> buf(n), spec(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = chi.data[i];
  exec(plans.fwd, buf, spec);
  for (std::size_t i = 0; i < n; ++i) spec[i] *= kernel.d_values[i];
  exec(plans.inv, spec, buf);

  const double scale = 1.0 / double(n);
  double re2 = 0.0, im2 = 0.0, in2 = 0.0;
  Volume out(chi.dims, chi.voxel_size);
  for (std::size_t i = 0; i < n; ++i) {
    const double re = buf[i].real() * scale;
    const double im = buf[i].imag() * scale;
    out.data[i] = re;
    re2 += re * re;
    im2 += im * im;
    in2 += chi.data[i] * chi.data[i];
  }
  const double ref = std::max(std::sqrt(re2), std::sqrt(in2));
  if (std::sqrt(im2) > 1e-10 * ref)
    throw std::runtime_error("forward_field: imaginary residue exceeds 1e-10 of output norm");
  return out;
}

Volume adjoint_field(const Volume& y, const KSpaceKernel& kernel) {
  if (y.dims != kernel.dims)
    throw std::invalid_argument("adjoint_field: volume dims do not match kernel dims");
  return forward_field(y, kernel);
}

std::pair<double, Volume> fidelity_value_grad(const Volume& chi, const Volume& b,
                                              const NoiseModel& noise,
                                              const KSpaceKernel& kernel) {
  if (chi.dims != b.dims || chi.dims != noise.sd.dims || chi.dims != kernel.dims)
    throw std::invalid_argument("fidelity_value_grad: dims mismatch");
  noise.validate();

  const Volume pred = forward_field(chi, kernel);
  double value = 0.0;
  Volume weighted(chi.dims, chi.voxel_size);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    if (!noise.support.data[i]) continue;
    const double r = pred.data[i] - b.data[i];
    const double sd = noise.sd.data[i];
    value += (r / sd) * (r / sd);
    weighted.data[i] = r / (sd * sd);
  }
  Volume grad = adjoint_field(weighted, kernel);
  for (double& g : grad.data) g *= 2.0;
  return {value, grad};
}

}  // namespace qsm
