#pragma once

#include <utility>

#include "qsm/volume.hpp"

// K-space dipole kernel and the associated field operators.
//
// The susceptibility-to-field map is a circular convolution implemented in
// k-space: b = ifft(d .* fft(chi)), unnormalized forward FFT and (1/N)-scaled
// inverse, with the Lorentz-sphere dipole multiplier
//   d(k) = 1/3 - (k . b0)^2 / |k|^2,   d(0) := 0.
// k components are integer FFT frequencies scaled by 1/(n*voxel_size) per
// axis. On Nyquist planes (even n) the aliased frequency sign is ambiguous,
// so the multiplier is averaged over the sign choices there, keeping d
// exactly even on the grid for any b0 direction. d is then real and even,
// so the operator is self-adjoint and maps real volumes to real volumes
// (up to FFT round-off, which is measured and discarded).

namespace qsm {

struct KSpaceKernel {
  Dims dims;
  Vec3 voxel_size{1.0, 1.0, 1.0};
  Vec3 b0_dir{0.0, 0.0, 1.0};
  std::vector<double> d_values;  // x-fastest, same layout as Volume
};

// Per-voxel noise standard deviations plus the support mask.
// Fidelity contributions outside the support are zero; sd must be strictly
// positive inside it.
struct NoiseModel {
  Volume sd;
  BinaryMask support;

  void validate() const;
  // Also checks the model covers the expected grid.
  void validate(const Dims& expect) const;
};

KSpaceKernel build_dipole_kernel(Dims dims, Vec3 voxel_size, Vec3 b0_dir);

// b = F^H D F chi. Throws if the imaginary residue before discarding exceeds
// 1e-10 of max(|output|, |input|) in the 2-norm.
Volume forward_field(const Volume& chi, const KSpaceKernel& kernel);

// A^T y; d is real and even so this equals forward_field(y, kernel).
Volume adjoint_field(const Volume& y, const KSpaceKernel& kernel);

// value = sum_support ((A chi - b) / sd)^2
// grad  = 2 A^T (support .* (A chi - b) / sd^2)
// The 1/2 factor and Monte-Carlo averaging used by the variational objective
// are applied by the caller.
std::pair<double, Volume> fidelity_value_grad(const Volume& chi, const Volume& b,
                                              const NoiseModel& noise,
                                              const KSpaceKernel& kernel);

}  // namespace qsm
