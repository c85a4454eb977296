#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "qsm/dipole.hpp"
#include "qsm/volume.hpp"

using namespace qsm;

namespace {

double rel_linf(const Volume& a, const Volume& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    num = std::max(num, std::abs(a.data[i] - b.data[i]));
    den = std::max(den, std::abs(b.data[i]));
  }
  return num / std::max(den, 1e-300);
}

}  // namespace

TEST_CASE("kernel takes its closed-form values on pure axis frequencies") {
  // Cubic grid, unit voxels, b0 along +z.
  const Dims d{8, 8, 8};
  auto k = build_dipole_kernel(d, Vec3{1, 1, 1}, Vec3{0, 0, 1});
  REQUIRE(k.d_values.size() == d.count());

  // DC term is defined as zero.
  CHECK(k.d_values[d.idx(0, 0, 0)] == 0.0);

  // Pure kz: 1/3 - kz^2/kz^2 = -2/3, independent of the frequency magnitude.
  CHECK(k.d_values[d.idx(0, 0, 1)] == doctest::Approx(-2.0 / 3.0).epsilon(1e-15));
  CHECK(k.d_values[d.idx(0, 0, 3)] == doctest::Approx(-2.0 / 3.0).epsilon(1e-15));

  // Pure kx or ky: perpendicular to b0, so 1/3 exactly.
  CHECK(k.d_values[d.idx(2, 0, 0)] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(k.d_values[d.idx(0, 5, 0)] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // Magic angle: k = (1,1,1) on a unit cubic grid has cos^2 = 1/3, so d = 0.
  CHECK(std::abs(k.d_values[d.idx(1, 1, 1)]) < 1e-15);

  // Evenness on the grid: d(k) == d(-k mod n).
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const int mx = (d.nx - x) % d.nx;
        const int my = (d.ny - y) % d.ny;
        const int mz = (d.nz - z) % d.nz;
        CHECK(k.d_values[d.idx(x, y, z)] ==
              doctest::Approx(k.d_values[d.idx(mx, my, mz)]).epsilon(1e-14));
      }
}

TEST_CASE("kernel stays even on the grid for oblique field directions") {
  const Dims d{6, 8, 4};
  Vec3 b0{0.3, -0.2, 0.93};
  const double n = std::sqrt(b0[0] * b0[0] + b0[1] * b0[1] + b0[2] * b0[2]);
  for (auto& c : b0) c /= n;
  auto k = build_dipole_kernel(d, Vec3{0.8, 1.1, 2.0}, b0);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const int mx = (d.nx - x) % d.nx;
        const int my = (d.ny - y) % d.ny;
        const int mz = (d.nz - z) % d.nz;
        CHECK(std::abs(k.d_values[d.idx(x, y, z)] -
                       k.d_values[d.idx(mx, my, mz)]) < 1e-14);
      }
}

TEST_CASE("forward operator matches a direct DFT on an anisotropic grid") {
  const Dims d{6, 5, 4};
  auto k = build_dipole_kernel(d, Vec3{0.9, 1.2, 2.5}, Vec3{0, 0, 1});
  Volume x(d, k.voxel_size);
  SeededRng rng(2024);
  for (auto& v : x.data) v = rng.normal();

  Volume fast = forward_field(x, k);
  Volume slow = oracle::direct_dft_forward(x, k);
  CHECK(rel_linf(fast, slow) < 1e-10);
}

TEST_CASE("forward of a constant volume is identically zero") {
  const Dims d{8, 8, 8};
  auto k = build_dipole_kernel(d, Vec3{1, 1, 1}, Vec3{0, 0, 1});
  Volume c(d, k.voxel_size, 0.731);
  Volume out = forward_field(c, k);
  for (double v : out.data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("adjoint equals forward and satisfies the inner-product identity") {
  const Dims d{6, 6, 6};
  auto k = build_dipole_kernel(d, Vec3{1, 1, 1.5}, Vec3{0.1, 0.2, 0.97});
  SeededRng rng(99);
  Volume x(d, k.voxel_size), y(d, k.voxel_size);
  for (auto& v : x.data) v = rng.normal();
  for (auto& v : y.data) v = rng.normal();

  Volume ax = forward_field(x, k);
  Volume aty = adjoint_field(y, k);

  double lhs = 0, rhs = 0, nx = 0, ny = 0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    lhs += ax.data[i] * y.data[i];
    rhs += x.data[i] * aty.data[i];
    nx += ax.data[i] * ax.data[i];
    ny += aty.data[i] * aty.data[i];
  }
  CHECK(std::abs(lhs - rhs) / std::max({std::sqrt(nx * ny), 1e-30}) < 1e-12);
}

TEST_CASE("kernel construction validates its inputs") {
  CHECK_THROWS_AS(build_dipole_kernel(Dims{0, 4, 4}, Vec3{1, 1, 1}, Vec3{0, 0, 1}),
                  std::exception);
  CHECK_THROWS_AS(build_dipole_kernel(Dims{4, 4, 4}, Vec3{1, -1, 1}, Vec3{0, 0, 1}),
                  std::exception);
  CHECK_THROWS_AS(build_dipole_kernel(Dims{4, 4, 4}, Vec3{1, 1, 1}, Vec3{0, 0, 0}),
                  std::exception);
}

TEST_CASE("noise model validation enforces support, positivity, and shape") {
  const Dims d{3, 3, 3};
  NoiseModel nm;
  nm.sd = Volume(d, Vec3{1, 1, 1}, 0.01);
  nm.support = BinaryMask(d, true);
  CHECK_NOTHROW(nm.validate());
  CHECK_NOTHROW(nm.validate(d));
  CHECK_THROWS_AS(nm.validate(Dims{4, 3, 3}), std::exception);

  // Zero sd inside the support is rejected...
  nm.sd.data[d.idx(1, 1, 1)] = 0.0;
  CHECK_THROWS_AS(nm.validate(), std::exception);
  // ...but tolerated outside it.
  nm.support.set(1, 1, 1, false);
  CHECK_NOTHROW(nm.validate());
}

TEST_CASE("fidelity value and gradient follow the weighted normal equations") {
  const Dims d{4, 4, 4};
  auto k = build_dipole_kernel(d, Vec3{1, 1, 1}, Vec3{0, 0, 1});
  SeededRng rng(31);
  Volume chi(d, k.voxel_size), b(d, k.voxel_size);
  for (auto& v : chi.data) v = 0.1 * rng.normal();
  for (auto& v : b.data) v = 0.05 * rng.normal();
  NoiseModel nm;
  nm.sd = Volume(d, k.voxel_size);
  for (auto& v : nm.sd.data) v = 0.01 + 0.05 * rng.uniform();
  nm.support = BinaryMask(d, true);
  nm.support.set(0, 0, 0, false);
  nm.support.set(3, 2, 1, false);

  auto [value, grad] = fidelity_value_grad(chi, b, nm, k);

  // Value against a literal recomputation through the forward operator.
  Volume achi = forward_field(chi, k);
  double want = 0.0;
  for (std::size_t i = 0; i < achi.data.size(); ++i) {
    if (!nm.support.data[i]) continue;
    const double r = (achi.data[i] - b.data[i]) / nm.sd.data[i];
    want += r * r;
  }
  CHECK(value == doctest::Approx(want).epsilon(1e-12));

  // Gradient against central differences on a handful of coordinates.
  auto eval = [&]() { return fidelity_value_grad(chi, b, nm, k).first; };
  const std::size_t coords[] = {0, 1, 13, 37, d.count() - 1};
  for (std::size_t c : coords) {
    const double h = 1e-6;
    const double x0 = chi.data[c];
    chi.data[c] = x0 + h;
    const double fp = eval();
    chi.data[c] = x0 - h;
    const double fm = eval();
    chi.data[c] = x0;
    const double fd = (fp - fm) / (2 * h);
    CHECK(std::abs(fd - grad.data[c]) /
              std::max({std::abs(fd), std::abs(grad.data[c]), 1e-6}) < 1e-5);
  }
}
