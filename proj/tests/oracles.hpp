#pragma once

// Independent reference implementations used to pin the fast paths:
// a direct O(N^2) DFT evaluation of the k-space convolution, central
// finite differences, and a small CSV reader for trace comparisons.

#include <cmath>
#include <complex>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/volume.hpp"

namespace oracle {

// Direct evaluation of b(r) = (1/N) sum_k d(k) X(k) e^{+2 pi i k.r/n} with
// X(k) = sum_r' x(r') e^{-2 pi i k.r'/n}, no FFT involved.  O(N^2); keep
// the grids tiny.
inline qsm::Volume direct_dft_forward(const qsm::Volume& x,
                                      const qsm::KSpaceKernel& kernel) {
  const qsm::Dims d = x.dims;
  const std::size_t n = d.count();
  const double two_pi = 2.0 * M_PI;
  std::vector<std::complex<double>> spec(n);
  for (int kz = 0; kz < d.nz; ++kz)
    for (int ky = 0; ky < d.ny; ++ky)
      for (int kx = 0; kx < d.nx; ++kx) {
        std::complex<double> acc(0.0, 0.0);
        for (int z = 0; z < d.nz; ++z)
          for (int y = 0; y < d.ny; ++y)
            for (int xx = 0; xx < d.nx; ++xx) {
              const double ang =
                  two_pi * (double(kx) * xx / d.nx + double(ky) * y / d.ny +
                            double(kz) * z / d.nz);
              acc += x.data[d.idx(xx, y, z)] *
                     std::complex<double>(std::cos(ang), -std::sin(ang));
            }
        spec[d.idx(kx, ky, kz)] = acc * kernel.d_values[d.idx(kx, ky, kz)];
      }
  qsm::Volume out(d, x.voxel_size);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int xx = 0; xx < d.nx; ++xx) {
        std::complex<double> acc(0.0, 0.0);
        for (int kz = 0; kz < d.nz; ++kz)
          for (int ky = 0; ky < d.ny; ++ky)
            for (int kx = 0; kx < d.nx; ++kx) {
              const double ang =
                  two_pi * (double(kx) * xx / d.nx + double(ky) * y / d.ny +
                            double(kz) * z / d.nz);
              acc += spec[d.idx(kx, ky, kz)] *
                     std::complex<double>(std::cos(ang), std::sin(ang));
            }
        out.data[d.idx(xx, y, z)] = acc.real() / double(n);
      }
  return out;
}

// Symmetric two-point derivative of f along coordinate i of x.
inline double central_fd(const std::function<double()>& f,
                         std::vector<double>& x, std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double fp = f();
  x[i] = x0 - h;
  const double fm = f();
  x[i] = x0;
  return (fp - fm) / (2.0 * h);
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline Csv read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  Csv csv;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    if (first) {
      while (std::getline(ss, tok, ',')) csv.header.push_back(tok);
      first = false;
      continue;
    }
    std::vector<double> row;
    while (std::getline(ss, tok, ',')) row.push_back(std::strtod(tok.c_str(), nullptr));
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

inline double max_rel_diff(const Csv& a, const Csv& b) {
  if (a.rows.size() != b.rows.size()) return 1e30;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    if (a.rows[i].size() != b.rows[i].size()) return 1e30;
    for (std::size_t j = 0; j < a.rows[i].size(); ++j) {
      const double d = std::abs(a.rows[i][j] - b.rows[i][j]) /
                       std::max(1.0, std::abs(b.rows[i][j]));
      worst = std::max(worst, d);
    }
  }
  return worst;
}

}  // namespace oracle
