#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/report.hpp"
#include "qsm/volume.hpp"

// MAP dipole inversion: morphology-weighted total variation plus the
// noise-weighted field fidelity, minimized by monotone gradient descent.
//
// The regularizer is an edge-masked smoothed TV on forward differences,
//
//   R(x) = lambda * sum_axes sum_v M_a(v) * sqrt(g_a(v)^2 + eps^2)
//
// where g_a(v) = x(v + e_a) - x(v) and the difference at the far boundary
// of each axis is zero (Neumann).  Masked entries (M_a = 0) sit where the
// magnitude image has strong edges, so susceptibility edges there go
// unpenalized.  The epsilon smoothing keeps the objective differentiable;
// note it contributes lambda*eps per active zero-gradient entry, so the
// objective of a constant image is not exactly zero.

namespace qsm {

// Per-axis binary penalty mask over forward-difference entries.
// axis[a][idx] == 1 means the difference along axis a at voxel idx is
// penalized; 0 means it is free (an expected edge).
struct EdgeMask {
  Dims dims;
  std::array<std::vector<std::uint8_t>, 3> axis;
  // Set by edge_mask_from_magnitude when the magnitude image had no
  // gradient content at all and the mask fell back to all-ones.
  bool degenerate = false;

  static EdgeMask all_ones(const Dims& dims);
  // Number of penalized entries summed over the three axes.
  std::size_t count_active() const;
  void validate(const Dims& expect) const;
};

// Build the edge mask from a magnitude image: for each axis, the largest
// keep_fraction of |forward difference| values inside the support are
// marked as edges (mask 0); everything else stays penalized.  Ties at the
// threshold stay penalized (strict >).  If the magnitude is constant along
// every axis the mask degenerates to all-ones and `degenerate` is set.
EdgeMask edge_mask_from_magnitude(const Volume& m0, const BinaryMask& support,
                                  double keep_fraction = 0.3);

struct RegConfig {
  double lambda = 20.0;
  double tv_epsilon = 1e-6;
  EdgeMask mask;

  void validate(const Dims& dims) const;
};

// Value and gradient of the edge-masked smoothed TV term (lambda included).
std::pair<double, Volume> tv_value_grad(const Volume& chi, const RegConfig& reg);

struct SolveOptions {
  int max_iters = 100;
  // Stop when the relative objective decrease falls below tol.
  double tol = 1e-6;
  // Line-search floor; stepping below this without descent is an error.
  double min_step = 1e-20;
  // Optional warm start; empty means start from zero.
  std::optional<Volume> init;
};

struct ObjectiveTraceRow {
  int iter = 0;
  double fidelity = 0.0;  // 0.5 * weighted residual norm^2
  double tv = 0.0;
  double total = 0.0;  // fidelity + tv, exactly
};

void write_objective_trace_csv(const std::vector<ObjectiveTraceRow>& rows,
                               const std::string& path);

// Thrown when the solver cannot make progress (non-finite objective or a
// failed line search); carries the trace collected so far.
struct SolveError : std::runtime_error {
  std::vector<ObjectiveTraceRow> trace;
  SolveError(const std::string& what, std::vector<ObjectiveTraceRow> t)
      : std::runtime_error(what), trace(std::move(t)) {}
};

struct MapResult {
  Volume chi;
  std::vector<ObjectiveTraceRow> trace;
  bool converged = false;  // tol reached before max_iters
  int iterations = 0;      // accepted descent steps taken
};

// Minimize 0.5*||(A x - b)/sd||^2_support + R(x) by gradient descent with
// Armijo backtracking.  The trace records the objective after every
// accepted step (row 0 is the starting point) and is strictly
// non-increasing in `total`.
MapResult solve_medi(const Volume& b, const NoiseModel& noise,
                     const KSpaceKernel& kernel, const RegConfig& reg,
                     const SolveOptions& opts = {});

}  // namespace qsm
