#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qsm/dipole.hpp"
#include "qsm/map_solver.hpp"
#include "qsm/volume.hpp"

// Mean-field Gaussian variational inference over the susceptibility map.
// The posterior factorizes per voxel, q(x) = N(mu, diag(exp(log_var))),
// and the fit minimizes a KL-style objective whose cross terms are
// estimated by Monte Carlo through the reparameterization
// x_k = mu + exp(log_var/2) .* eps_k, eps_k ~ N(0, I):
//
//   L = -1/2 sum_v log_var_v
//       + 1/(2K) sum_k R(x_k)          (edge-masked smoothed TV)
//       + 1/(2K) sum_k F(x_k)          (weighted field fidelity, unhalved)
//
// The entropy term's gradient is analytic (-1/2 per voxel of log_var);
// the MC terms back-propagate through the sampling path: d/dmu = g_k,
// d/dlog_var = g_k .* (x_k - mu) / 2.

namespace qsm {

inline constexpr double kLogVarMin = -30.0;
inline constexpr double kLogVarMax = 5.0;

struct VariationalParams {
  Volume mu;
  Volume log_var;

  void validate(const char* context) const;
  void clamp_log_var();
  // mu = 0, log_var = ln(init_var) everywhere.
  static VariationalParams zero_init(const Dims& dims, const Vec3& voxel_size,
                                     double init_var = 1e-4);
};

enum class LrDecay { None, Linear };

struct ViConfig {
  int mc_samples = 5;
  double lr = 1e-3;
  int iterations = 100;
  LrDecay decay = LrDecay::None;
  std::uint64_t seed = 0;

  void validate() const;
};

ViConfig vi_config_from_json(const nlohmann::json& j);
nlohmann::json vi_config_to_json(const ViConfig& cfg);

struct KlTraceRow {
  int iter = 0;
  double entropy = 0.0;   // -1/2 sum log_var
  double prior = 0.0;     // MC average of R / 2
  double fidelity = 0.0;  // MC average of F / 2
  double total = 0.0;     // entropy + prior + fidelity, exactly
};

struct KlTrace {
  std::vector<KlTraceRow> rows;
  void write_csv(const std::string& path) const;
};

struct KlGrads {
  Volume d_mu;
  Volume d_log_var;
};

struct KlEval {
  KlTraceRow terms;  // iter field unused here
  KlGrads grads;
  // Standard error of the MC estimate (prior + fidelity part; the entropy
  // term is exact).  Zero when K == 1.
  double mc_standard_error = 0.0;
};

// One objective evaluation with K fresh samples from `rng`.  The generator
// is taken by value: two calls with equal-state generators see identical
// noise, which is what the inference-gap comparison relies on.
KlEval kl_objective(const VariationalParams& params, const Volume& b,
                    const NoiseModel& noise, const KSpaceKernel& kernel,
                    const RegConfig& reg, int mc_samples, SeededRng rng);

struct EntropyCheck {
  double analytic = 0.0;  // 1/2 sum (1 + ln 2*pi + log_var)
  double mc = 0.0;        // sample mean of -log q(x_s)
  double standard_error = 0.0;
  double z = 0.0;
  bool pass = false;  // |z| <= 4
};

// Validates the sampler against the closed-form Gaussian entropy.
EntropyCheck entropy_consistency_check(const VariationalParams& params,
                                       int n_samples, std::uint64_t seed);

struct ViError : std::runtime_error {
  KlTrace trace;
  ViError(const std::string& what, KlTrace t)
      : std::runtime_error(what), trace(std::move(t)) {}
};

struct ViResult {
  VariationalParams params;
  KlTrace trace;  // one row per iteration, evaluated before the update
};

// Subject-specific fit: Adam on (mu, log_var) with per-iteration MC
// objective evaluations.  Deterministic for a fixed config seed.
ViResult fit_subject_vi(const Volume& b, const NoiseModel& noise,
                        const KSpaceKernel& kernel, const RegConfig& reg,
                        const ViConfig& cfg,
                        const VariationalParams* init = nullptr);

struct GapReport {
  KlTraceRow amortized;  // term values for the amortized parameters
  KlTraceRow subject;    // term values for the subject-fit parameters
  double amortized_se = 0.0;
  double subject_se = 0.0;
  double gap = 0.0;  // amortized total - subject total
  double gap_se = 0.0;

  nlohmann::json to_json() const;
};

// Evaluates both parameter sets on the same task with identical noise
// draws (shared seed), so identical parameters give a gap of exactly zero.
GapReport inference_gap_report(const VariationalParams& amortized,
                               const VariationalParams& subject,
                               const Volume& b, const NoiseModel& noise,
                               const KSpaceKernel& kernel, const RegConfig& reg,
                               int mc_samples, std::uint64_t seed);

}  // namespace qsm
