#include "qsm/vi.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "qsm/adam.hpp"
#include "qsm/report.hpp"

namespace qsm {
namespace {

Volume zeros_like(const Volume& v) {
  Volume out;
  out.dims = v.dims;
  out.voxel_size = v.voxel_size;
  out.data.assign(v.dims.count(), 0.0);
  return out;
}

}  // namespace

void VariationalParams::validate(const char* context) const {
  mu.validate(context);
  log_var.validate(context);
  if (!(mu.dims == log_var.dims))
    throw std::invalid_argument(std::string(context) +
                                ": mu/log_var dims mismatch");
}

void VariationalParams::clamp_log_var() {
  for (double& v : log_var.data) {
    if (v < kLogVarMin) v = kLogVarMin;
    if (v > kLogVarMax) v = kLogVarMax;
  }
}

VariationalParams VariationalParams::zero_init(const Dims& dims,
                                               const Vec3& voxel_size,
                                               double init_var) {
  if (!(init_var > 0.0))
    throw std::invalid_argument("VariationalParams: init_var must be > 0");
  VariationalParams p;
  p.mu.dims = dims;
  p.mu.voxel_size = voxel_size;
  p.mu.data.assign(dims.count(), 0.0);
  p.log_var = p.mu;
  const double lv = std::log(init_var);
  for (double& v : p.log_var.data) v = lv;
  p.clamp_log_var();
  return p;
}

void ViConfig::validate() const {
  if (mc_samples < 1)
    throw std::invalid_argument("ViConfig: mc_samples must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("ViConfig: lr must be > 0");
  if (iterations < 0)
    throw std::invalid_argument("ViConfig: iterations must be >= 0");
}

ViConfig vi_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::runtime_error(": expected object");
  ViConfig cfg;
  auto num_or = [&](const char* key, double dflt) {
    if (!j.contains(key)) return dflt;
    if (!j[key].is_number())
      throw std::runtime_error(std::string("/") + key + ": expected number");
    return j[key].get<double>();
  };
  auto int_or = [&](const char* key, int dflt) {
    if (!j.contains(key)) return dflt;
    if (!j[key].is_number_integer())
      throw std::runtime_error(std::string("/") + key + ": expected integer");
    return j[key].get<int>();
  };
  cfg.mc_samples = int_or("mc_samples", cfg.mc_samples);
  cfg.lr = num_or("lr", cfg.lr);
  cfg.iterations = int_or("iterations", cfg.iterations);
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer())
      throw std::runtime_error("/seed: expected integer");
    cfg.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("decay")) {
    if (!j["decay"].is_string())
      throw std::runtime_error("/decay: expected \"none\" or \"linear\"");
    const std::string d = j["decay"].get<std::string>();
    if (d == "none")
      cfg.decay = LrDecay::None;
    else if (d == "linear")
      cfg.decay = LrDecay::Linear;
    else
      throw std::runtime_error("/decay: expected \"none\" or \"linear\"");
  }
  cfg.validate();
  return cfg;
}

nlohmann::json vi_config_to_json(const ViConfig& cfg) {
  return {{"mc_samples", cfg.mc_samples},
          {"lr", cfg.lr},
          {"iterations", cfg.iterations},
          {"decay", cfg.decay == LrDecay::Linear ? "linear" : "none"},
          {"seed", cfg.seed}};
}

void KlTrace::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "iter,entropy,prior,fidelity,total\n";
  for (const auto& r : rows)
    out << r.iter << ',' << format_g17(r.entropy) << ',' << format_g17(r.prior)
        << ',' << format_g17(r.fidelity) << ',' << format_g17(r.total) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

KlEval kl_objective(const VariationalParams& params, const Volume& b,
                    const NoiseModel& noise, const KSpaceKernel& kernel,
                    const RegConfig& reg, int mc_samples, SeededRng rng) {
  params.validate("kl_objective params");
  if (!(params.mu.dims == b.dims))
    throw std::invalid_argument("kl_objective: params/field dims mismatch");
  if (mc_samples < 1)
    throw std::invalid_argument("kl_objective: mc_samples must be >= 1");

  const std::size_t n = params.mu.dims.count();
  KlEval ev;
  ev.grads.d_mu = zeros_like(params.mu);
  ev.grads.d_log_var = zeros_like(params.mu);

  // Exact entropy term and its gradient.
  double entropy = 0.0;
  for (std::size_t i = 0; i < n; ++i) entropy -= 0.5 * params.log_var.data[i];
  for (std::size_t i = 0; i < n; ++i) ev.grads.d_log_var.data[i] = -0.5;

  // sigma = exp(log_var / 2), reused across samples.
  std::vector<double> sigma(n);
  for (std::size_t i = 0; i < n; ++i)
    sigma[i] = std::exp(0.5 * params.log_var.data[i]);

  const double scale = 1.0 / (2.0 * mc_samples);
  Volume sample = zeros_like(params.mu);
  std::vector<double> eps(n);
  std::vector<double> per_sample(mc_samples);
  double prior = 0.0, fidelity = 0.0;
  for (int k = 0; k < mc_samples; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      eps[i] = rng.normal();
      sample.data[i] = params.mu.data[i] + sigma[i] * eps[i];
    }
    auto [tv, tv_grad] = tv_value_grad(sample, reg);
    auto [fid, fid_grad] = fidelity_value_grad(sample, b, noise, kernel);
    prior += scale * tv;
    fidelity += scale * fid;
    per_sample[k] = 0.5 * (tv + fid);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = scale * (tv_grad.data[i] + fid_grad.data[i]);
      ev.grads.d_mu.data[i] += g;
      ev.grads.d_log_var.data[i] += g * 0.5 * sigma[i] * eps[i];
    }
  }

  ev.terms.entropy = entropy;
  ev.terms.prior = prior;
  ev.terms.fidelity = fidelity;
  ev.terms.total = entropy + prior + fidelity;

  if (mc_samples > 1) {
    double mean = 0.0;
    for (double s : per_sample) mean += s;
    mean /= mc_samples;
    double var = 0.0;
    for (double s : per_sample) var += (s - mean) * (s - mean);
    var /= (mc_samples - 1);
    ev.mc_standard_error = std::sqrt(var / mc_samples);
  }
  return ev;
}

EntropyCheck entropy_consistency_check(const VariationalParams& params,
                                       int n_samples, std::uint64_t seed) {
  params.validate("entropy_consistency_check params");
  if (n_samples < 2)
    throw std::invalid_argument("entropy_consistency_check: need >= 2 samples");

  const std::size_t n = params.mu.dims.count();
  constexpr double ln_2pi = 1.8378770664093454836;  // log(2*pi)

  EntropyCheck chk;
  for (std::size_t i = 0; i < n; ++i)
    chk.analytic += 0.5 * (1.0 + ln_2pi + params.log_var.data[i]);

  // -log q(x_s) for x_s = mu + sigma .* eps reduces to
  // 1/2 sum_v (eps_v^2 + log_var_v + ln 2*pi); mu and sigma cancel.
  SeededRng rng(seed);
  std::vector<double> draws(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    double h = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = rng.normal();
      h += 0.5 * (e * e + params.log_var.data[i] + ln_2pi);
    }
    draws[s] = h;
  }
  double mean = 0.0;
  for (double d : draws) mean += d;
  mean /= n_samples;
  double var = 0.0;
  for (double d : draws) var += (d - mean) * (d - mean);
  var /= (n_samples - 1);
  chk.mc = mean;
  chk.standard_error = std::sqrt(var / n_samples);
  if (chk.standard_error > 0.0)
    chk.z = (chk.mc - chk.analytic) / chk.standard_error;
  else
    chk.z = (chk.mc == chk.analytic) ? 0.0 : std::numeric_limits<double>::infinity();
  chk.pass = std::abs(chk.z) <= 4.0;
  return chk;
}

ViResult fit_subject_vi(const Volume& b, const NoiseModel& noise,
                        const KSpaceKernel& kernel, const RegConfig& reg,
                        const ViConfig& cfg, const VariationalParams* init) {
  b.validate("fit_subject_vi field");
  noise.validate(b.dims);
  reg.validate(b.dims);
  cfg.validate();

  ViResult res;
  if (init) {
    res.params = *init;
    res.params.validate("fit_subject_vi init");
    if (!(res.params.mu.dims == b.dims))
      throw std::invalid_argument("fit_subject_vi: init dims mismatch");
  } else {
    res.params = VariationalParams::zero_init(b.dims, b.voxel_size);
  }
  res.params.clamp_log_var();

  const std::size_t n = b.dims.count();
  AdamState adam_mu(n), adam_lv(n);
  const SeededRng root(cfg.seed);

  for (int it = 0; it < cfg.iterations; ++it) {
    KlEval ev = kl_objective(res.params, b, noise, kernel, reg, cfg.mc_samples,
                             root.child(static_cast<std::uint64_t>(it)));
    ev.terms.iter = it;
    res.trace.rows.push_back(ev.terms);
    if (!std::isfinite(ev.terms.total))
      throw ViError("fit_subject_vi: non-finite objective at iteration " +
                        std::to_string(it),
                    res.trace);

    double lr = cfg.lr;
    if (cfg.decay == LrDecay::Linear)
      lr = cfg.lr * static_cast<double>(cfg.iterations - it) /
           static_cast<double>(cfg.iterations);
    adam_mu.update(res.params.mu.data, ev.grads.d_mu.data, lr);
    adam_lv.update(res.params.log_var.data, ev.grads.d_log_var.data, lr);
    res.params.clamp_log_var();
  }
  return res;
}

nlohmann::json GapReport::to_json() const {
  auto terms = [](const KlTraceRow& r, double se) {
    return nlohmann::json{{"entropy", r.entropy},
                          {"prior", r.prior},
                          {"fidelity", r.fidelity},
                          {"total", r.total},
                          {"mc_standard_error", se}};
  };
  return {{"amortized", terms(amortized, amortized_se)},
          {"subject", terms(subject, subject_se)},
          {"gap", gap},
          {"gap_standard_error", gap_se}};
}

GapReport inference_gap_report(const VariationalParams& amortized,
                               const VariationalParams& subject,
                               const Volume& b, const NoiseModel& noise,
                               const KSpaceKernel& kernel, const RegConfig& reg,
                               int mc_samples, std::uint64_t seed) {
  // Same generator state for both evaluations: the comparison sees
  // identical eps draws, so equal parameter sets gap to exactly zero.
  const KlEval a = kl_objective(amortized, b, noise, kernel, reg, mc_samples,
                                SeededRng(seed));
  const KlEval s = kl_objective(subject, b, noise, kernel, reg, mc_samples,
                                SeededRng(seed));
  GapReport rep;
  rep.amortized = a.terms;
  rep.subject = s.terms;
  rep.amortized_se = a.mc_standard_error;
  rep.subject_se = s.mc_standard_error;
  rep.gap = a.terms.total - s.terms.total;
  // Conservative: the shared draws correlate the two estimates, so the
  // true error of the difference is typically smaller than this.
  rep.gap_se = std::sqrt(a.mc_standard_error * a.mc_standard_error +
                         s.mc_standard_error * s.mc_standard_error);
  return rep;
}

}  // namespace qsm
