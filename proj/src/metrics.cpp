#include "qsm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace qsm {
namespace {

void check_pair(const Volume& x, const Volume& ref, const BinaryMask& mask,
                const char* op) {
  x.validate(op);
  ref.validate(op);
  if (!(x.dims == ref.dims) || !(mask.dims == x.dims))
    throw std::invalid_argument(std::string(op) + ": dims mismatch");
  if (mask.count_true() == 0)
    throw std::invalid_argument(std::string(op) + ": empty mask");
}

// Separable Gaussian smoothing with replicate-edge padding (equivalent to
// the full outer-product kernel, since clamp extension is per-axis).
void gauss_axis(const std::vector<double>& in, std::vector<double>& out,
                const Dims& d, int axis, const std::vector<double>& w) {
  const int radius = static_cast<int>(w.size() / 2);
  const int extent[3] = {d.nx, d.ny, d.nz};
  out.resize(in.size());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        int c[3] = {x, y, z};
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          int cc[3] = {c[0], c[1], c[2]};
          cc[axis] = std::clamp(c[axis] + t, 0, extent[axis] - 1);
          acc += w[t + radius] * in[d.idx(cc[0], cc[1], cc[2])];
        }
        out[d.idx(x, y, z)] = acc;
      }
}

std::vector<double> gauss_smooth(const std::vector<double>& in, const Dims& d,
                                 const std::vector<double>& w) {
  std::vector<double> a, b;
  gauss_axis(in, a, d, 0, w);
  gauss_axis(a, b, d, 1, w);
  gauss_axis(b, a, d, 2, w);
  return a;
}

std::vector<double> gauss_window(double sigma, int width) {
  std::vector<double> w(width);
  const int radius = width / 2;
  double sum = 0.0;
  for (int i = 0; i < width; ++i) {
    const double t = static_cast<double>(i - radius);
    w[i] = std::exp(-t * t / (2.0 * sigma * sigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

}  // namespace

double rmse_pct(const Volume& x, const Volume& ref, const BinaryMask& mask) {
  check_pair(x, ref, mask, "rmse_pct");
  double err2 = 0.0, ref2 = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    if (!mask.data[i]) continue;
    const double d = x.data[i] - ref.data[i];
    err2 += d * d;
    ref2 += ref.data[i] * ref.data[i];
  }
  if (ref2 == 0.0)
    throw std::invalid_argument("rmse_pct: zero-norm reference on mask");
  return 100.0 * std::sqrt(err2 / ref2);
}

double psnr_db(const Volume& x, const Volume& ref, const BinaryMask& mask) {
  check_pair(x, ref, mask, "psnr_db");
  double err2 = 0.0, peak = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    if (!mask.data[i]) continue;
    const double d = x.data[i] - ref.data[i];
    err2 += d * d;
    peak = std::max(peak, std::abs(ref.data[i]));
    ++n;
  }
  if (peak == 0.0)
    throw std::invalid_argument("psnr_db: zero-peak reference on mask");
  if (err2 == 0.0) return std::numeric_limits<double>::infinity();
  const double rms = std::sqrt(err2 / static_cast<double>(n));
  return 20.0 * std::log10(peak / rms);
}

double ssim(const Volume& x, const Volume& ref, const BinaryMask& mask,
            const SsimParams& params) {
  check_pair(x, ref, mask, "ssim");
  if (!(params.sigma > 0.0) || params.window < 1 || params.window % 2 == 0)
    throw std::invalid_argument("ssim: bad window parameters");

  // Joint affine shift: both volumes minus the joint minimum; L = joint
  // range. Keeps the metric symmetric in its two arguments.
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : x.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : ref.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi - lo;
  if (range == 0.0) {
    if (x.data == ref.data) return 1.0;
    throw std::invalid_argument("ssim: degenerate joint range");
  }
  const Dims& d = x.dims;
  const std::size_t n = d.count();
  std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = x.data[i] - lo;
    b[i] = ref.data[i] - lo;
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const std::vector<double> w = gauss_window(params.sigma, params.window);
  const std::vector<double> mu_a = gauss_smooth(a, d, w);
  const std::vector<double> mu_b = gauss_smooth(b, d, w);
  const std::vector<double> m_aa = gauss_smooth(aa, d, w);
  const std::vector<double> m_bb = gauss_smooth(bb, d, w);
  const std::vector<double> m_ab = gauss_smooth(ab, d, w);

  const double c1 = (params.k1 * range) * (params.k1 * range);
  const double c2 = (params.k2 * range) * (params.k2 * range);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.data[i]) continue;
    const double va = m_aa[i] - mu_a[i] * mu_a[i];
    const double vb = m_bb[i] - mu_b[i] * mu_b[i];
    const double cov = m_ab[i] - mu_a[i] * mu_b[i];
    const double s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2)) /
                     ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) *
                      (va + vb + c2));
    sum += s;
    ++count;
  }
  return sum / static_cast<double>(count);
}

namespace {

// 15^3 Laplacian-of-Gaussian taps, zero-sum normalized.
std::vector<double> log_kernel(double sigma, int width) {
  const int radius = width / 2;
  std::vector<double> k(static_cast<std::size_t>(width) * width * width);
  const double s2 = sigma * sigma;
  std::size_t i = 0;
  double sum = 0.0;
  for (int z = -radius; z <= radius; ++z)
    for (int y = -radius; y <= radius; ++y)
      for (int x = -radius; x <= radius; ++x, ++i) {
        const double r2 = static_cast<double>(x * x + y * y + z * z);
        k[i] = (r2 - 3.0 * s2) * std::exp(-r2 / (2.0 * s2));
        sum += k[i];
      }
  const double mean = sum / static_cast<double>(k.size());
  for (double& v : k) v -= mean;
  return k;
}

std::vector<double> log_filter(const std::vector<double>& in, const Dims& d,
                               const std::vector<double>& k, int width) {
  const int radius = width / 2;
  std::vector<double> out(in.size());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double acc = 0.0;
        std::size_t ki = 0;
        for (int dz = -radius; dz <= radius; ++dz) {
          const int zz = std::clamp(z + dz, 0, d.nz - 1);
          for (int dy = -radius; dy <= radius; ++dy) {
            const int yy = std::clamp(y + dy, 0, d.ny - 1);
            for (int dx = -radius; dx <= radius; ++dx, ++ki) {
              const int xx = std::clamp(x + dx, 0, d.nx - 1);
              acc += k[ki] * in[d.idx(xx, yy, zz)];
            }
          }
        }
        out[d.idx(x, y, z)] = acc;
      }
  return out;
}

}  // namespace

double hfen_pct(const Volume& x, const Volume& ref, const BinaryMask& mask) {
  check_pair(x, ref, mask, "hfen_pct");
  constexpr double kSigma = 1.5;
  constexpr int kWidth = 15;
  const std::vector<double> k = log_kernel(kSigma, kWidth);
  const std::vector<double> fx = log_filter(x.data, x.dims, k, kWidth);
  const std::vector<double> fr = log_filter(ref.data, ref.dims, k, kWidth);
  double err2 = 0.0, ref2 = 0.0;
  for (std::size_t i = 0; i < fx.size(); ++i) {
    if (!mask.data[i]) continue;
    const double d = fx[i] - fr[i];
    err2 += d * d;
    ref2 += fr[i] * fr[i];
  }
  if (ref2 == 0.0)
    throw std::invalid_argument("hfen_pct: zero-norm filtered reference");
  return 100.0 * std::sqrt(err2 / ref2);
}

nlohmann::json MetricReport::to_json() const {
  return {{"psnr_db", psnr_db},
          {"rmse_pct", rmse_pct},
          {"ssim", ssim},
          {"hfen_pct", hfen_pct}};
}

MetricReport evaluate_all(const Volume& x, const Volume& ref,
                          const BinaryMask& mask) {
  MetricReport r;
  r.psnr_db = qsm::psnr_db(x, ref, mask);
  r.rmse_pct = qsm::rmse_pct(x, ref, mask);
  r.ssim = qsm::ssim(x, ref, mask);
  r.hfen_pct = qsm::hfen_pct(x, ref, mask);
  return r;
}

nlohmann::json UncertaintyReport::to_json() const {
  return {{"pearson_r", pearson_r},
          {"top_decile_overlap", top_decile_overlap},
          {"degenerate", degenerate}};
}

UncertaintyReport uncertainty_validation(const std::vector<Volume>& mu_ensemble,
                                         const Volume& truth,
                                         const Volume& sd_pred,
                                         const BinaryMask& mask) {
  if (mu_ensemble.size() < 2)
    throw std::invalid_argument("uncertainty_validation: need >= 2 ensemble members");
  check_pair(sd_pred, truth, mask, "uncertainty_validation");
  for (const auto& m : mu_ensemble) {
    m.validate("uncertainty_validation ensemble member");
    if (!(m.dims == truth.dims))
      throw std::invalid_argument("uncertainty_validation: ensemble dims mismatch");
  }

  UncertaintyReport rep;
  rep.mae_map.dims = truth.dims;
  rep.mae_map.voxel_size = truth.voxel_size;
  rep.mae_map.data.assign(truth.dims.count(), 0.0);
  for (const auto& m : mu_ensemble)
    for (std::size_t i = 0; i < m.data.size(); ++i)
      rep.mae_map.data[i] += std::abs(m.data[i] - truth.data[i]);
  const double inv_n = 1.0 / static_cast<double>(mu_ensemble.size());
  for (double& v : rep.mae_map.data) v *= inv_n;

  // Pearson correlation over the mask.
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.data.size(); ++i)
    if (mask.data[i]) idx.push_back(i);
  const double n = static_cast<double>(idx.size());
  double me = 0.0, ms = 0.0;
  for (std::size_t i : idx) {
    me += rep.mae_map.data[i];
    ms += sd_pred.data[i];
  }
  me /= n;
  ms /= n;
  double vee = 0.0, vss = 0.0, ves = 0.0;
  for (std::size_t i : idx) {
    const double de = rep.mae_map.data[i] - me;
    const double ds = sd_pred.data[i] - ms;
    vee += de * de;
    vss += ds * ds;
    ves += de * ds;
  }
  if (vee == 0.0 || vss == 0.0) {
    rep.degenerate = true;
    return rep;
  }
  rep.pearson_r = ves / std::sqrt(vee * vss);

  // Top-decile overlap: voxels ranked by value, ties broken by index.
  const std::size_t k = std::max<std::size_t>(
      1, static_cast<std::size_t>(idx.size() / 10));
  auto top_set = [&](const std::vector<double>& v) {
    std::vector<std::size_t> order = idx;
    std::nth_element(order.begin(), order.begin() + (k - 1), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       if (v[a] != v[b]) return v[a] > v[b];
                       return a < b;
                     });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
  };
  const std::vector<std::size_t> top_err = top_set(rep.mae_map.data);
  const std::vector<std::size_t> top_sd = top_set(sd_pred.data);
  std::vector<std::size_t> both;
  std::set_intersection(top_err.begin(), top_err.end(), top_sd.begin(),
                        top_sd.end(), std::back_inserter(both));
  rep.top_decile_overlap =
      static_cast<double>(both.size()) / static_cast<double>(k);
  return rep;
}

}  // namespace qsm
