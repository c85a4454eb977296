#include "qsm/map_solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace qsm {
namespace {

constexpr double kArmijoC = 1e-4;
constexpr double kShrink = 0.5;
constexpr double kGrow = 2.0;
constexpr double kMaxStep = 1e8;

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

EdgeMask EdgeMask::all_ones(const Dims& dims) {
  EdgeMask m;
  m.dims = dims;
  for (auto& ax : m.axis) ax.assign(dims.count(), 1);
  return m;
}

std::size_t EdgeMask::count_active() const {
  std::size_t n = 0;
  for (const auto& ax : axis)
    for (std::uint8_t v : ax) n += v;
  return n;
}

void EdgeMask::validate(const Dims& expect) const {
  if (!(dims == expect)) throw std::invalid_argument("edge mask dims mismatch");
  for (const auto& ax : axis)
    if (ax.size() != expect.count())
      throw std::invalid_argument("edge mask axis size mismatch");
}

EdgeMask edge_mask_from_magnitude(const Volume& m0, const BinaryMask& support,
                                  double keep_fraction) {
  m0.validate("edge_mask_from_magnitude m0");
  if (!(support.dims == m0.dims))
    throw std::invalid_argument("edge_mask_from_magnitude: support dims mismatch");
  if (!(keep_fraction > 0.0 && keep_fraction < 1.0))
    throw std::invalid_argument("edge_mask_from_magnitude: keep_fraction must be in (0,1)");

  const Dims& d = m0.dims;
  EdgeMask mask = EdgeMask::all_ones(d);
  const int step[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const int extent[3] = {d.nx, d.ny, d.nz};

  bool any_content = false;
  for (int a = 0; a < 3; ++a) {
    // Collect |forward difference| over support voxels whose neighbor exists.
    std::vector<double> mags;
    mags.reserve(d.count());
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const int coord[3] = {x, y, z};
          if (coord[a] + 1 >= extent[a]) continue;
          if (!support.at(x, y, z)) continue;
          const std::size_t i = d.idx(x, y, z);
          const std::size_t j =
              d.idx(x + step[a][0], y + step[a][1], z + step[a][2]);
          mags.push_back(std::abs(m0.data[j] - m0.data[i]));
        }
    if (mags.empty()) continue;
    if (*std::max_element(mags.begin(), mags.end()) > 0.0) any_content = true;
    const std::size_t n_mask =
        static_cast<std::size_t>(std::floor(keep_fraction * static_cast<double>(mags.size())));
    if (n_mask == 0) continue;
    // Threshold = largest value not in the top keep_fraction block; ties at
    // the threshold stay penalized, so at most n_mask entries are released.
    std::nth_element(mags.begin(), mags.begin() + (mags.size() - n_mask - 1),
                     mags.end());
    const double thr = mags[mags.size() - n_mask - 1];
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const int coord[3] = {x, y, z};
          if (coord[a] + 1 >= extent[a]) continue;
          if (!support.at(x, y, z)) continue;
          const std::size_t i = d.idx(x, y, z);
          const std::size_t j =
              d.idx(x + step[a][0], y + step[a][1], z + step[a][2]);
          if (std::abs(m0.data[j] - m0.data[i]) > thr)
            mask.axis[a][i] = 0;
        }
  }
  mask.degenerate = !any_content;
  return mask;
}

void RegConfig::validate(const Dims& dims) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("RegConfig: lambda must be finite and >= 0");
  if (!(tv_epsilon > 0.0))
    throw std::invalid_argument("RegConfig: tv_epsilon must be > 0");
  mask.validate(dims);
}

std::pair<double, Volume> tv_value_grad(const Volume& chi, const RegConfig& reg) {
  chi.validate("tv_value_grad input");
  reg.validate(chi.dims);
  const Dims& d = chi.dims;

  Volume grad;
  grad.dims = d;
  grad.voxel_size = chi.voxel_size;
  grad.data.assign(d.count(), 0.0);

  const double eps2 = reg.tv_epsilon * reg.tv_epsilon;
  double value = 0.0;
  const int step[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const int extent[3] = {d.nx, d.ny, d.nz};

  for (int a = 0; a < 3; ++a) {
    const auto& m = reg.mask.axis[a];
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const std::size_t i = d.idx(x, y, z);
          if (!m[i]) continue;
          const int coord[3] = {x, y, z};
          if (coord[a] + 1 >= extent[a]) {
            // Neumann boundary: zero difference still pays the smoothing
            // floor so the value matches the sum over all masked entries.
            value += reg.lambda * reg.tv_epsilon;
            continue;
          }
          const std::size_t j =
              d.idx(x + step[a][0], y + step[a][1], z + step[a][2]);
          const double g = chi.data[j] - chi.data[i];
          const double r = std::sqrt(g * g + eps2);
          value += reg.lambda * r;
          const double t = reg.lambda * g / r;
          grad.data[j] += t;
          grad.data[i] -= t;
        }
  }
  return {value, std::move(grad)};
}

void write_objective_trace_csv(const std::vector<ObjectiveTraceRow>& rows,
                               const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "iter,fidelity,tv,total\n";
  for (const auto& r : rows)
    out << r.iter << ',' << format_g17(r.fidelity) << ',' << format_g17(r.tv)
        << ',' << format_g17(r.total) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

MapResult solve_medi(const Volume& b, const NoiseModel& noise,
                     const KSpaceKernel& kernel, const RegConfig& reg,
                     const SolveOptions& opts) {
  b.validate("solve_medi field");
  noise.validate(b.dims);
  reg.validate(b.dims);
  if (opts.max_iters < 0)
    throw std::invalid_argument("solve_medi: max_iters must be >= 0");

  MapResult res;
  Volume& chi = res.chi;
  if (opts.init) {
    chi = *opts.init;
    chi.validate("solve_medi init");
    if (!(chi.dims == b.dims))
      throw std::invalid_argument("solve_medi: init dims mismatch");
  } else {
    chi.dims = b.dims;
    chi.voxel_size = b.voxel_size;
    chi.data.assign(b.dims.count(), 0.0);
  }

  auto eval = [&](const Volume& x) {
    auto [fid, fid_grad] = fidelity_value_grad(x, b, noise, kernel);
    auto [tv, tv_grad] = tv_value_grad(x, reg);
    ObjectiveTraceRow row;
    row.fidelity = 0.5 * fid;
    row.tv = tv;
    row.total = row.fidelity + row.tv;
    Volume grad = std::move(tv_grad);
    for (std::size_t i = 0; i < grad.data.size(); ++i)
      grad.data[i] += 0.5 * fid_grad.data[i];
    return std::make_pair(row, std::move(grad));
  };

  auto [row, grad] = eval(chi);
  row.iter = 0;
  if (!std::isfinite(row.total))
    throw SolveError("solve_medi: non-finite objective at start", {row});
  res.trace.push_back(row);

  double step = 1.0;
  Volume trial = chi;
  for (int it = 1; it <= opts.max_iters; ++it) {
    const double g2 = dot(grad.data, grad.data);
    if (g2 == 0.0) {
      res.converged = true;
      break;
    }
    // Backtracking line search along the negative gradient.
    bool accepted = false;
    ObjectiveTraceRow trial_row;
    Volume trial_grad;
    while (step >= opts.min_step) {
      for (std::size_t i = 0; i < chi.data.size(); ++i)
        trial.data[i] = chi.data[i] - step * grad.data[i];
      auto [r, g] = eval(trial);
      if (std::isfinite(r.total) &&
          r.total <= res.trace.back().total - kArmijoC * step * g2) {
        trial_row = r;
        trial_grad = std::move(g);
        accepted = true;
        break;
      }
      step *= kShrink;
    }
    if (!accepted)
      throw SolveError("solve_medi: line search failed (step underflow)",
                       res.trace);
    const double prev_total = res.trace.back().total;
    std::swap(chi.data, trial.data);
    grad = std::move(trial_grad);
    trial_row.iter = it;
    res.trace.push_back(trial_row);
    res.iterations = it;
    step = std::min(step * kGrow, kMaxStep);

    const double denom = std::max(std::abs(prev_total), 1e-30);
    if ((prev_total - trial_row.total) / denom < opts.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace qsm
