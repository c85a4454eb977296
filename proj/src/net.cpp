#include "qsm/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "qsm/adam.hpp"
#include "qsm/report.hpp"

namespace qsm {
namespace {

constexpr double kNormEps = 1e-5;

int enc_channels(const NetConfig& cfg, int level) {
  return cfg.base_filters << level;
}

// Declared parameter-tensor order; save/load and init all derive from this.
std::vector<TensorDesc> make_tensor_table(const NetConfig& cfg) {
  std::vector<TensorDesc> table;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::vector<int> shape) {
    TensorDesc t;
    t.name = std::move(name);
    t.shape = std::move(shape);
    t.size = 1;
    for (int s : t.shape) t.size *= static_cast<std::size_t>(s);
    t.offset = offset;
    offset += t.size;
    table.push_back(std::move(t));
  };
  auto add_conv = [&](const std::string& prefix, int c_out, int c_in,
                      bool normed) {
    add(prefix + ".w", {c_out, c_in, 3, 3, 3});
    add(prefix + ".b", {c_out});
    if (normed) {
      add(prefix + ".gamma", {c_out});
      add(prefix + ".beta", {c_out});
    }
  };

  for (int l = 0; l < cfg.levels; ++l)
    add_conv("enc" + std::to_string(l), enc_channels(cfg, l),
             l == 0 ? 1 : enc_channels(cfg, l - 1), cfg.normalize);
  for (const char* head : {"mu", "lv"}) {
    for (int l = cfg.levels - 2; l >= 0; --l)
      add_conv(std::string(head) + ".dec" + std::to_string(l),
               enc_channels(cfg, l),
               enc_channels(cfg, l + 1) + enc_channels(cfg, l), cfg.normalize);
    add_conv(std::string(head) + ".head", 1, cfg.base_filters, false);
  }
  return table;
}

FeatureMap from_volume(const Volume& v) {
  FeatureMap f = FeatureMap::zeros(v.dims.nx, v.dims.ny, v.dims.nz, 1);
  f.v = v.data;
  return f;
}

Volume to_volume(const FeatureMap& f, const Vec3& voxel_size) {
  Volume v;
  v.dims = {f.nx, f.ny, f.nz};
  v.voxel_size = voxel_size;
  v.data = f.v;
  return v;
}

// --- convolution (3x3x3, zero padding 1) -----------------------------------

// out[co] = bias[co] + sum_ci w[co][ci] * in[ci], shift-and-accumulate form
// so the inner x loop stays contiguous.
void conv3_forward(const FeatureMap& in, const double* w, const double* bias,
                   int c_out, FeatureMap& out) {
  const int nx = in.nx, ny = in.ny, nz = in.nz, c_in = in.channels;
  out = FeatureMap::zeros(nx, ny, nz, c_out);
  const std::size_t sp = in.spatial_count();
  for (int co = 0; co < c_out; ++co) {
    double* op0 = out.v.data() + sp * static_cast<std::size_t>(co);
    std::fill(op0, op0 + sp, bias[co]);
    for (int ci = 0; ci < c_in; ++ci) {
      const double* ip0 = in.v.data() + sp * static_cast<std::size_t>(ci);
      const double* ww =
          w + 27 * (static_cast<std::size_t>(co) * c_in + ci);
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const double wv = ww[((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1)];
            if (wv == 0.0) continue;
            const int z0 = std::max(0, -dz), z1 = nz - 1 - std::max(0, dz);
            const int y0 = std::max(0, -dy), y1 = ny - 1 - std::max(0, dy);
            const int x0 = std::max(0, -dx), x1 = nx - 1 - std::max(0, dx);
            for (int z = z0; z <= z1; ++z)
              for (int y = y0; y <= y1; ++y) {
                double* op = op0 + static_cast<std::size_t>(z) * ny * nx +
                             static_cast<std::size_t>(y) * nx;
                const double* ip = ip0 +
                                   static_cast<std::size_t>(z + dz) * ny * nx +
                                   static_cast<std::size_t>(y + dy) * nx + dx;
                for (int x = x0; x <= x1; ++x) op[x] += wv * ip[x];
              }
          }
    }
  }
}

// Accumulates dW/dB into g_w/g_b and writes d_in (zero-initialized here).
void conv3_backward(const FeatureMap& in, const double* w, int c_out,
                    const FeatureMap& d_out, double* g_w, double* g_b,
                    FeatureMap* d_in) {
  const int nx = in.nx, ny = in.ny, nz = in.nz, c_in = in.channels;
  const std::size_t sp = in.spatial_count();
  if (d_in) *d_in = FeatureMap::zeros(nx, ny, nz, c_in);
  for (int co = 0; co < c_out; ++co) {
    const double* gp0 = d_out.v.data() + sp * static_cast<std::size_t>(co);
    double acc_b = 0.0;
    for (std::size_t i = 0; i < sp; ++i) acc_b += gp0[i];
    g_b[co] += acc_b;
    for (int ci = 0; ci < c_in; ++ci) {
      const double* ip0 = in.v.data() + sp * static_cast<std::size_t>(ci);
      double* dip0 =
          d_in ? d_in->v.data() + sp * static_cast<std::size_t>(ci) : nullptr;
      const double* ww =
          w + 27 * (static_cast<std::size_t>(co) * c_in + ci);
      double* gw = g_w + 27 * (static_cast<std::size_t>(co) * c_in + ci);
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int k = ((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1);
            const double wv = ww[k];
            const int z0 = std::max(0, -dz), z1 = nz - 1 - std::max(0, dz);
            const int y0 = std::max(0, -dy), y1 = ny - 1 - std::max(0, dy);
            const int x0 = std::max(0, -dx), x1 = nx - 1 - std::max(0, dx);
            double acc_w = 0.0;
            for (int z = z0; z <= z1; ++z)
              for (int y = y0; y <= y1; ++y) {
                const double* gp = gp0 + static_cast<std::size_t>(z) * ny * nx +
                                   static_cast<std::size_t>(y) * nx;
                const std::size_t in_off =
                    static_cast<std::size_t>(z + dz) * ny * nx +
                    static_cast<std::size_t>(y + dy) * nx + dx;
                const double* ip = ip0 + in_off;
                for (int x = x0; x <= x1; ++x) acc_w += gp[x] * ip[x];
                if (dip0) {
                  double* dip = dip0 + in_off;
                  for (int x = x0; x <= x1; ++x) dip[x] += wv * gp[x];
                }
              }
            gw[k] += acc_w;
          }
    }
  }
}

// --- per-channel spatial standardization ------------------------------------

void norm_forward(FeatureMap& x, const double* gamma, const double* beta,
                  FeatureMap* xhat_out, std::vector<double>* inv_sd_out) {
  const std::size_t sp = x.spatial_count();
  if (xhat_out) *xhat_out = FeatureMap::zeros(x.nx, x.ny, x.nz, x.channels);
  if (inv_sd_out) inv_sd_out->assign(x.channels, 0.0);
  for (int c = 0; c < x.channels; ++c) {
    double* p = x.v.data() + sp * static_cast<std::size_t>(c);
    double mean = 0.0;
    for (std::size_t i = 0; i < sp; ++i) mean += p[i];
    mean /= static_cast<double>(sp);
    double var = 0.0;
    for (std::size_t i = 0; i < sp; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(sp);
    const double inv_sd = 1.0 / std::sqrt(var + kNormEps);
    double* xh =
        xhat_out ? xhat_out->v.data() + sp * static_cast<std::size_t>(c)
                 : nullptr;
    for (std::size_t i = 0; i < sp; ++i) {
      const double h = (p[i] - mean) * inv_sd;
      if (xh) xh[i] = h;
      p[i] = gamma[c] * h + beta[c];
    }
    if (inv_sd_out) (*inv_sd_out)[c] = inv_sd;
  }
}

void norm_backward(FeatureMap& d, const FeatureMap& xhat,
                   const std::vector<double>& inv_sd, const double* gamma,
                   double* g_gamma, double* g_beta) {
  const std::size_t sp = d.spatial_count();
  for (int c = 0; c < d.channels; ++c) {
    double* dp = d.v.data() + sp * static_cast<std::size_t>(c);
    const double* xh = xhat.v.data() + sp * static_cast<std::size_t>(c);
    double sum_d = 0.0, sum_dx = 0.0;
    for (std::size_t i = 0; i < sp; ++i) {
      sum_d += dp[i];
      sum_dx += dp[i] * xh[i];
    }
    g_gamma[c] += sum_dx;
    g_beta[c] += sum_d;
    const double n = static_cast<double>(sp);
    const double m_d = sum_d / n, m_dx = sum_dx / n;
    const double g = gamma[c], s = inv_sd[c];
    for (std::size_t i = 0; i < sp; ++i)
      dp[i] = s * g * (dp[i] - m_d - xh[i] * m_dx);
  }
}

// --- relu / pool / upsample / concat ----------------------------------------

void relu_inplace(FeatureMap& x) {
  for (double& v : x.v)
    if (v < 0.0) v = 0.0;
}

// Backward through ReLU using the stored activation: output == 0 iff the
// pre-activation was <= 0 (subgradient 0 chosen at exactly 0).
void relu_backward_inplace(FeatureMap& d, const FeatureMap& act) {
  for (std::size_t i = 0; i < d.v.size(); ++i)
    if (act.v[i] <= 0.0) d.v[i] = 0.0;
}

FeatureMap maxpool2(const FeatureMap& in, std::vector<std::uint32_t>& argmax) {
  const int onx = in.nx / 2, ony = in.ny / 2, onz = in.nz / 2;
  FeatureMap out = FeatureMap::zeros(onx, ony, onz, in.channels);
  argmax.assign(out.v.size(), 0);
  const std::size_t isp = in.spatial_count();
  std::size_t oi = 0;
  for (int c = 0; c < in.channels; ++c) {
    const double* ip = in.v.data() + isp * static_cast<std::size_t>(c);
    for (int z = 0; z < onz; ++z)
      for (int y = 0; y < ony; ++y)
        for (int x = 0; x < onx; ++x, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          std::uint32_t best_i = 0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t ii =
                    static_cast<std::size_t>(2 * z + dz) * in.ny * in.nx +
                    static_cast<std::size_t>(2 * y + dy) * in.nx +
                    static_cast<std::size_t>(2 * x + dx);
                if (ip[ii] > best) {
                  best = ip[ii];
                  best_i = static_cast<std::uint32_t>(ii);
                }
              }
          out.v[oi] = best;
          argmax[oi] = best_i;
        }
  }
  return out;
}

void maxpool2_backward(const FeatureMap& d_out,
                       const std::vector<std::uint32_t>& argmax,
                       FeatureMap& d_in) {
  const std::size_t osp = d_out.spatial_count();
  const std::size_t isp = d_in.spatial_count();
  for (int c = 0; c < d_out.channels; ++c) {
    double* dip = d_in.v.data() + isp * static_cast<std::size_t>(c);
    const double* dop = d_out.v.data() + osp * static_cast<std::size_t>(c);
    const std::uint32_t* am = argmax.data() + osp * static_cast<std::size_t>(c);
    for (std::size_t i = 0; i < osp; ++i) dip[am[i]] += dop[i];
  }
}

FeatureMap upsample2(const FeatureMap& in) {
  FeatureMap out = FeatureMap::zeros(in.nx * 2, in.ny * 2, in.nz * 2,
                                     in.channels);
  const std::size_t isp = in.spatial_count();
  const std::size_t osp = out.spatial_count();
  for (int c = 0; c < in.channels; ++c) {
    const double* ip = in.v.data() + isp * static_cast<std::size_t>(c);
    double* op = out.v.data() + osp * static_cast<std::size_t>(c);
    std::size_t oi = 0;
    for (int z = 0; z < out.nz; ++z)
      for (int y = 0; y < out.ny; ++y)
        for (int x = 0; x < out.nx; ++x, ++oi)
          op[oi] = ip[static_cast<std::size_t>(z / 2) * in.ny * in.nx +
                      static_cast<std::size_t>(y / 2) * in.nx + (x / 2)];
  }
  return out;
}

FeatureMap upsample2_backward(const FeatureMap& d_out, int in_nx, int in_ny,
                              int in_nz) {
  FeatureMap d_in = FeatureMap::zeros(in_nx, in_ny, in_nz, d_out.channels);
  const std::size_t isp = d_in.spatial_count();
  const std::size_t osp = d_out.spatial_count();
  for (int c = 0; c < d_out.channels; ++c) {
    double* dip = d_in.v.data() + isp * static_cast<std::size_t>(c);
    const double* dop = d_out.v.data() + osp * static_cast<std::size_t>(c);
    std::size_t oi = 0;
    for (int z = 0; z < d_out.nz; ++z)
      for (int y = 0; y < d_out.ny; ++y)
        for (int x = 0; x < d_out.nx; ++x, ++oi)
          dip[static_cast<std::size_t>(z / 2) * in_ny * in_nx +
              static_cast<std::size_t>(y / 2) * in_nx + (x / 2)] += dop[oi];
  }
  return d_in;
}

// Channel-major layout makes concatenation a contiguous append.
FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b) {
  FeatureMap out = FeatureMap::zeros(a.nx, a.ny, a.nz, a.channels + b.channels);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

void NetConfig::validate() const {
  if (levels < 1) throw std::invalid_argument("NetConfig: levels must be >= 1");
  if (base_filters < 1)
    throw std::invalid_argument("NetConfig: base_filters must be >= 1");
}

void NetConfig::check_input_dims(const Dims& dims) const {
  const int div = 1 << (levels - 1);
  if (dims.nx % div || dims.ny % div || dims.nz % div)
    throw std::invalid_argument(
        "net input dims (" + std::to_string(dims.nx) + "," +
        std::to_string(dims.ny) + "," + std::to_string(dims.nz) +
        ") must be divisible by " + std::to_string(div));
}

NetConfig net_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::runtime_error(": expected object");
  NetConfig cfg;
  auto int_or = [&](const char* key, int dflt) {
    if (!j.contains(key)) return dflt;
    if (!j[key].is_number_integer())
      throw std::runtime_error(std::string("/") + key + ": expected integer");
    return j[key].get<int>();
  };
  cfg.levels = int_or("levels", cfg.levels);
  cfg.base_filters = int_or("base_filters", cfg.base_filters);
  if (j.contains("normalize")) {
    if (!j["normalize"].is_boolean())
      throw std::runtime_error("/normalize: expected boolean");
    cfg.normalize = j["normalize"].get<bool>();
  }
  cfg.validate();
  return cfg;
}

nlohmann::json net_config_to_json(const NetConfig& cfg) {
  return {{"levels", cfg.levels},
          {"base_filters", cfg.base_filters},
          {"normalize", cfg.normalize}};
}

const TensorDesc& NetWeights::tensor(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw std::invalid_argument("NetWeights: no tensor named " +
                              std::string(name));
}

void NetWeights::validate() const {
  config.validate();
  const auto expect = make_tensor_table(config);
  if (tensors.size() != expect.size())
    throw std::invalid_argument("NetWeights: tensor table size mismatch");
  std::size_t total = 0;
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (tensors[i].name != expect[i].name ||
        tensors[i].shape != expect[i].shape ||
        tensors[i].offset != expect[i].offset)
      throw std::invalid_argument("NetWeights: tensor table mismatch at " +
                                  expect[i].name);
    total += expect[i].size;
  }
  if (data.size() != total)
    throw std::invalid_argument("NetWeights: parameter count mismatch");
  for (double v : data)
    if (!std::isfinite(v))
      throw std::invalid_argument("NetWeights: non-finite parameter");
}

NetWeights NetWeights::init(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  NetWeights w;
  w.config = cfg;
  w.tensors = make_tensor_table(cfg);
  std::size_t total = 0;
  for (const auto& t : w.tensors) total += t.size;
  w.data.assign(total, 0.0);

  SeededRng rng(seed);
  for (const auto& t : w.tensors) {
    double* p = w.data.data() + t.offset;
    if (t.name.ends_with(".w")) {
      const std::size_t fan_in =
          static_cast<std::size_t>(t.shape[1]) * 27;  // c_in * kernel volume
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < t.size; ++i)
        p[i] = bound * (2.0 * rng.uniform() - 1.0);
    } else if (t.name.ends_with(".gamma")) {
      std::fill(p, p + t.size, 1.0);
    }  // biases and beta stay zero
  }
  return w;
}

FeatureMap FeatureMap::zeros(int nx, int ny, int nz, int channels) {
  FeatureMap f;
  f.nx = nx;
  f.ny = ny;
  f.nz = nz;
  f.channels = channels;
  f.v.assign(static_cast<std::size_t>(nx) * ny * nz * channels, 0.0);
  return f;
}

// ---------------------------------------------------------------------------

std::pair<Volume, Volume> net_forward(const NetWeights& w, const Volume& b,
                                      NetTape* tape) {
  w.validate();
  b.validate("net_forward input");
  const NetConfig& cfg = w.config;
  cfg.check_input_dims(b.dims);
  const int L = cfg.levels;

  NetTape local;
  NetTape& tp = tape ? *tape : local;
  tp = NetTape{};
  tp.input_dims = b.dims;
  tp.input = from_volume(b);
  tp.enc_in.resize(L);
  tp.enc_act.resize(L);
  tp.pool_argmax.resize(L - 1);
  const int n_norm = cfg.normalize ? L + 2 * (L - 1) : 0;
  tp.norm_xhat.resize(n_norm);
  tp.norm_inv_sd.resize(n_norm);

  auto conv_block = [&](const std::string& prefix, const FeatureMap& in,
                        int norm_idx) {
    const TensorDesc& tw = w.tensor(prefix + ".w");
    const TensorDesc& tb = w.tensor(prefix + ".b");
    FeatureMap out;
    conv3_forward(in, w.tensor_data(tw), w.tensor_data(tb), tw.shape[0], out);
    if (cfg.normalize) {
      norm_forward(out, w.tensor_data(w.tensor(prefix + ".gamma")),
                   w.tensor_data(w.tensor(prefix + ".beta")),
                   &tp.norm_xhat[norm_idx], &tp.norm_inv_sd[norm_idx]);
    }
    relu_inplace(out);
    return out;
  };

  // Encoder.
  for (int l = 0; l < L; ++l) {
    tp.enc_in[l] = l == 0 ? tp.input
                          : maxpool2(tp.enc_act[l - 1], tp.pool_argmax[l - 1]);
    tp.enc_act[l] =
        conv_block("enc" + std::to_string(l), tp.enc_in[l], l);
  }

  // Decoders.
  Volume out_mu, out_lv;
  const char* head_name[2] = {"mu", "lv"};
  for (int h = 0; h < 2; ++h) {
    tp.dec_in[h].resize(L - 1);
    tp.dec_act[h].resize(L - 1);
    const FeatureMap* x = &tp.enc_act[L - 1];
    for (int s = 0; s < L - 1; ++s) {
      const int l = L - 2 - s;
      const FeatureMap up = upsample2(*x);
      tp.dec_in[h][s] = concat_channels(up, tp.enc_act[l]);
      tp.dec_act[h][s] = conv_block(
          std::string(head_name[h]) + ".dec" + std::to_string(l),
          tp.dec_in[h][s], L + h * (L - 1) + s);
      x = &tp.dec_act[h][s];
    }
    const std::string hp = std::string(head_name[h]) + ".head";
    const TensorDesc& tw = w.tensor(hp + ".w");
    FeatureMap head_out;
    conv3_forward(*x, w.tensor_data(tw), w.tensor_data(w.tensor(hp + ".b")), 1,
                  head_out);
    if (h == 0) {
      out_mu = to_volume(head_out, b.voxel_size);
    } else {
      tp.clamp_pass.assign(head_out.v.size(), 1);
      for (std::size_t i = 0; i < head_out.v.size(); ++i) {
        if (head_out.v[i] < kLogVarMin) {
          head_out.v[i] = kLogVarMin;
          tp.clamp_pass[i] = 0;
        } else if (head_out.v[i] > kLogVarMax) {
          head_out.v[i] = kLogVarMax;
          tp.clamp_pass[i] = 0;
        }
      }
      out_lv = to_volume(head_out, b.voxel_size);
    }
  }
  tp.recorded = true;
  return {std::move(out_mu), std::move(out_lv)};
}

std::vector<double> net_backward(const NetWeights& w, const NetTape& tape,
                                 const Volume& d_mu, const Volume& d_log_var) {
  if (!tape.recorded)
    throw std::logic_error("net_backward: no recorded forward pass");
  if (!(d_mu.dims == tape.input_dims) || !(d_log_var.dims == tape.input_dims))
    throw std::invalid_argument("net_backward: upstream gradient dims mismatch");
  const NetConfig& cfg = w.config;
  const int L = cfg.levels;
  std::vector<double> grad(w.data.size(), 0.0);

  auto conv_block_backward = [&](const std::string& prefix, FeatureMap& d_act,
                                 const FeatureMap& act, const FeatureMap& in,
                                 int norm_idx, FeatureMap* d_in) {
    relu_backward_inplace(d_act, act);
    if (cfg.normalize)
      norm_backward(d_act, tape.norm_xhat[norm_idx],
                    tape.norm_inv_sd[norm_idx],
                    w.tensor_data(w.tensor(prefix + ".gamma")),
                    grad.data() + w.tensor(prefix + ".gamma").offset,
                    grad.data() + w.tensor(prefix + ".beta").offset);
    const TensorDesc& tw = w.tensor(prefix + ".w");
    conv3_backward(in, w.tensor_data(tw), tw.shape[0], d_act,
                   grad.data() + tw.offset,
                   grad.data() + w.tensor(prefix + ".b").offset, d_in);
  };

  // Accumulated gradient on each encoder activation (skips + downstream).
  std::vector<FeatureMap> d_enc_act(L);
  for (int l = 0; l < L; ++l)
    d_enc_act[l] = FeatureMap::zeros(tape.enc_act[l].nx, tape.enc_act[l].ny,
                                     tape.enc_act[l].nz,
                                     tape.enc_act[l].channels);

  const char* head_name[2] = {"mu", "lv"};
  for (int h = 0; h < 2; ++h) {
    FeatureMap d_x = from_volume(h == 0 ? d_mu : d_log_var);
    if (h == 1)
      for (std::size_t i = 0; i < d_x.v.size(); ++i)
        if (!tape.clamp_pass[i]) d_x.v[i] = 0.0;

    const FeatureMap& head_in =
        L > 1 ? tape.dec_act[h][L - 2] : tape.enc_act[0];
    const std::string hp = std::string(head_name[h]) + ".head";
    const TensorDesc& tw = w.tensor(hp + ".w");
    FeatureMap d_head_in;
    conv3_backward(head_in, w.tensor_data(tw), 1, d_x,
                   grad.data() + tw.offset,
                   grad.data() + w.tensor(hp + ".b").offset, &d_head_in);

    FeatureMap d_cur = std::move(d_head_in);
    for (int s = L - 2; s >= 0; --s) {
      const int l = L - 2 - s;
      FeatureMap d_cat;
      conv_block_backward(
          std::string(head_name[h]) + ".dec" + std::to_string(l), d_cur,
          tape.dec_act[h][s], tape.dec_in[h][s], L + h * (L - 1) + s, &d_cat);
      // Split the concat gradient: first block feeds the upsample path,
      // second block is the skip from encoder level l.
      const int up_ch = enc_channels(cfg, l + 1);
      const std::size_t sp = d_cat.spatial_count();
      FeatureMap d_up = FeatureMap::zeros(d_cat.nx, d_cat.ny, d_cat.nz, up_ch);
      std::copy(d_cat.v.begin(), d_cat.v.begin() + d_up.v.size(),
                d_up.v.begin());
      for (std::size_t i = 0; i < sp * (d_cat.channels - up_ch); ++i)
        d_enc_act[l].v[i] += d_cat.v[d_up.v.size() + i];
      const FeatureMap& below =
          s == 0 ? tape.enc_act[L - 1] : tape.dec_act[h][s - 1];
      d_cur = upsample2_backward(d_up, below.nx, below.ny, below.nz);
    }
    // d_cur now sits at the bottleneck resolution.
    for (std::size_t i = 0; i < d_cur.v.size(); ++i)
      d_enc_act[L - 1].v[i] += d_cur.v[i];
  }

  // Encoder, deepest level first; pool routes gradients one level up.
  for (int l = L - 1; l >= 0; --l) {
    FeatureMap d_in;
    conv_block_backward("enc" + std::to_string(l), d_enc_act[l],
                        tape.enc_act[l], tape.enc_in[l], l, &d_in);
    if (l > 0)
      maxpool2_backward(d_in, tape.pool_argmax[l - 1], d_enc_act[l - 1]);
  }
  return grad;
}

NllResult nll_loss(const Volume& mu, const Volume& log_var, const Volume& chi) {
  mu.validate("nll_loss mu");
  log_var.validate("nll_loss log_var");
  chi.validate("nll_loss chi");
  if (!(mu.dims == log_var.dims) || !(mu.dims == chi.dims))
    throw std::invalid_argument("nll_loss: dims mismatch");
  NllResult r;
  r.d_mu = mu;
  r.d_log_var = mu;
  for (std::size_t i = 0; i < mu.data.size(); ++i) {
    const double diff = chi.data[i] - mu.data[i];
    const double inv_var = std::exp(-log_var.data[i]);
    r.loss += 0.5 * (diff * diff * inv_var + log_var.data[i]);
    r.d_mu.data[i] = -diff * inv_var;
    r.d_log_var.data[i] = 0.5 * (1.0 - diff * diff * inv_var);
  }
  return r;
}

// ---------------------------------------------------------------------------

void PatchDataset::validate(const NetConfig& cfg) const {
  auto check = [&](const std::vector<PatchPair>& set, const char* which) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      const std::string ctx =
          std::string("PatchDataset ") + which + "[" + std::to_string(i) + "]";
      set[i].b.validate(ctx.c_str());
      cfg.check_input_dims(set[i].b.dims);
      if (!set[i].chi.data.empty()) {
        set[i].chi.validate(ctx.c_str());
        if (!(set[i].chi.dims == set[i].b.dims))
          throw std::invalid_argument(ctx + ": b/chi dims mismatch");
      }
      if (!(set[i].b.dims == set[0].b.dims))
        throw std::invalid_argument(ctx + ": inconsistent patch dims");
    }
  };
  check(train, "train");
  check(val, "val");
}

std::vector<PatchPair> extract_patches(const Volume& b, const Volume& chi,
                                       const Dims& patch, const Dims& step) {
  b.validate("extract_patches b");
  chi.validate("extract_patches chi");
  if (!(b.dims == chi.dims))
    throw std::invalid_argument("extract_patches: dims mismatch");
  if (patch.nx < 1 || patch.ny < 1 || patch.nz < 1 || step.nx < 1 ||
      step.ny < 1 || step.nz < 1)
    throw std::invalid_argument("extract_patches: bad patch/step");
  std::vector<PatchPair> out;
  for (int z0 = 0; z0 + patch.nz <= b.dims.nz; z0 += step.nz)
    for (int y0 = 0; y0 + patch.ny <= b.dims.ny; y0 += step.ny)
      for (int x0 = 0; x0 + patch.nx <= b.dims.nx; x0 += step.nx) {
        PatchPair p;
        p.b.dims = patch;
        p.b.voxel_size = b.voxel_size;
        p.b.data.resize(patch.count());
        p.chi = p.b;
        for (int z = 0; z < patch.nz; ++z)
          for (int y = 0; y < patch.ny; ++y)
            for (int x = 0; x < patch.nx; ++x) {
              const std::size_t src = b.dims.idx(x0 + x, y0 + y, z0 + z);
              const std::size_t dst = patch.idx(x, y, z);
              p.b.data[dst] = b.data[src];
              p.chi.data[dst] = chi.data[src];
            }
        out.push_back(std::move(p));
      }
  return out;
}

void TrainCurves::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "epoch,train_nll,val_nll,val_rmse_pct\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << format_g17(r.train_nll) << ','
        << format_g17(r.val_nll) << ',' << format_g17(r.val_rmse_pct) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace {

// Aggregate per-voxel NLL and RMSE-vs-zero statistics over a patch set.
void eval_patch_set(const NetWeights& w, const std::vector<PatchPair>& set,
                    double* mean_nll, double* rmse_pct) {
  double nll_sum = 0.0, err2 = 0.0, ref2 = 0.0;
  std::size_t voxels = 0;
  for (const auto& p : set) {
    auto [mu, lv] = net_forward(w, p.b);
    nll_sum += nll_loss(mu, lv, p.chi).loss;
    for (std::size_t i = 0; i < mu.data.size(); ++i) {
      const double d = mu.data[i] - p.chi.data[i];
      err2 += d * d;
      ref2 += p.chi.data[i] * p.chi.data[i];
    }
    voxels += mu.data.size();
  }
  *mean_nll = voxels ? nll_sum / static_cast<double>(voxels) : 0.0;
  if (ref2 > 0.0)
    *rmse_pct = 100.0 * std::sqrt(err2 / ref2);
  else
    *rmse_pct = err2 > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
}

void shuffle_indices(std::vector<std::size_t>& idx, SeededRng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j =
        static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
}

}  // namespace

TrainResult train_pdi(const NetWeights& w, const PatchDataset& dataset,
                      const TrainOptions& opts) {
  w.validate();
  dataset.validate(w.config);
  if (dataset.train.empty())
    throw std::invalid_argument("train_pdi: empty training set");
  for (const auto& p : dataset.train)
    if (p.chi.data.empty())
      throw std::invalid_argument("train_pdi: training patch without target");
  for (const auto& p : dataset.val)
    if (p.chi.data.empty())
      throw std::invalid_argument("train_pdi: validation patch without target");
  if (opts.epochs < 1)
    throw std::invalid_argument("train_pdi: epochs must be >= 1");
  if (!(opts.lr > 0.0)) throw std::invalid_argument("train_pdi: lr must be > 0");
  if (opts.lv_freeze_epochs < 0)
    throw std::invalid_argument("train_pdi: lv_freeze_epochs must be >= 0");

  TrainResult res;
  res.weights = w;
  AdamState adam(w.param_count());
  SeededRng rng(opts.seed);
  std::vector<std::size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::vector<PatchPair>& val_set =
      dataset.val.empty() ? dataset.train : dataset.val;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    double lr = opts.lr;
    if (opts.decay == LrDecay::Linear)
      lr = opts.lr * static_cast<double>(opts.epochs - epoch) /
           static_cast<double>(opts.epochs);
    shuffle_indices(order, rng);

    double nll_sum = 0.0;
    std::size_t voxels = 0;
    NetTape tape;
    for (std::size_t i : order) {
      const PatchPair& p = dataset.train[i];
      auto [mu, lv] = net_forward(res.weights, p.b, &tape);
      NllResult nll = nll_loss(mu, lv, p.chi);
      if (!std::isfinite(nll.loss))
        throw TrainError("train_pdi: non-finite loss at epoch " +
                             std::to_string(epoch),
                         res.curves);
      nll_sum += nll.loss;
      voxels += mu.data.size();
      if (epoch < opts.lv_freeze_epochs)
        std::fill(nll.d_log_var.data.begin(), nll.d_log_var.data.end(), 0.0);
      const std::vector<double> grads =
          net_backward(res.weights, tape, nll.d_mu, nll.d_log_var);
      adam.update(res.weights.data, grads, lr);
    }

    TrainEpochRow row;
    row.epoch = epoch;
    row.train_nll = nll_sum / static_cast<double>(voxels);
    eval_patch_set(res.weights, val_set, &row.val_nll, &row.val_rmse_pct);
    res.curves.rows.push_back(row);
    if (opts.stop_val_rmse_pct >= 0.0 &&
        row.val_rmse_pct <= opts.stop_val_rmse_pct) {
      res.early_stopped = true;
      break;
    }
  }
  return res;
}

AdaptResult adapt_vi(const NetWeights& w, const std::vector<AdaptCase>& cases,
                     const KSpaceKernel& kernel, const RegConfig& reg,
                     int mc_samples, int epochs, double lr,
                     std::uint64_t seed) {
  w.validate();
  if (cases.empty()) throw std::invalid_argument("adapt_vi: no cases");
  for (std::size_t i = 0; i < cases.size(); ++i) {
    cases[i].b.validate("adapt_vi case field");
    if (!(cases[i].b.dims == kernel.dims))
      throw std::invalid_argument("adapt_vi: case/kernel dims mismatch");
    w.config.check_input_dims(cases[i].b.dims);
    cases[i].noise.validate(cases[i].b.dims);
  }
  reg.validate(kernel.dims);
  if (epochs < 1) throw std::invalid_argument("adapt_vi: epochs must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("adapt_vi: lr must be > 0");

  AdaptResult res;
  res.weights = w;
  AdamState adam(w.param_count());
  const SeededRng base(seed);
  SeededRng shuffle_rng = base.child(0);
  std::vector<std::size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);

  int step = 0;
  NetTape tape;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle_indices(order, shuffle_rng);
    for (std::size_t i : order) {
      const AdaptCase& c = cases[i];
      auto [mu, lv] = net_forward(res.weights, c.b, &tape);
      VariationalParams vp;
      vp.mu = std::move(mu);
      vp.log_var = std::move(lv);
      const KlEval ev =
          kl_objective(vp, c.b, c.noise, kernel, reg, mc_samples,
                       base.child(1 + static_cast<std::uint64_t>(step)));
      KlTraceRow row = ev.terms;
      row.iter = step;
      res.trace.rows.push_back(row);
      if (!std::isfinite(row.total))
        throw ViError("adapt_vi: non-finite objective at step " +
                          std::to_string(step),
                      res.trace);
      const std::vector<double> grads =
          net_backward(res.weights, tape, ev.grads.d_mu, ev.grads.d_log_var);
      adam.update(res.weights.data, grads, lr);
      ++step;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------

void save_weights(const NetWeights& w, const std::string& path) {
  w.validate();
  nlohmann::json header = {{"format", "qsm-net-weights"},
                           {"version", 1},
                           {"config", net_config_to_json(w.config)}};
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : w.tensors)
    tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  header["tensors"] = tensors;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << header.dump() << '\n';
  std::vector<float> payload(w.data.size());
  for (std::size_t i = 0; i < w.data.size(); ++i)
    payload[i] = static_cast<float>(w.data[i]);
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

NetWeights load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw ConfigMismatchError("weight file " + path + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigMismatchError("weight file " + path +
                              ": malformed header: " + e.what());
  }
  if (!header.is_object() || header.value("format", "") != "qsm-net-weights" ||
      header.value("version", -1) != 1)
    throw ConfigMismatchError("weight file " + path +
                              ": unsupported format or version");

  NetWeights w;
  try {
    w.config = net_config_from_json(header.at("config"));
  } catch (const std::exception& e) {
    throw ConfigMismatchError("weight file " + path + ": bad config: " +
                              e.what());
  }
  w.tensors = make_tensor_table(w.config);
  const auto& declared = header.at("tensors");
  if (!declared.is_array() || declared.size() != w.tensors.size())
    throw ConfigMismatchError("weight file " + path +
                              ": tensor table does not match config");
  std::size_t total = 0;
  for (std::size_t i = 0; i < w.tensors.size(); ++i) {
    const auto& d = declared[i];
    if (d.value("name", "") != w.tensors[i].name ||
        !(d.contains("shape") &&
          d["shape"].get<std::vector<int>>() == w.tensors[i].shape))
      throw ConfigMismatchError("weight file " + path + ": tensor " +
                                w.tensors[i].name +
                                " does not match the config-derived shape");
    total += w.tensors[i].size;
  }

  std::vector<float> payload(total);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(total * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != total * sizeof(float))
    throw std::runtime_error("weight file " + path + ": payload too short");
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error("weight file " + path + ": trailing bytes");
  w.data.resize(total);
  for (std::size_t i = 0; i < total; ++i)
    w.data[i] = static_cast<double>(payload[i]);
  w.validate();
  return w;
}

}  // namespace qsm
