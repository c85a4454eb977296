#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qsm/dipole.hpp"
#include "qsm/map_solver.hpp"
#include "qsm/vi.hpp"
#include "qsm/volume.hpp"

// A small dual-decoder 3D convolutional network with hand-rolled
// reverse-mode differentiation.  One encoder path compresses the input
// field; two decoder paths (sharing the encoder features via skip
// concatenation) emit the posterior mean map and the log-variance map.
//
// Architecture for `levels` L and `base_filters` F (all kernels 3x3x3,
// zero padding 1):
//   encoder   level 0:    conv(1 -> F) [norm] ReLU            at full res
//             level l>0:  maxpool 2^3, conv(F*2^(l-1) -> F*2^l) [norm] ReLU
//   decoder   (per head)  for l = L-2 .. 0:
//                         nearest-upsample 2x, concat encoder level l,
//                         conv(F*2^(l+1) + F*2^l -> F*2^l) [norm] ReLU
//   heads                 conv(F -> 1), linear; the log-variance head is
//                         clamped to [-30, 5] with zero gradient outside.
//
// The optional normalization is a per-channel standardization over the
// spatial voxels of the patch with learned scale/shift — the batch-size-1
// analogue of batch normalization at this scale.  Off by default.

namespace qsm {

struct NetConfig {
  int levels = 2;
  int base_filters = 8;
  bool normalize = false;

  void validate() const;
  bool operator==(const NetConfig&) const = default;
  // Input dims must be divisible by 2^(levels-1).
  void check_input_dims(const Dims& dims) const;
};

NetConfig net_config_from_json(const nlohmann::json& j);
nlohmann::json net_config_to_json(const NetConfig& cfg);

struct TensorDesc {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct NetWeights {
  NetConfig config;
  std::vector<TensorDesc> tensors;
  std::vector<double> data;  // all parameters, concatenated in tensor order

  std::size_t param_count() const { return data.size(); }
  const TensorDesc& tensor(std::string_view name) const;
  double* tensor_data(const TensorDesc& t) { return data.data() + t.offset; }
  const double* tensor_data(const TensorDesc& t) const {
    return data.data() + t.offset;
  }
  void validate() const;

  // Kaiming-uniform fan-in init for conv weights (bound sqrt(6/fan_in)),
  // zero biases, unit scale / zero shift for normalization layers.
  static NetWeights init(const NetConfig& cfg, std::uint64_t seed);
};

// Channel-major feature map: index = x + nx*(y + ny*(z + nz*c)).
struct FeatureMap {
  int nx = 0, ny = 0, nz = 0, channels = 0;
  std::vector<double> v;

  static FeatureMap zeros(int nx, int ny, int nz, int channels);
  std::size_t idx(int x, int y, int z, int c) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(ny) *
                    (static_cast<std::size_t>(z) +
                     static_cast<std::size_t>(nz) * static_cast<std::size_t>(c)));
  }
  std::size_t spatial_count() const {
    return static_cast<std::size_t>(nx) * ny * nz;
  }
};

// Cached intermediates from one forward pass, consumed by net_backward.
struct NetTape {
  bool recorded = false;
  Dims input_dims;
  FeatureMap input;                   // the 1-channel input map
  std::vector<FeatureMap> enc_in;     // conv input per encoder level
  std::vector<FeatureMap> enc_act;    // post-ReLU activation per level
  std::vector<std::vector<std::uint32_t>> pool_argmax;  // per pool stage
  // Per head (0 = mean, 1 = log-variance):
  std::vector<FeatureMap> dec_in[2];   // concat output per decoder stage
  std::vector<FeatureMap> dec_act[2];  // post-ReLU activation per stage
  std::vector<std::uint8_t> clamp_pass;  // 1 where the clamp was inactive
  // Normalization caches (empty when normalization is off), in layer order:
  // encoder levels, then head-0 decoder stages, then head-1 decoder stages.
  std::vector<FeatureMap> norm_xhat;
  std::vector<std::vector<double>> norm_inv_sd;
};

// Forward inference; pass a tape to record intermediates for backward.
std::pair<Volume, Volume> net_forward(const NetWeights& w, const Volume& b,
                                      NetTape* tape = nullptr);

// Reverse-mode gradients of sum(d_mu .* mu + d_log_var .* log_var) with
// respect to every weight, as a flat vector matching NetWeights::data.
std::vector<double> net_backward(const NetWeights& w, const NetTape& tape,
                                 const Volume& d_mu, const Volume& d_log_var);

struct NllResult {
  double loss = 0.0;  // sum over voxels of 0.5*((chi-mu)^2*exp(-lv) + lv)
  Volume d_mu;
  Volume d_log_var;
};

NllResult nll_loss(const Volume& mu, const Volume& log_var, const Volume& chi);

// ---------------------------------------------------------------------------
// Training

struct PatchPair {
  Volume b;
  Volume chi;
};

struct PatchDataset {
  std::vector<PatchPair> train;
  std::vector<PatchPair> val;
  void validate(const NetConfig& cfg) const;
};

// Regular-grid patch extraction (origin stepping by `step` per axis; the
// trailing partial window is dropped).
std::vector<PatchPair> extract_patches(const Volume& b, const Volume& chi,
                                       const Dims& patch, const Dims& step);

struct TrainEpochRow {
  int epoch = 0;
  double train_nll = 0.0;  // mean per-voxel NLL over the epoch's updates
  double val_nll = 0.0;    // mean per-voxel NLL on the validation set
  double val_rmse_pct = 0.0;  // aggregate 100*||mu-chi||/||chi|| on val
};

struct TrainCurves {
  std::vector<TrainEpochRow> rows;
  void write_csv(const std::string& path) const;
};

struct TrainOptions {
  int epochs = 60;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  LrDecay decay = LrDecay::None;
  // Finish early once val_rmse_pct drops to this level (negative: never).
  double stop_val_rmse_pct = -1.0;
  // Epochs during which the log-variance output gradient is zeroed, so only
  // the mean pathway trains at first.  Joint NLL training from a cold start
  // lets the variance head model the early (large) mean residuals and then
  // down-weight exactly the voxels the mean head still has to learn; a
  // mean-first warmup avoids that trap.  0 disables the warmup.
  int lv_freeze_epochs = 0;
};

struct TrainResult {
  NetWeights weights;
  TrainCurves curves;
  bool early_stopped = false;
};

struct TrainError : std::runtime_error {
  TrainCurves curves;
  TrainError(const std::string& what, TrainCurves c)
      : std::runtime_error(what), curves(std::move(c)) {}
};

// Supervised posterior-density training: Adam on the Gaussian NLL over
// shuffled single-patch updates. Deterministic for a fixed seed. The
// validation columns fall back to the training set when val is empty.
TrainResult train_pdi(const NetWeights& w, const PatchDataset& dataset,
                      const TrainOptions& opts);

// ---------------------------------------------------------------------------
// Unsupervised amortized-VI adaptation

struct AdaptCase {
  Volume b;
  NoiseModel noise;
};

struct AdaptResult {
  NetWeights weights;
  KlTrace trace;  // one row per optimizer step
};

// Adam on the network weights minimizing the VI objective evaluated at the
// network's (mu, log_var) outputs; gradients chain through the
// reparameterized samples into the weights. Starting from trained weights
// this is domain adaptation; from freshly initialized weights it is
// amortized VI without pre-training.
AdaptResult adapt_vi(const NetWeights& w, const std::vector<AdaptCase>& cases,
                     const KSpaceKernel& kernel, const RegConfig& reg,
                     int mc_samples, int epochs, double lr, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Serialization: JSON header line + little-endian f32 tensor payload in
// declared order.  Loading a file whose config or tensor table disagrees
// with its own declared shapes throws ConfigMismatchError.

struct ConfigMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_weights(const NetWeights& w, const std::string& path);
NetWeights load_weights(const std::string& path);

}  // namespace qsm
