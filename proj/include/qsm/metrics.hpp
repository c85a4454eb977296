#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "qsm/volume.hpp"

// Reconstruction quality metrics and the uncertainty-vs-error validation
// statistics.  Conventions (the literature rarely pins these down):
//   rmse_pct  100 * ||x - ref||_2 / ||ref||_2 over the mask.
//   psnr_db   20 * log10(max|ref| / rms_error) over the mask; +inf when the
//             error is exactly zero.
//   ssim      mean local SSIM over the mask; 3D Gaussian window sigma 1.5,
//             11 voxels wide; C1 = (0.01 L)^2, C2 = (0.03 L)^2 where L is
//             the joint min-to-max range of both inputs (both volumes are
//             shifted by the same joint minimum, keeping the metric
//             symmetric in its arguments); window statistics use
//             replicate-edge padding.
//   hfen_pct  100 * ||LoG(x) - LoG(ref)|| / ||LoG(ref)|| over the mask;
//             Laplacian-of-Gaussian sigma 1.5, 15^3 taps, zero-sum
//             normalized, replicate-edge padding (so any constant input
//             filters to exactly zero).

namespace qsm {

double rmse_pct(const Volume& x, const Volume& ref, const BinaryMask& mask);
double psnr_db(const Volume& x, const Volume& ref, const BinaryMask& mask);

struct SsimParams {
  double sigma = 1.5;
  int window = 11;
  double k1 = 0.01;
  double k2 = 0.03;
};

double ssim(const Volume& x, const Volume& ref, const BinaryMask& mask,
            const SsimParams& params = {});

double hfen_pct(const Volume& x, const Volume& ref, const BinaryMask& mask);

struct MetricReport {
  double psnr_db = 0.0;
  double rmse_pct = 0.0;
  double ssim = 0.0;
  double hfen_pct = 0.0;

  nlohmann::json to_json() const;
};

MetricReport evaluate_all(const Volume& x, const Volume& ref,
                          const BinaryMask& mask);

struct UncertaintyReport {
  double pearson_r = 0.0;
  double top_decile_overlap = 0.0;
  // Set when either map is constant over the mask (correlation undefined).
  bool degenerate = false;
  Volume mae_map;  // mean absolute ensemble error vs truth

  nlohmann::json to_json() const;
};

// Correlates the predicted per-voxel SD against the ensemble's mean
// absolute error.  top_decile_overlap = fraction of the top-10%-error
// voxels that are also top-10% in predicted SD.
UncertaintyReport uncertainty_validation(const std::vector<Volume>& mu_ensemble,
                                         const Volume& truth,
                                         const Volume& sd_pred,
                                         const BinaryMask& mask);

}  // namespace qsm
