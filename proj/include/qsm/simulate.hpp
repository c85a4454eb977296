#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "qsm/dipole.hpp"
#include "qsm/volume.hpp"

// Phantom construction and the synthetic signal pipeline: multi-echo
// synthesis from a susceptibility-induced field, per-voxel weighted
// least-squares field fitting with noise SD estimation, and repeated-noise
// ensembles.
//
// Units: susceptibility in ppm; the field is the dimensionless dipole
// convolution output on the same scale. Echo phase is field * phase_scale *
// echo_time, so phase_scale carries rad per unit-field per ms.

namespace qsm {

struct Primitive {
  enum class Shape { Sphere, Cylinder, Cuboid };
  Shape shape = Shape::Sphere;
  Vec3 center_mm{0, 0, 0};  // relative to the volume center
  double radius_mm = 0.0;   // sphere and cylinder
  double length_mm = 0.0;   // cylinder, full extent along z
  Vec3 size_mm{0, 0, 0};    // cuboid, full extents
  double chi_ppm = 0.0;
  double m0 = 1.0;
  double r2star_per_ms = 0.0;
};

struct PhantomSpec {
  Dims dims;
  Vec3 voxel_size{1, 1, 1};
  // Fraction of each dimension left empty on each side; the default keeps a
  // total zero margin of 25% per dimension against circular wraparound.
  double support_margin = 0.125;
  double background_m0 = 1.0;
  double background_r2star = 0.02;
  std::vector<Primitive> primitives;

  void validate() const;
};

struct TissueMaps {
  Volume chi;
  Volume m0;
  Volume r2star;
  BinaryMask support;
};

struct EchoConfig {
  std::vector<double> echo_times_ms{5.0, 10.0, 15.0, 20.0};
  double noise_sd = 0.01;    // complex channel SD, added to re and im independently
  double phase_scale = 1.0;  // rad per unit-field per ms; initial phase is fixed 0
  double sd_floor = 1e-6;    // floor for the fitted field SD

  void validate() const;
};

struct FitResult {
  Volume field;
  Volume sd;
  BinaryMask flagged;  // voxels where the fit was degenerate
};

// Voxelizes the spec by center-of-voxel membership; later primitives
// overwrite earlier ones where they overlap. chi is zero outside the
// support box. Throws if a primitive's bounding box leaves the support.
TissueMaps build_phantom(const PhantomSpec& spec);

Volume synthesize_field(const TissueMaps& maps, const KSpaceKernel& kernel);

// S_j = m0 * exp(-r2star * t_j) * exp(i * field * phase_scale * t_j) + n_j
// with i.i.d. Gaussian noise of cfg.noise_sd on real and imaginary parts.
// Draw order is echo-major, then voxel index, re before im.
std::vector<ComplexVolume> synthesize_echoes(const TissueMaps& maps, const Volume& field,
                                             const EchoConfig& cfg, SeededRng& rng);

// Per-voxel weighted LS fit of the temporally-unwrapped phase slope against
// echo time, weights |S_j|^2. sd is the standard error of the fitted slope
// estimated from residuals, divided by phase_scale and floored at
// cfg.sd_floor. All-zero-magnitude (or otherwise degenerate) voxels return
// field 0, sd at the floor, and are flagged.
FitResult fit_field(const std::vector<ComplexVolume>& echoes, const EchoConfig& cfg);

// Repeats synthesize_echoes + fit_field n times with child seeds
// (base_seed, i). Deterministic given base_seed, independent of the thread
// count (each repeat draws from its own child stream).
std::vector<FitResult> run_ensemble(const TissueMaps& maps, const KSpaceKernel& kernel,
                                    const EchoConfig& cfg, int n_repeats,
                                    std::uint64_t base_seed, int threads = 1);

// Deterministic pseudo-random phantom family used by tests and the CLI.
struct RandomPhantomOptions {
  int min_primitives = 3;
  int max_primitives = 5;
  double chi_lo = -0.15;
  double chi_hi = 0.3;
  double m0_lo = 0.4;
  double m0_hi = 1.0;
  double r2star_lo = 0.01;
  double r2star_hi = 0.08;
};
PhantomSpec random_phantom_spec(Dims dims, Vec3 voxel_size, std::uint64_t seed,
                                const RandomPhantomOptions& opt = {});

// JSON config parsing with JSON-pointer paths in error messages; schema in
// the README. The *_to_json functions emit the resolved config.
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);
nlohmann::json phantom_spec_to_json(const PhantomSpec& spec);
EchoConfig echo_config_from_json(const nlohmann::json& j);
nlohmann::json echo_config_to_json(const EchoConfig& cfg);

}  // namespace qsm
