// The qsm command-line tool: phantom construction, signal simulation,
// dipole inversion (MAP, subject VI, and the network variants), network
// training and adaptation, evaluation, rendering, and the one-command
// acceptance pipeline.
//
// Every executing subcommand writes a provenance.json next to its outputs
// (command, resolved config, seed, FNV-1a hashes of the inputs), so a run
// can be reproduced from its output directory alone.  --print-config prints
// the resolved config JSON without running.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qsm/accept.hpp"
#include "qsm/dipole.hpp"
#include "qsm/map_solver.hpp"
#include "qsm/metrics.hpp"
#include "qsm/net.hpp"
#include "qsm/report.hpp"
#include "qsm/simulate.hpp"
#include "qsm/vi.hpp"
#include "qsm/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qsm;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return j;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_provenance(const fs::path& out_dir, const std::string& command,
                      const json& config, std::uint64_t seed,
                      const std::vector<std::string>& inputs) {
  json p;
  p["command"] = command;
  p["config"] = config;
  p["seed"] = seed;
  json hashes = json::object();
  for (const auto& in : inputs) hashes[in] = file_fnv64_hex(in);
  p["inputs"] = hashes;
  write_text_file(out_dir / "provenance.json", p.dump(2) + "\n");
}

bool maybe_print_config(bool flag, const json& resolved) {
  if (flag) std::cout << resolved.dump(2) << "\n";
  return flag;
}

const char* decay_name(LrDecay d) {
  return d == LrDecay::Linear ? "linear" : "none";
}

LrDecay parse_decay(const std::string& s) {
  if (s == "none") return LrDecay::None;
  if (s == "linear") return LrDecay::Linear;
  throw std::runtime_error("decay: expected none or linear, got " + s);
}

Vec3 to_vec3(const std::vector<double>& v) { return {v[0], v[1], v[2]}; }

const std::string& manifest_path(const json& m, const json& e,
                                 const char* key, std::string* storage) {
  if (!e.contains(key) || !e.at(key).is_string())
    throw std::runtime_error("manifest: case entries need a \"" +
                             std::string(key) + "\" path");
  (void)m;
  *storage = e.at(key).get<std::string>();
  return *storage;
}

// Shared inputs of every inversion-style subcommand.
struct FieldArgs {
  std::string field, sd, support, m0;
  std::vector<double> b0{0.0, 0.0, 1.0};
  double lambda = 20.0;
  double tv_eps = 1e-6;
  double keep_fraction = 0.3;
};

void add_field_args(CLI::App* cmd, FieldArgs& a) {
  cmd->add_option("--field", a.field, "fitted local field (.vol)")->required();
  cmd->add_option("--sd", a.sd, "per-voxel field SD (.vol)")->required();
  cmd->add_option("--support", a.support, "support mask (.vol, 0/1)")
      ->required();
  cmd->add_option("--m0", a.m0, "magnitude image for the edge mask (.vol)")
      ->required();
  cmd->add_option("--b0", a.b0, "B0 unit direction (default 0 0 1)")
      ->expected(3);
  cmd->add_option("--lambda", a.lambda, "TV regularization weight");
  cmd->add_option("--tv-eps", a.tv_eps, "TV smoothing epsilon");
  cmd->add_option("--keep-fraction", a.keep_fraction,
                  "fraction of strongest magnitude edges released per axis");
}

json field_args_json(const FieldArgs& a) {
  return json{{"b0", a.b0},
              {"lambda", a.lambda},
              {"tv_epsilon", a.tv_eps},
              {"keep_fraction", a.keep_fraction}};
}

struct LoadedTask {
  Volume b;
  NoiseModel noise;
  KSpaceKernel kernel;
  RegConfig reg;
};

LoadedTask load_task(const FieldArgs& a) {
  LoadedTask t;
  t.b = load_volume(a.field);
  t.noise.sd = load_volume(a.sd);
  t.noise.support = load_mask(a.support);
  const Volume m0 = load_volume(a.m0);
  t.noise.validate(t.b.dims);
  t.kernel = build_dipole_kernel(t.b.dims, t.b.voxel_size, to_vec3(a.b0));
  t.reg.lambda = a.lambda;
  t.reg.tv_epsilon = a.tv_eps;
  t.reg.mask = edge_mask_from_magnitude(m0, t.noise.support, a.keep_fraction);
  t.reg.validate(t.b.dims);
  return t;
}

std::vector<std::string> field_inputs(const FieldArgs& a) {
  return {a.field, a.sd, a.support, a.m0};
}

Volume sd_from_log_var(const Volume& log_var) {
  Volume sd = log_var;
  for (double& v : sd.data) v = std::exp(0.5 * v);
  return sd;
}

std::string self_path(const char* argv0) {
  std::error_code ec;
  const fs::path p = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) return p.string();
  return argv0;
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomArgs {
  std::string config;
  std::uint64_t random_seed = 1;
  std::vector<int> dims{32, 32, 32};
  std::vector<double> voxel{1.0, 1.0, 1.0};
  std::string out;
  bool print_config = false;
};

int run_phantom(const PhantomArgs& a) {
  PhantomSpec spec;
  std::vector<std::string> inputs;
  if (!a.config.empty()) {
    spec = phantom_spec_from_json(read_json_file(a.config));
    inputs.push_back(a.config);
  } else {
    spec = random_phantom_spec({a.dims[0], a.dims[1], a.dims[2]},
                               to_vec3(a.voxel), a.random_seed);
  }
  const json resolved = phantom_spec_to_json(spec);
  if (maybe_print_config(a.print_config, resolved)) return 0;

  const TissueMaps maps = build_phantom(spec);
  fs::create_directories(a.out);
  const fs::path out(a.out);
  save_volume(maps.chi, (out / "chi.vol").string());
  save_volume(maps.m0, (out / "m0.vol").string());
  save_volume(maps.r2star, (out / "r2star.vol").string());
  save_mask(maps.support, (out / "support.vol").string());
  write_provenance(out, "phantom", resolved,
                   a.config.empty() ? a.random_seed : 0, inputs);
  std::cout << "phantom: wrote chi/m0/r2star/support to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string phantom_dir;
  std::string echo_config;
  std::vector<double> b0{0.0, 0.0, 1.0};
  int repeats = 1;
  std::uint64_t seed = 0;
  std::string out;
  bool print_config = false;
};

int run_simulate(const SimulateArgs& a) {
  EchoConfig echo;
  if (!a.echo_config.empty())
    echo = echo_config_from_json(read_json_file(a.echo_config));
  const json resolved{{"echo", echo_config_to_json(echo)},
                      {"b0", a.b0},
                      {"repeats", a.repeats},
                      {"seed", a.seed}};
  if (maybe_print_config(a.print_config, resolved)) return 0;

  const fs::path pd(a.phantom_dir);
  TissueMaps maps;
  maps.chi = load_volume((pd / "chi.vol").string());
  maps.m0 = load_volume((pd / "m0.vol").string());
  maps.r2star = load_volume((pd / "r2star.vol").string());
  maps.support = load_mask((pd / "support.vol").string());

  const KSpaceKernel kernel =
      build_dipole_kernel(maps.chi.dims, maps.chi.voxel_size, to_vec3(a.b0));
  const auto results = run_ensemble(maps, kernel, echo, a.repeats, a.seed,
                                    accept::env_threads());

  fs::create_directories(a.out);
  const fs::path out(a.out);
  char name[32];
  for (int i = 0; i < a.repeats; ++i) {
    std::snprintf(name, sizeof name, "field_%03d.vol", i);
    save_volume(results[i].field, (out / name).string());
    std::snprintf(name, sizeof name, "sd_%03d.vol", i);
    save_volume(results[i].sd, (out / name).string());
  }
  std::vector<std::string> inputs = {
      (pd / "chi.vol").string(), (pd / "m0.vol").string(),
      (pd / "r2star.vol").string(), (pd / "support.vol").string()};
  if (!a.echo_config.empty()) inputs.push_back(a.echo_config);
  write_provenance(out, "simulate", resolved, a.seed, inputs);
  std::cout << "simulate: wrote " << 2 * a.repeats << " volumes to " << a.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// medi

struct MediArgs {
  FieldArgs field;
  int iters = 100;
  double tol = 1e-6;
  std::string out;
  bool print_config = false;
};

int run_medi(const MediArgs& a) {
  json resolved = field_args_json(a.field);
  resolved["max_iters"] = a.iters;
  resolved["tol"] = a.tol;
  if (maybe_print_config(a.print_config, resolved)) return 0;

  const LoadedTask t = load_task(a.field);
  SolveOptions opts;
  opts.max_iters = a.iters;
  opts.tol = a.tol;

  fs::create_directories(a.out);
  const fs::path out(a.out);
  MapResult res;
  try {
    res = solve_medi(t.b, t.noise, t.kernel, t.reg, opts);
  } catch (const SolveError& e) {
    write_objective_trace_csv(e.trace, (out / "trace.csv").string());
    throw;
  }
  save_volume(res.chi, (out / "chi.vol").string());
  write_objective_trace_csv(res.trace, (out / "trace.csv").string());

  ReconReport rep;
  rep.method = "medi";
  rep.config_hash = fnv1a64_hex(resolved.dump());
  rep.seed = 0;
  rep.iterations = res.iterations;
  rep.converged = res.converged;
  rep.final_objective = res.trace.back().total;
  rep.save((out / "report.json").string());
  write_provenance(out, "medi", resolved, 0, field_inputs(a.field));
  std::cout << "medi: " << res.iterations << " iterations, objective "
            << format_g17(res.trace.back().total) << ", wrote " << a.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// vi

struct ViArgs {
  FieldArgs field;
  int mc_samples = 5;
  double lr = 1e-3;
  int iters = 100;
  std::string decay = "none";
  std::uint64_t seed = 0;
  std::string out;
  bool print_config = false;
};

int run_vi(const ViArgs& a) {
  ViConfig cfg;
  cfg.mc_samples = a.mc_samples;
  cfg.lr = a.lr;
  cfg.iterations = a.iters;
  cfg.decay = parse_decay(a.decay);
  cfg.seed = a.seed;
  cfg.validate();
  json resolved = field_args_json(a.field);
  resolved["vi"] = vi_config_to_json(cfg);
  if (maybe_print_config(a.print_config, resolved)) return 0;

  const LoadedTask t = load_task(a.field);
  fs::create_directories(a.out);
  const fs::path out(a.out);
  ViResult res;
  try {
    res = fit_subject_vi(t.b, t.noise, t.kernel, t.reg, cfg);
  } catch (const ViError& e) {
    e.trace.write_csv((out / "kl_trace.csv").string());
    throw;
  }
  save_volume(res.params.mu, (out / "mu.vol").string());
  save_volume(res.params.log_var, (out / "log_var.vol").string());
  save_volume(sd_from_log_var(res.params.log_var), (out / "sd.vol").string());
  res.trace.write_csv((out / "kl_trace.csv").string());

  ReconReport rep;
  rep.method = "vi";
  rep.config_hash = fnv1a64_hex(resolved.dump());
  rep.seed = a.seed;
  rep.iterations = static_cast<int>(res.trace.rows.size());
  rep.converged = true;
  rep.final_objective = res.trace.rows.back().total;
  rep.save((out / "report.json").string());
  write_provenance(out, "vi", resolved, a.seed, field_inputs(a.field));
  std::cout << "vi: " << res.trace.rows.size() << " iterations, objective "
            << format_g17(res.trace.rows.back().total) << ", wrote " << a.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-pdi

struct TrainArgs {
  std::string manifest;
  int levels = 2;
  int filters = 8;
  bool normalize = false;
  std::uint64_t init_seed = 1;
  int epochs = 60;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::string decay = "none";
  double stop_val_rmse = -1.0;
  int lv_freeze_epochs = 0;
  std::string out;
  bool print_config = false;
};

int run_train_pdi(const TrainArgs& a) {
  const json manifest = read_json_file(a.manifest);
  NetConfig cfg;
  cfg.levels = a.levels;
  cfg.base_filters = a.filters;
  cfg.normalize = a.normalize;
  cfg.validate();
  TrainOptions opts;
  opts.epochs = a.epochs;
  opts.lr = a.lr;
  opts.seed = a.seed;
  opts.decay = parse_decay(a.decay);
  opts.stop_val_rmse_pct = a.stop_val_rmse;
  opts.lv_freeze_epochs = a.lv_freeze_epochs;

  const json resolved{{"net", net_config_to_json(cfg)},
                      {"init_seed", a.init_seed},
                      {"train",
                       {{"epochs", opts.epochs},
                        {"lr", opts.lr},
                        {"seed", opts.seed},
                        {"decay", decay_name(opts.decay)},
                        {"stop_val_rmse_pct", opts.stop_val_rmse_pct},
                        {"lv_freeze_epochs", opts.lv_freeze_epochs}}},
                      {"manifest", manifest}};
  if (maybe_print_config(a.print_config, resolved)) return 0;

  auto dims_of = [&](const char* key) -> Dims {
    if (!manifest.contains(key) || !manifest.at(key).is_array() ||
        manifest.at(key).size() != 3)
      throw std::runtime_error("manifest: /" + std::string(key) +
                               ": expected [nx, ny, nz]");
    const json& j = manifest.at(key);
    return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
  };
  const Dims patch = dims_of("patch");
  const Dims step = dims_of("step");

  std::vector<std::string> inputs{a.manifest};
  PatchDataset ds;
  auto load_split = [&](const char* key, std::vector<PatchPair>* dst) {
    if (!manifest.contains(key)) return;
    const json& entries = manifest.at(key);
    if (!entries.is_array())
      throw std::runtime_error("manifest: /" + std::string(key) +
                               ": expected an array");
    for (const json& e : entries) {
      std::string b_path, chi_path;
      manifest_path(manifest, e, "b", &b_path);
      manifest_path(manifest, e, "chi", &chi_path);
      inputs.push_back(b_path);
      inputs.push_back(chi_path);
      const Volume b = load_volume(b_path);
      const Volume chi = load_volume(chi_path);
      for (auto& p : extract_patches(b, chi, patch, step))
        dst->push_back(std::move(p));
    }
  };
  load_split("train", &ds.train);
  load_split("val", &ds.val);
  if (ds.train.empty())
    throw std::runtime_error("manifest produced an empty training set");

  fs::create_directories(a.out);
  const fs::path out(a.out);
  TrainResult res;
  try {
    res = train_pdi(NetWeights::init(cfg, a.init_seed), ds, opts);
  } catch (const TrainError& e) {
    e.curves.write_csv((out / "curves.csv").string());
    throw;
  }
  save_weights(res.weights, (out / "weights.qsmw").string());
  res.curves.write_csv((out / "curves.csv").string());

  ReconReport rep;
  rep.method = "train-pdi";
  rep.config_hash = fnv1a64_hex(resolved.dump());
  rep.seed = a.seed;
  rep.iterations = static_cast<int>(res.curves.rows.size());
  rep.converged = res.early_stopped;
  rep.final_objective = res.curves.rows.back().val_nll;
  rep.extra = {{"train_pairs", ds.train.size()},
               {"val_pairs", ds.val.size()},
               {"final_val_rmse_pct", res.curves.rows.back().val_rmse_pct}};
  rep.save((out / "report.json").string());
  write_provenance(out, "train-pdi", resolved, a.seed, inputs);
  std::cout << "train-pdi: " << res.curves.rows.size() << " epochs on "
            << ds.train.size() << " patches, final val RMSE "
            << res.curves.rows.back().val_rmse_pct << "%, wrote " << a.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// adapt-vi

struct AdaptArgs {
  std::string manifest;
  std::string weights;
  std::uint64_t init_seed = 1;
  int levels = 2;
  int filters = 8;
  bool normalize = false;
  std::vector<double> b0{0.0, 0.0, 1.0};
  double lambda = 20.0;
  double tv_eps = 1e-6;
  double keep_fraction = 0.3;
  int mc_samples = 2;
  int epochs = 20;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::string out;
  bool print_config = false;
};

int run_adapt_vi(const AdaptArgs& a) {
  const json manifest = read_json_file(a.manifest);
  NetConfig init_cfg;
  init_cfg.levels = a.levels;
  init_cfg.base_filters = a.filters;
  init_cfg.normalize = a.normalize;
  json resolved{{"b0", a.b0},
                {"lambda", a.lambda},
                {"tv_epsilon", a.tv_eps},
                {"keep_fraction", a.keep_fraction},
                {"mc_samples", a.mc_samples},
                {"epochs", a.epochs},
                {"lr", a.lr},
                {"seed", a.seed},
                {"manifest", manifest}};
  if (!a.weights.empty())
    resolved["weights"] = a.weights;
  else
    resolved["init"] = {{"net", net_config_to_json(init_cfg)},
                        {"seed", a.init_seed}};
  if (maybe_print_config(a.print_config, resolved)) return 0;

  for (const char* key : {"m0", "support", "cases"})
    if (!manifest.contains(key))
      throw std::runtime_error("manifest: missing /" + std::string(key));
  std::vector<std::string> inputs{a.manifest};
  const std::string m0_path = manifest.at("m0").get<std::string>();
  const std::string support_path = manifest.at("support").get<std::string>();
  inputs.push_back(m0_path);
  inputs.push_back(support_path);
  const Volume m0 = load_volume(m0_path);
  const BinaryMask support = load_mask(support_path);

  std::vector<AdaptCase> cases;
  for (const json& e : manifest.at("cases")) {
    std::string b_path, sd_path;
    manifest_path(manifest, e, "b", &b_path);
    manifest_path(manifest, e, "sd", &sd_path);
    inputs.push_back(b_path);
    inputs.push_back(sd_path);
    AdaptCase c;
    c.b = load_volume(b_path);
    c.noise.sd = load_volume(sd_path);
    c.noise.support = support;
    cases.push_back(std::move(c));
  }
  if (cases.empty()) throw std::runtime_error("manifest: /cases is empty");

  const KSpaceKernel kernel = build_dipole_kernel(
      cases[0].b.dims, cases[0].b.voxel_size, to_vec3(a.b0));
  RegConfig reg;
  reg.lambda = a.lambda;
  reg.tv_epsilon = a.tv_eps;
  reg.mask = edge_mask_from_magnitude(m0, support, a.keep_fraction);

  NetWeights w0 = a.weights.empty() ? NetWeights::init(init_cfg, a.init_seed)
                                    : load_weights(a.weights);
  if (!a.weights.empty()) inputs.push_back(a.weights);

  fs::create_directories(a.out);
  const fs::path out(a.out);
  AdaptResult res;
  try {
    res = adapt_vi(w0, cases, kernel, reg, a.mc_samples, a.epochs, a.lr,
                   a.seed);
  } catch (const ViError& e) {
    e.trace.write_csv((out / "kl_trace.csv").string());
    throw;
  }
  save_weights(res.weights, (out / "weights.qsmw").string());
  res.trace.write_csv((out / "kl_trace.csv").string());

  ReconReport rep;
  rep.method = "adapt-vi";
  rep.config_hash = fnv1a64_hex(resolved.dump());
  rep.seed = a.seed;
  rep.iterations = static_cast<int>(res.trace.rows.size());
  rep.converged = true;
  rep.final_objective =
      res.trace.rows.empty() ? 0.0 : res.trace.rows.back().total;
  rep.extra = {{"cases", cases.size()}};
  rep.save((out / "report.json").string());
  write_provenance(out, "adapt-vi", resolved, a.seed, inputs);
  std::cout << "adapt-vi: " << res.trace.rows.size() << " steps over "
            << cases.size() << " cases, wrote " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// reconstruct

struct ReconstructArgs {
  std::string method;
  FieldArgs field;
  // medi
  int iters = 100;
  double tol = 1e-6;
  // vi
  int mc_samples = 5;
  double lr = 1e-3;
  std::string decay = "none";
  std::uint64_t seed = 0;
  // network methods
  std::string weights;
  std::uint64_t init_seed = 1;
  int levels = 2;
  int filters = 8;
  bool normalize = false;
  int adapt_epochs = 20;
  double adapt_lr = 1e-3;
  std::uint64_t adapt_seed = 0;
  int adapt_mc = 2;
  std::string out;
  bool print_config = false;
};

void save_net_outputs(const NetWeights& w, const Volume& b,
                      const fs::path& out) {
  auto [mu, log_var] = net_forward(w, b);
  save_volume(mu, (out / "mu.vol").string());
  save_volume(log_var, (out / "log_var.vol").string());
  save_volume(sd_from_log_var(log_var), (out / "sd.vol").string());
}

int run_reconstruct(const ReconstructArgs& a) {
  json resolved = field_args_json(a.field);
  resolved["method"] = a.method;
  if (a.method == "medi") {
    resolved["max_iters"] = a.iters;
    resolved["tol"] = a.tol;
  } else if (a.method == "vi") {
    resolved["vi"] = {{"mc_samples", a.mc_samples},
                      {"lr", a.lr},
                      {"iterations", a.iters},
                      {"decay", a.decay},
                      {"seed", a.seed}};
  } else {
    if (!a.weights.empty())
      resolved["weights"] = a.weights;
    else
      resolved["init"] = {{"net",
                           net_config_to_json(
                               {a.levels, a.filters, a.normalize})},
                          {"seed", a.init_seed}};
    if (a.method != "pdi")
      resolved["adapt"] = {{"epochs", a.adapt_epochs},
                           {"lr", a.adapt_lr},
                           {"seed", a.adapt_seed},
                           {"mc_samples", a.adapt_mc}};
  }
  if (maybe_print_config(a.print_config, resolved)) return 0;

  if ((a.method == "pdi" || a.method == "pdi-vi") && a.weights.empty())
    throw std::runtime_error(
        "method " + a.method +
        " requires --weights pointing to a trained network weights file "
        "(produce one with `qsm train-pdi`)");

  const LoadedTask t = load_task(a.field);
  fs::create_directories(a.out);
  const fs::path out(a.out);
  std::vector<std::string> inputs = field_inputs(a.field);
  if (!a.weights.empty()) inputs.push_back(a.weights);

  ReconReport rep;
  rep.method = a.method;
  rep.config_hash = fnv1a64_hex(resolved.dump());
  rep.seed = a.seed;

  if (a.method == "medi") {
    SolveOptions opts;
    opts.max_iters = a.iters;
    opts.tol = a.tol;
    const MapResult res = solve_medi(t.b, t.noise, t.kernel, t.reg, opts);
    save_volume(res.chi, (out / "chi.vol").string());
    write_objective_trace_csv(res.trace, (out / "trace.csv").string());
    rep.seed = 0;
    rep.iterations = res.iterations;
    rep.converged = res.converged;
    rep.final_objective = res.trace.back().total;
  } else if (a.method == "vi") {
    ViConfig cfg;
    cfg.mc_samples = a.mc_samples;
    cfg.lr = a.lr;
    cfg.iterations = a.iters;
    cfg.decay = parse_decay(a.decay);
    cfg.seed = a.seed;
    const ViResult res = fit_subject_vi(t.b, t.noise, t.kernel, t.reg, cfg);
    save_volume(res.params.mu, (out / "mu.vol").string());
    save_volume(res.params.log_var, (out / "log_var.vol").string());
    save_volume(sd_from_log_var(res.params.log_var),
                (out / "sd.vol").string());
    res.trace.write_csv((out / "kl_trace.csv").string());
    rep.iterations = static_cast<int>(res.trace.rows.size());
    rep.converged = true;
    rep.final_objective = res.trace.rows.back().total;
  } else if (a.method == "pdi") {
    const NetWeights w = load_weights(a.weights);
    w.config.check_input_dims(t.b.dims);
    save_net_outputs(w, t.b, out);
    rep.seed = 0;
    rep.converged = true;
  } else if (a.method == "pdi-vi" || a.method == "pdi-vi0") {
    NetConfig init_cfg;
    init_cfg.levels = a.levels;
    init_cfg.base_filters = a.filters;
    init_cfg.normalize = a.normalize;
    NetWeights w0 = a.method == "pdi-vi"
                        ? load_weights(a.weights)
                        : NetWeights::init(init_cfg, a.init_seed);
    w0.config.check_input_dims(t.b.dims);
    std::vector<AdaptCase> cases(1);
    cases[0].b = t.b;
    cases[0].noise = t.noise;
    const AdaptResult res = adapt_vi(w0, cases, t.kernel, t.reg, a.adapt_mc,
                                     a.adapt_epochs, a.adapt_lr, a.adapt_seed);
    save_weights(res.weights, (out / "weights.qsmw").string());
    res.trace.write_csv((out / "kl_trace.csv").string());
    save_net_outputs(res.weights, t.b, out);
    rep.seed = a.adapt_seed;
    rep.iterations = static_cast<int>(res.trace.rows.size());
    rep.converged = true;
    rep.final_objective =
        res.trace.rows.empty() ? 0.0 : res.trace.rows.back().total;
  } else {
    throw std::runtime_error("unknown method: " + a.method);
  }

  rep.save((out / "report.json").string());
  write_provenance(out, "reconstruct", resolved, rep.seed, inputs);
  std::cout << "reconstruct (" << a.method << "): wrote " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string x, ref, mask;
  std::vector<std::string> rois;  // name=path
  std::string out;
  bool print_config = false;
};

int run_evaluate(const EvaluateArgs& a) {
  std::vector<std::pair<std::string, std::string>> rois;
  for (const std::string& spec : a.rois) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
      throw std::runtime_error("--roi expects name=path, got " + spec);
    rois.emplace_back(spec.substr(0, eq), spec.substr(eq + 1));
  }
  json roi_json = json::object();
  for (const auto& [name, path] : rois) roi_json[name] = path;
  const json resolved{
      {"x", a.x}, {"ref", a.ref}, {"mask", a.mask}, {"roi", roi_json}};
  if (maybe_print_config(a.print_config, resolved)) return 0;

  const Volume x = load_volume(a.x);
  const Volume ref = load_volume(a.ref);
  const BinaryMask mask = load_mask(a.mask);

  fs::create_directories(a.out);
  const fs::path out(a.out);
  std::vector<std::string> inputs{a.x, a.ref, a.mask};

  json report;
  std::string csv = "roi,psnr_db,rmse_pct,ssim,hfen_pct\n";
  auto add_row = [&](const std::string& name, const MetricReport& m) {
    report[name] = m.to_json();
    csv += name + "," + format_g17(m.psnr_db) + "," + format_g17(m.rmse_pct) +
           "," + format_g17(m.ssim) + "," + format_g17(m.hfen_pct) + "\n";
  };
  add_row("all", evaluate_all(x, ref, mask));
  for (const auto& [name, path] : rois) {
    inputs.push_back(path);
    add_row(name, evaluate_all(x, ref, load_mask(path)));
  }

  write_text_file(out / "metrics.json", report.dump(2) + "\n");
  write_text_file(out / "metrics.csv", csv);
  write_provenance(out, "evaluate", resolved, 0, inputs);
  std::cout << "evaluate: wrote metrics for " << 1 + rois.size()
            << " region(s) to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// render

struct RenderArgs {
  std::string in;
  std::string axis = "z";
  int index = 0;
  std::optional<double> lo, hi;
  std::string out;
  bool print_config = false;
};

int run_render(const RenderArgs& a) {
  int axis;
  if (a.axis == "x" || a.axis == "0")
    axis = 0;
  else if (a.axis == "y" || a.axis == "1")
    axis = 1;
  else if (a.axis == "z" || a.axis == "2")
    axis = 2;
  else
    throw std::runtime_error("--axis expects x, y, or z, got " + a.axis);

  const Volume v = load_volume(a.in);
  double lo = a.lo.value_or(0.0), hi = a.hi.value_or(0.0);
  if (!a.lo || !a.hi) {
    double mn = v.data.empty() ? 0.0 : v.data[0], mx = mn;
    for (double d : v.data) {
      mn = std::min(mn, d);
      mx = std::max(mx, d);
    }
    if (!a.lo) lo = mn;
    if (!a.hi) hi = mx;
  }
  if (hi <= lo) hi = lo + 1.0;
  const json resolved{{"in", a.in},
                      {"axis", axis},
                      {"index", a.index},
                      {"lo", lo},
                      {"hi", hi}};
  if (maybe_print_config(a.print_config, resolved)) return 0;

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  slice_to_pgm(v, axis, a.index, lo, hi, out.string());
  // Single-file output: provenance sits next to it under a derived name.
  const fs::path prov_dir =
      out.has_parent_path() ? out.parent_path() : fs::path(".");
  json p{{"command", "render"},
         {"config", resolved},
         {"seed", 0},
         {"inputs", {{a.in, file_fnv64_hex(a.in)}}}};
  write_text_file(prov_dir / (out.filename().string() + ".provenance.json"),
                  p.dump(2) + "\n");
  std::cout << "render: wrote " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// repro

struct ReproArgs {
  std::string suite;
  std::string out = "repro-out";
  std::string fixtures;
  std::string cli_path;  // filled from /proc/self/exe
};

int run_repro(const ReproArgs& a) {
  accept::SuiteOptions opts;
  opts.work_dir = (fs::path(a.out) / "work").string();
  opts.fixture_dir = a.fixtures;
  opts.cli_path = a.cli_path;
  opts.progress = true;
  const accept::SuiteResult res = accept::run_suite(a.suite, opts);
  fs::create_directories(a.out);
  const std::string table = res.table();
  write_text_file(fs::path(a.out) / "acceptance_report.txt", table);
  std::cout << "\n" << table;
  return res.all_pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Bayesian dipole inversion toolkit: phantoms, multi-echo simulation, "
      "MAP/VI/network reconstruction, metrics, and an acceptance pipeline"};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "build a phantom volume set");
  phantom->add_option("--config", pa.config, "phantom spec JSON");
  phantom->add_option("--random-seed", pa.random_seed,
                      "seed for the random phantom family "
                      "(ignored when --config is given)");
  phantom->add_option("--dims", pa.dims, "grid size nx ny nz")->expected(3);
  phantom->add_option("--voxel", pa.voxel, "voxel size in mm")->expected(3);
  phantom->add_option("--out", pa.out, "output directory")->required();
  phantom->add_flag("--print-config", pa.print_config,
                    "print resolved config and exit");

  SimulateArgs sa;
  auto* simulate =
      app.add_subcommand("simulate", "multi-echo synthesis and field fitting");
  simulate->add_option("--phantom", sa.phantom_dir,
                       "directory with chi/m0/r2star/support .vol files")
      ->required();
  simulate->add_option("--echo-config", sa.echo_config, "echo config JSON");
  simulate->add_option("--b0", sa.b0, "B0 unit direction")->expected(3);
  simulate->add_option("--repeats", sa.repeats, "noise realizations");
  simulate->add_option("--seed", sa.seed, "base noise seed");
  simulate->add_option("--out", sa.out, "output directory")->required();
  simulate->add_flag("--print-config", sa.print_config,
                     "print resolved config and exit");

  MediArgs ma;
  auto* medi =
      app.add_subcommand("medi", "edge-masked TV MAP dipole inversion");
  add_field_args(medi, ma.field);
  medi->add_option("--iters", ma.iters, "max descent iterations");
  medi->add_option("--tol", ma.tol, "relative-decrease stopping tolerance");
  medi->add_option("--out", ma.out, "output directory")->required();
  medi->add_flag("--print-config", ma.print_config,
                 "print resolved config and exit");

  ViArgs va;
  auto* vi = app.add_subcommand(
      "vi", "subject-specific mean-field Gaussian variational inference");
  add_field_args(vi, va.field);
  vi->add_option("--mc-samples", va.mc_samples, "Monte Carlo samples per step");
  vi->add_option("--lr", va.lr, "Adam learning rate");
  vi->add_option("--iters", va.iters, "optimization iterations");
  vi->add_option("--decay", va.decay, "learning-rate decay: none | linear")
      ->check(CLI::IsMember({"none", "linear"}));
  vi->add_option("--seed", va.seed, "sampling seed");
  vi->add_option("--out", va.out, "output directory")->required();
  vi->add_flag("--print-config", va.print_config,
               "print resolved config and exit");

  TrainArgs ta;
  auto* train = app.add_subcommand(
      "train-pdi", "supervised posterior-density training on patch pairs");
  train->add_option("--manifest", ta.manifest, "dataset manifest JSON")
      ->required();
  train->add_option("--levels", ta.levels, "network pyramid levels");
  train->add_option("--filters", ta.filters, "base filter count");
  train->add_flag("--normalize", ta.normalize,
                  "enable per-channel normalization layers");
  train->add_option("--init-seed", ta.init_seed, "weight init seed");
  train->add_option("--epochs", ta.epochs, "training epochs");
  train->add_option("--lr", ta.lr, "Adam learning rate");
  train->add_option("--seed", ta.seed, "shuffling seed");
  train->add_option("--decay", ta.decay, "learning-rate decay: none | linear")
      ->check(CLI::IsMember({"none", "linear"}));
  train->add_option("--stop-val-rmse", ta.stop_val_rmse,
                    "early-stop threshold on validation RMSE percent "
                    "(negative disables)");
  train->add_option("--lv-freeze-epochs", ta.lv_freeze_epochs,
                    "train only the mean pathway for this many leading "
                    "epochs before enabling the variance head");
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_flag("--print-config", ta.print_config,
                  "print resolved config and exit");

  AdaptArgs aa;
  auto* adapt = app.add_subcommand(
      "adapt-vi", "unsupervised variational adaptation of network weights");
  adapt->add_option("--manifest", aa.manifest, "case manifest JSON")
      ->required();
  adapt->add_option("--weights", aa.weights,
                    "starting weights file (omit to train from scratch)");
  adapt->add_option("--init-seed", aa.init_seed,
                    "weight init seed when starting from scratch");
  adapt->add_option("--levels", aa.levels, "network levels (scratch start)");
  adapt->add_option("--filters", aa.filters,
                    "base filter count (scratch start)");
  adapt->add_flag("--normalize", aa.normalize,
                  "normalization layers (scratch start)");
  adapt->add_option("--b0", aa.b0, "B0 unit direction")->expected(3);
  adapt->add_option("--lambda", aa.lambda, "TV regularization weight");
  adapt->add_option("--tv-eps", aa.tv_eps, "TV smoothing epsilon");
  adapt->add_option("--keep-fraction", aa.keep_fraction,
                    "edge-release fraction per axis");
  adapt->add_option("--mc-samples", aa.mc_samples,
                    "Monte Carlo samples per step");
  adapt->add_option("--epochs", aa.epochs, "passes over the cases");
  adapt->add_option("--lr", aa.lr, "Adam learning rate");
  adapt->add_option("--seed", aa.seed, "shuffle/sampling seed");
  adapt->add_option("--out", aa.out, "output directory")->required();
  adapt->add_flag("--print-config", aa.print_config,
                  "print resolved config and exit");

  ReconstructArgs ra;
  auto* rec = app.add_subcommand("reconstruct",
                                 "one-subject reconstruction by any method");
  rec->add_option("--method", ra.method,
                  "medi | vi | pdi | pdi-vi0 | pdi-vi")
      ->required()
      ->check(CLI::IsMember({"medi", "vi", "pdi", "pdi-vi0", "pdi-vi"}));
  add_field_args(rec, ra.field);
  rec->add_option("--iters", ra.iters, "iterations (medi/vi)");
  rec->add_option("--tol", ra.tol, "stopping tolerance (medi)");
  rec->add_option("--mc-samples", ra.mc_samples, "MC samples (vi)");
  rec->add_option("--lr", ra.lr, "learning rate (vi)");
  rec->add_option("--decay", ra.decay, "lr decay (vi): none | linear")
      ->check(CLI::IsMember({"none", "linear"}));
  rec->add_option("--seed", ra.seed, "sampling seed (vi)");
  rec->add_option("--weights", ra.weights,
                  "trained weights (pdi, pdi-vi)");
  rec->add_option("--init-seed", ra.init_seed, "weight init seed (pdi-vi0)");
  rec->add_option("--levels", ra.levels, "network levels (pdi-vi0)");
  rec->add_option("--filters", ra.filters, "base filters (pdi-vi0)");
  rec->add_flag("--normalize", ra.normalize,
                "normalization layers (pdi-vi0)");
  rec->add_option("--adapt-epochs", ra.adapt_epochs,
                  "adaptation steps (pdi-vi, pdi-vi0)");
  rec->add_option("--adapt-lr", ra.adapt_lr, "adaptation learning rate");
  rec->add_option("--adapt-seed", ra.adapt_seed, "adaptation seed");
  rec->add_option("--adapt-mc", ra.adapt_mc, "adaptation MC samples");
  rec->add_option("--out", ra.out, "output directory")->required();
  rec->add_flag("--print-config", ra.print_config,
                "print resolved config and exit");

  EvaluateArgs ea;
  auto* evaluate =
      app.add_subcommand("evaluate", "quality metrics against a reference");
  evaluate->add_option("--x", ea.x, "volume under test (.vol)")->required();
  evaluate->add_option("--ref", ea.ref, "reference volume (.vol)")->required();
  evaluate->add_option("--mask", ea.mask, "evaluation mask (.vol)")
      ->required();
  evaluate->add_option("--roi", ea.rois,
                       "named ROI mask as name=path (repeatable)");
  evaluate->add_option("--out", ea.out, "output directory")->required();
  evaluate->add_flag("--print-config", ea.print_config,
                     "print resolved config and exit");

  RenderArgs rna;
  auto* render = app.add_subcommand("render", "write one slice as a PGM");
  render->add_option("--in", rna.in, "input volume (.vol)")->required();
  render->add_option("--axis", rna.axis, "slice axis: x | y | z");
  render->add_option("--index", rna.index, "slice index along the axis");
  double lo_val = 0.0, hi_val = 0.0;
  auto* lo_opt = render->add_option("--lo", lo_val, "window low (default min)");
  auto* hi_opt =
      render->add_option("--hi", hi_val, "window high (default max)");
  render->add_option("--out", rna.out, "output PGM path")->required();
  render->add_flag("--print-config", rna.print_config,
                   "print resolved config and exit");

  ReproArgs rpa;
  auto* repro = app.add_subcommand(
      "repro", "run the acceptance suite and write its report");
  repro->add_option("suite", rpa.suite, "smoke | full")
      ->required()
      ->check(CLI::IsMember({"smoke", "full"}));
  repro->add_option("--out", rpa.out, "output directory");
  repro->add_option("--fixtures", rpa.fixtures,
                    "fixture directory (default: QSM_FIXTURE_DIR or the "
                    "build-time default)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*phantom) return run_phantom(pa);
    if (*simulate) return run_simulate(sa);
    if (*medi) return run_medi(ma);
    if (*vi) return run_vi(va);
    if (*train) return run_train_pdi(ta);
    if (*adapt) return run_adapt_vi(aa);
    if (*rec) return run_reconstruct(ra);
    if (*evaluate) return run_evaluate(ea);
    if (*render) {
      if (lo_opt->count()) rna.lo = lo_val;
      if (hi_opt->count()) rna.hi = hi_val;
      return run_render(rna);
    }
    if (*repro) {
      rpa.cli_path = self_path(argv[0]);
      return run_repro(rpa);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
