#pragma once

#include <string>
#include <string_view>
#include <vector>

// The acceptance suite: one runner per release criterion, executed by the
// `repro` CLI subcommand and by the acceptance test binary.  Every runner
// is deterministic (fixed seeds), so the pass/fail table — which contains
// no timestamps or timings — is byte-identical across runs on a machine.

namespace qsm::accept {

struct CriterionResult {
  std::string id;      // "1".."10" or a "G-..." golden-regression row
  std::string name;
  bool pass = false;
  std::string detail;  // deterministic key numbers / failure reason
  double seconds = 0.0;  // wall time; reported live, kept out of the table
};

struct SuiteResult {
  std::string suite;
  std::vector<CriterionResult> rows;
  bool all_pass() const;
  // Deterministic pass/fail table (no timings, no timestamps).
  std::string table() const;
};

struct SuiteOptions {
  std::string work_dir = "accept-work";  // scratch space, created if absent
  std::string fixture_dir;  // empty: QSM_FIXTURE_DIR env, then build default
  std::string cli_path;     // the qsm binary, needed by criterion 10
  bool progress = true;     // stream per-row results (with timings) to stdout
};

// suite: "smoke" (fast subset + golden regressions) or "full" (all 10
// criteria + golden regressions).
SuiteResult run_suite(std::string_view suite, const SuiteOptions& opts);

// Resolved fixture directory (override -> env -> compiled-in default).
std::string resolve_fixture_dir(const std::string& override_dir);

// Regenerates the golden CSV fixtures into `dir`. Used by the fixture
// tool when the reference scenarios change; outputs are committed.
void write_golden_fixtures(const std::string& dir);

// Thread count from the QSM_THREADS environment variable (>= 1).
int env_threads();

}  // namespace qsm::accept
