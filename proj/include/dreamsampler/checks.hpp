#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace dreamsampler {

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct CheckOptions {
  std::uint64_t seed = 20240501;
  /// CLI executable used by the determinism check; when empty the pipelines
  /// are run in-process instead.
  std::string cli_path;
  /// Scratch space for determinism runs; defaults to a fresh temp directory.
  std::filesystem::path work_dir;
};

struct AcceptanceCheck {
  int id;
  std::string name;
  std::function<CheckResult(const CheckOptions&)> run;
};

/// The acceptance suite in order. Each check computes its reference values with
/// an independent oracle (dense solves, quadrature-free closed forms, finite
/// differences or Monte Carlo) rather than the code under test.
const std::vector<AcceptanceCheck>& acceptance_checks();

/// Runs every check; `line` receives one formatted pass/fail line per check.
std::vector<CheckResult> run_acceptance(const CheckOptions& opts,
                                        const std::function<void(const std::string&)>& line);

std::string format_check(const CheckResult& r);

}  // namespace dreamsampler
