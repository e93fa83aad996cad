#include "dreamsampler/checks.hpp"
#include "dreamsampler/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

namespace ds = dreamsampler;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitFailure = 2;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> replicates;
  bool trace = false;
};

int run_pipeline(const std::string& pipeline, const Options& o) {
  ds::ExperimentConfig cfg;
  try {
    if (!o.config.empty()) {
      cfg = ds::load_config(o.config);
    }
    cfg.pipeline = pipeline;
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (o.replicates) cfg.replicates = *o.replicates;
    if (o.trace) cfg.trace = true;
    ds::validate(cfg);
  } catch (const ds::ValidationError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return kExitValidation;
  }

  ds::RunReport report;
  try {
    report = ds::run(cfg);
    ds::write_outputs(report, cfg);
  } catch (const std::exception& e) {
    std::cerr << pipeline << " failed: " << e.what() << "\n";
    return kExitFailure;
  }
  for (const auto& [k, v] : report.summary) std::cout << k << " = " << v << "\n";
  std::cout << "outputs written to " << cfg.out_dir << "\n";
  if (report.failed()) {
    for (const auto& r : report.replicates) {
      if (!r.error.empty()) std::cerr << "replicate " << r.index << " failed: " << r.error << "\n";
    }
    return kExitFailure;
  }
  return 0;
}

int run_verify(std::uint64_t seed, const std::string& self) {
  ds::CheckOptions opts;
  opts.seed = seed;
  opts.cli_path = self;
  const auto results = ds::run_acceptance(opts, [](const std::string& line) {
    std::cout << line << std::endl;
  });
  int failed = 0;
  for (const auto& r : results) failed += r.passed ? 0 : 1;
  std::cout << (results.size() - failed) << "/" << results.size() << " checks passed\n";
  return failed == 0 ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guided diffusion sampling and distillation on analytic toy priors"};
  app.require_subcommand(1);

  Options opts;
  std::uint64_t verify_seed = ds::CheckOptions{}.seed;
  const auto add_pipeline = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", opts.seed, "master seed (overrides the config)");
    sub->add_option("--out", opts.out, "output directory (overrides the config)");
    sub->add_option("--replicates", opts.replicates, "replicate count (overrides the config)")
        ->check(CLI::PositiveNumber);
    sub->add_flag("--trace", opts.trace, "record per-step traces");
    return sub;
  };
  add_pipeline("sample", "reverse sampling from the prior");
  add_pipeline("edit", "inversion-based editing towards a target class");
  add_pipeline("inpaint", "masked-region synthesis on the 16x16 image prior");
  add_pipeline("vectorize", "blob-scene restoration from a blurred or downsampled image");
  add_pipeline("distill", "random-t vs reverse-plan distillation on a vector prior");
  CLI::App* verify = app.add_subcommand("verify", "run the acceptance suite");
  verify->add_option("--seed", verify_seed, "master seed for the checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  CLI::App* sub = app.get_subcommands().front();
  if (sub == verify) {
    std::error_code ec;
    std::filesystem::path self = std::filesystem::canonical("/proc/self/exe", ec);
    if (ec) self = std::filesystem::absolute(argv[0]);
    return run_verify(verify_seed, self.string());
  }
  return run_pipeline(sub->get_name(), opts);
}
