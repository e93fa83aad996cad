#pragma once

#include "dreamsampler/distill.hpp"
#include "dreamsampler/inverse.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dreamsampler {

/// Config validation failure; the message starts with the offending field path.
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct PriorSpec {
  std::string kind = "default";  // default | ring | custom | image
  int modes = 8;                 // ring
  double radius = 2.0;           // ring
  double sigma = 0.3;            // ring, custom
  std::vector<std::vector<double>> means;  // custom
  std::vector<double> weights;             // custom; empty = equal
};

struct ExperimentConfig {
  std::string pipeline = "sample";  // sample | edit | inpaint | vectorize | distill
  std::uint64_t seed = 0;
  int replicates = 1;
  std::string out_dir = "out";
  bool trace = false;
  int threads = 0;  // 0 = hardware concurrency

  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  PriorSpec prior;

  // sample
  double eta = 1.0;
  int nfe = 200;
  double omega = 1.0;
  int condition = -1;

  // edit (and the source class of image pipelines)
  int source_class = 0;
  int target_class = 1;
  double guidance_c = 0.15;
  std::string renoise = "current";    // current | previous
  std::string eps_seed = "inversion";  // inversion | random

  // inpaint
  InpaintConfig inpaint;

  // vectorize
  std::string op = "blur";  // blur | downsample
  int blur_size = 5;
  double blur_sigma = 1.5;
  int down_factor = 2;
  std::optional<double> lambda_sds;  // defaults follow the operator preset
  std::optional<double> lambda_dc;
  int blobs = 16;
  double blob_init_scale = 2.0;
  int vectorize_iterations = 200;

  // distill
  std::string algorithm = "both";  // sds | dreamsampler | both
  DistillConfig distill;
  std::vector<double> init;  // initial psi; empty = (-0.5, 0, ...)
  double reach_radius = 0.9;
};

/// Parses and validates a config; unknown keys are rejected.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON form; every field is written, so equal configs serialize equally.
nlohmann::json to_json(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);
/// Throws ConfigError on inconsistent values.
void validate(const ExperimentConfig& cfg);

/// (lambda_sds, lambda_dc) preset for a restoration operator.
std::pair<double, double> vectorize_preset(const std::string& op);

struct ReplicateResult {
  int index = 0;
  std::map<std::string, double> metrics;
  std::vector<Vec> trace;
  struct Image {
    std::string name;
    Vec pixels;
    int height = 0;
    int width = 0;
  };
  std::vector<Image> images;  // recorded for replicate 0 only
  std::string error;  // non-empty when the replicate failed
};

struct RunReport {
  std::string pipeline;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<ReplicateResult> replicates;
  std::map<std::string, double> summary;
  double wall_clock_seconds = 0.0;
  bool failed() const;
};

/// Executes the configured pipeline across replicates. Replicates run
/// concurrently on independent random streams; results are kept in replicate order.
RunReport run(const ExperimentConfig& cfg);

/// Writes metrics.csv, summary.csv, report.json, trace.csv (when traced) and PGM images.
void write_outputs(const RunReport& report, const ExperimentConfig& cfg);

/// 10 log10(peak^2 / MSE); identical inputs give `cap`.
double psnr(const Vec& a, const Vec& b, double peak = 1.0, double cap = 99.0);

/// ASCII (P2) PGM of a row-major height x width image mapped linearly from [lo, hi].
void write_pgm(const std::filesystem::path& path, const Vec& image, int height, int width,
               double lo, double hi, const std::string& comment);

/// Class-structured 16x16 image prior: a GMM over the 8x8 latent of a factor-2
/// pooling autoencoder. Classes share the background and differ on a central
/// 4x4 latent block (8x8 pixels).
struct ToyImagePrior {
  GmmPrior prior;
  LinearAutoencoder ae;
  Vec hole_latent;
  Vec hole_pixels;
  int height = 16;
  int width = 16;
};
ToyImagePrior make_toy_image_prior();

/// Component whose mean is nearest to z on the coordinates where mask is 1.
int classify_region(const GmmPrior& prior, const Vec& z, const Vec& mask);

/// The 2-D prior used for distillation experiments: `modes` equal-weight
/// isotropic components on a circle.
GmmPrior ring_prior(int modes, double radius, double sigma);

GmmPrior build_prior(const PriorSpec& spec);

}  // namespace dreamsampler
