#include "dreamsampler/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

namespace dreamsampler {

using nlohmann::json;

namespace {

// Reads one JSON table, remembering which keys were consumed so leftovers can
// be reported as unknown fields.
class TableReader {
 public:
  TableReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "expected a table");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(where(key) + "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(where(key) + "expected an integer");
        if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
            v.get<long long>() < 0)
          throw ConfigError(where(key) + "expected a nonnegative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(where(key) + "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(where(key) + "expected a string");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + e.what());
    }
  }

  void get(const std::string& key, std::optional<double>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    double v = 0.0;
    get(key, v);
    out = v;
  }

  std::optional<TableReader> table(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return TableReader(j_.at(key), path_.empty() ? key : path_ + "." + key);
  }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const {
    std::string p = path_;
    if (!key.empty()) p = p.empty() ? key : p + "." + key;
    return (p.empty() ? std::string("config") : p) + ": ";
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where(k) + "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::vector<double> number_array(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where + "expected an array of numbers");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw ConfigError(where + "expected an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

void check(bool ok, const std::string& field, const std::string& msg) {
  if (!ok) throw ConfigError(field + ": " + msg);
}

std::string rho_mode_name(RhoMode m) { return m == RhoMode::Scaled ? "scaled" : "constant"; }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// --- config -------------------------------------------------------------------

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  TableReader root(j, "");
  root.get("pipeline", c.pipeline);
  root.get("seed", c.seed);
  root.get("replicates", c.replicates);
  root.get("out_dir", c.out_dir);
  root.get("trace", c.trace);
  root.get("threads", c.threads);

  if (auto t = root.table("schedule")) {
    t->get("T", c.T);
    t->get("beta_start", c.beta_start);
    t->get("beta_end", c.beta_end);
    t->finish();
  }
  if (auto t = root.table("prior")) {
    t->get("kind", c.prior.kind);
    t->get("modes", c.prior.modes);
    t->get("radius", c.prior.radius);
    t->get("sigma", c.prior.sigma);
    if (const json* means = t->raw("means")) {
      if (!means->is_array()) throw ConfigError(t->where("means") + "expected an array of arrays");
      c.prior.means.clear();
      for (const auto& row : *means) c.prior.means.push_back(number_array(row, t->where("means")));
    }
    if (const json* w = t->raw("weights")) c.prior.weights = number_array(*w, t->where("weights"));
    t->finish();
  }
  if (auto t = root.table("sampler")) {
    t->get("eta", c.eta);
    t->get("nfe", c.nfe);
    t->get("omega", c.omega);
    t->get("condition", c.condition);
    t->finish();
  }
  if (auto t = root.table("problem")) {
    t->get("source_class", c.source_class);
    t->get("target_class", c.target_class);
    t->get("operator", c.op);
    t->get("blur_size", c.blur_size);
    t->get("blur_sigma", c.blur_sigma);
    t->get("down_factor", c.down_factor);
    t->finish();
  }
  if (auto t = root.table("edit")) {
    t->get("guidance_c", c.guidance_c);
    t->get("renoise", c.renoise);
    t->get("eps_seed", c.eps_seed);
    t->finish();
  }
  if (auto t = root.table("inpaint")) {
    t->get("lambda_cg", c.inpaint.lambda_cg);
    t->get("cg_tol", c.inpaint.cg_tol);
    t->get("cg_max_iter", c.inpaint.cg_max_iter);
    std::string mode = rho_mode_name(c.inpaint.rho_mode);
    t->get("rho_mode", mode);
    if (mode == "scaled") {
      c.inpaint.rho_mode = RhoMode::Scaled;
    } else if (mode == "constant") {
      c.inpaint.rho_mode = RhoMode::Constant;
    } else {
      throw ConfigError(t->where("rho_mode") + "expected \"scaled\" or \"constant\"");
    }
    t->get("rho", c.inpaint.rho);
    t->get("use_gamma", c.inpaint.use_gamma);
    t->get("gamma_mod", c.inpaint.gamma_mod);
    t->get("gamma_fraction", c.inpaint.gamma_fraction);
    t->finish();
  }
  if (auto t = root.table("vectorize")) {
    t->get("lambda_sds", c.lambda_sds);
    t->get("lambda_dc", c.lambda_dc);
    t->get("blobs", c.blobs);
    t->get("init_scale", c.blob_init_scale);
    t->get("iterations", c.vectorize_iterations);
    t->finish();
  }
  if (auto t = root.table("distill")) {
    t->get("algorithm", c.algorithm);
    t->get("iterations", c.distill.iterations);
    std::string opt = c.distill.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
    t->get("optimizer", opt);
    if (opt == "adam") {
      c.distill.optimizer = OptimizerKind::Adam;
    } else if (opt == "sgd") {
      c.distill.optimizer = OptimizerKind::Sgd;
    } else {
      throw ConfigError(t->where("optimizer") + "expected \"adam\" or \"sgd\"");
    }
    t->get("learning_rate", c.distill.learning_rate);
    t->get("beta1", c.distill.beta1);
    t->get("beta2", c.distill.beta2);
    t->get("exact_step", c.distill.exact_step);
    t->get("omega", c.distill.omega);
    t->get("eta", c.distill.eta);
    t->get("reach_radius", c.reach_radius);
    if (const json* init = t->raw("init")) c.init = number_array(*init, t->where("init"));
    t->finish();
  }
  root.finish();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["pipeline"] = c.pipeline;
  j["seed"] = c.seed;
  j["replicates"] = c.replicates;
  j["out_dir"] = c.out_dir;
  j["trace"] = c.trace;
  j["threads"] = c.threads;
  j["schedule"] = {{"T", c.T}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
  j["prior"] = {{"kind", c.prior.kind},   {"modes", c.prior.modes},   {"radius", c.prior.radius},
                {"sigma", c.prior.sigma}, {"means", c.prior.means},   {"weights", c.prior.weights}};
  j["sampler"] = {{"eta", c.eta}, {"nfe", c.nfe}, {"omega", c.omega}, {"condition", c.condition}};
  j["problem"] = {{"source_class", c.source_class}, {"target_class", c.target_class},
                  {"operator", c.op},               {"blur_size", c.blur_size},
                  {"blur_sigma", c.blur_sigma},     {"down_factor", c.down_factor}};
  j["edit"] = {{"guidance_c", c.guidance_c}, {"renoise", c.renoise}, {"eps_seed", c.eps_seed}};
  j["inpaint"] = {{"lambda_cg", c.inpaint.lambda_cg},
                  {"cg_tol", c.inpaint.cg_tol},
                  {"cg_max_iter", c.inpaint.cg_max_iter},
                  {"rho_mode", rho_mode_name(c.inpaint.rho_mode)},
                  {"rho", c.inpaint.rho},
                  {"use_gamma", c.inpaint.use_gamma},
                  {"gamma_mod", c.inpaint.gamma_mod},
                  {"gamma_fraction", c.inpaint.gamma_fraction}};
  const auto preset = vectorize_preset(c.op == "downsample" ? "downsample" : "blur");
  j["vectorize"] = {{"lambda_sds", c.lambda_sds.value_or(preset.first)},
                    {"lambda_dc", c.lambda_dc.value_or(preset.second)},
                    {"blobs", c.blobs},
                    {"init_scale", c.blob_init_scale},
                    {"iterations", c.vectorize_iterations}};
  j["distill"] = {{"algorithm", c.algorithm},
                  {"iterations", c.distill.iterations},
                  {"optimizer", c.distill.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
                  {"learning_rate", c.distill.learning_rate},
                  {"beta1", c.distill.beta1},
                  {"beta2", c.distill.beta2},
                  {"exact_step", c.distill.exact_step},
                  {"omega", c.distill.omega},
                  {"eta", c.distill.eta},
                  {"reach_radius", c.reach_radius},
                  {"init", c.init}};
  return j;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  // Output location and parallelism do not affect results.
  j.erase("out_dir");
  j.erase("threads");
  return fnv1a64(j.dump());
}

std::pair<double, double> vectorize_preset(const std::string& op) {
  if (op == "blur") return {2.4, 3.0};
  if (op == "downsample") return {1.0, 4.0};
  throw ConfigError("problem.operator: expected \"blur\" or \"downsample\"");
}

GmmPrior ring_prior(int modes, double radius, double sigma) {
  require(modes >= 1, "ring_prior: need at least one mode");
  std::vector<Vec> means;
  for (int k = 0; k < modes; ++k) {
    const double a = 2.0 * std::numbers::pi * k / modes;
    Vec m(2);
    m << radius * std::cos(a), radius * std::sin(a);
    means.push_back(m);
  }
  return GmmPrior::isotropic(means, sigma);
}

ToyImagePrior make_toy_image_prior() {
  constexpr int L = 8;
  Vec background(L * L), hole = Vec::Zero(L * L);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j) {
      background[i * L + j] = 0.6 + 0.4 * std::sin(0.7 * i) * std::cos(0.5 * j);
      if (i >= 2 && i < 6 && j >= 2 && j < 6) hole[i * L + j] = 1.0;
    }
  // Class patterns inside the block: dark, bright, checkerboard.
  std::vector<Vec> means;
  for (int k = 0; k < 3; ++k) {
    Vec mu = background;
    for (int i = 2; i < 6; ++i)
      for (int j = 2; j < 6; ++j) {
        const bool odd = (i + j) % 2 == 1;
        mu[i * L + j] = k == 0 ? 0.2 : k == 1 ? 1.6 : (odd ? 0.2 : 1.6);
      }
    means.push_back(mu);
  }
  ToyImagePrior out{GmmPrior::isotropic(means, 0.1), make_pooling_autoencoder(16, 16, 2), hole,
                    Vec(), 16, 16};
  out.hole_pixels = (out.ae.decode(hole).array() > 0.0).cast<double>();
  return out;
}

GmmPrior build_prior(const PriorSpec& p) {
  if (p.kind == "default") return GmmPrior::default_toy();
  if (p.kind == "ring") return ring_prior(p.modes, p.radius, p.sigma);
  if (p.kind == "image") return make_toy_image_prior().prior;
  if (p.kind == "custom") {
    std::vector<Vec> means;
    std::vector<Mat> covs;
    for (const auto& m : p.means) {
      means.push_back(Eigen::Map<const Vec>(m.data(), static_cast<Eigen::Index>(m.size())));
      covs.push_back(p.sigma * p.sigma * Mat::Identity(means.back().size(), means.back().size()));
    }
    std::vector<double> w = p.weights;
    if (w.empty()) w.assign(means.size(), 1.0 / static_cast<double>(means.size()));
    return GmmPrior(w, means, covs);
  }
  throw ConfigError("prior.kind: expected default, ring, custom or image");
}

void validate(const ExperimentConfig& c) {
  static const std::set<std::string> pipelines{"sample", "edit", "inpaint", "vectorize", "distill"};
  check(pipelines.count(c.pipeline) == 1, "pipeline",
        "expected one of sample, edit, inpaint, vectorize, distill");
  check(c.replicates >= 1, "replicates", "must be at least 1");
  check(c.threads >= 0, "threads", "must be nonnegative");
  check(!c.out_dir.empty(), "out_dir", "must not be empty");
  check(c.T >= 1, "schedule.T", "must be at least 1");
  check(c.beta_start > 0.0 && c.beta_start < 1.0, "schedule.beta_start", "must lie in (0, 1)");
  check(c.beta_end > 0.0 && c.beta_end < 1.0, "schedule.beta_end", "must lie in (0, 1)");
  check(c.beta_start <= c.beta_end, "schedule.beta_end", "must be >= beta_start");
  check(c.T > 1 || c.beta_start == c.beta_end, "schedule.beta_end", "must equal beta_start when T = 1");

  const std::string& k = c.prior.kind;
  check(k == "default" || k == "ring" || k == "custom" || k == "image", "prior.kind",
        "expected default, ring, custom or image");
  check(c.prior.sigma > 0.0, "prior.sigma", "must be positive");
  if (k == "ring") {
    check(c.prior.modes >= 1, "prior.modes", "must be at least 1");
    check(c.prior.radius >= 0.0, "prior.radius", "must be nonnegative");
  }
  if (k == "custom") {
    check(!c.prior.means.empty(), "prior.means", "must list at least one mean");
    for (const auto& m : c.prior.means)
      check(!m.empty() && m.size() == c.prior.means.front().size(), "prior.means",
            "all means must share one nonzero dimension");
    if (!c.prior.weights.empty()) {
      check(c.prior.weights.size() == c.prior.means.size(), "prior.weights",
            "must have one entry per mean");
      double sum = 0.0;
      for (double w : c.prior.weights) {
        check(w > 0.0, "prior.weights", "must be positive");
        sum += w;
      }
      check(std::abs(sum - 1.0) < 1e-12, "prior.weights", "must sum to 1");
    }
  }
  const bool image = c.pipeline == "inpaint" || c.pipeline == "vectorize";
  if (image) check(k == "image" || k == "default", "prior.kind", "image pipelines use the image prior");
  if (c.pipeline == "distill") check(k != "image", "prior.kind", "distill runs on a vector prior");

  check(c.eta >= 0.0 && c.eta <= 1.0, "sampler.eta", "must lie in [0, 1]");
  check(c.nfe >= 1 && c.nfe <= c.T, "sampler.nfe", "must lie in [1, schedule.T]");
  check(std::isfinite(c.omega), "sampler.omega", "must be finite");

  const int comps = image ? 3
                    : k == "default" ? 2
                    : k == "ring"    ? c.prior.modes
                    : k == "image"   ? 3
                                     : static_cast<int>(c.prior.means.size());
  check(c.condition >= -1 && c.condition < comps, "sampler.condition",
        "must be -1 (null) or a component index");
  if (c.pipeline == "edit" || image) {
    check(c.source_class >= 0 && c.source_class < comps, "problem.source_class",
          "must be a component index");
    check(c.target_class >= 0 && c.target_class < comps, "problem.target_class",
          "must be a component index");
  }
  check(c.op == "blur" || c.op == "downsample", "problem.operator", "expected blur or downsample");
  check(c.blur_size >= 1 && c.blur_size % 2 == 1, "problem.blur_size", "must be odd and positive");
  check(c.blur_sigma > 0.0, "problem.blur_sigma", "must be positive");
  check(c.down_factor >= 1 && 16 % c.down_factor == 0, "problem.down_factor", "must divide 16");

  check(c.guidance_c >= 0.0 && c.guidance_c <= 1.0, "edit.guidance_c", "must lie in [0, 1]");
  check(c.renoise == "current" || c.renoise == "previous", "edit.renoise",
        "expected current or previous");
  check(c.eps_seed == "inversion" || c.eps_seed == "random", "edit.eps_seed",
        "expected inversion or random");

  check(c.inpaint.lambda_cg > 0.0, "inpaint.lambda_cg", "must be positive");
  check(c.inpaint.cg_tol > 0.0, "inpaint.cg_tol", "must be positive");
  check(c.inpaint.cg_max_iter >= 1, "inpaint.cg_max_iter", "must be at least 1");
  check(c.inpaint.rho >= 0.0, "inpaint.rho", "must be nonnegative");
  check(c.inpaint.gamma_mod >= 1, "inpaint.gamma_mod", "must be at least 1");
  check(c.inpaint.gamma_fraction >= 0.0 && c.inpaint.gamma_fraction <= 1.0,
        "inpaint.gamma_fraction", "must lie in [0, 1]");

  if (c.lambda_sds) check(*c.lambda_sds >= 0.0, "vectorize.lambda_sds", "must be nonnegative");
  if (c.lambda_dc) check(*c.lambda_dc >= 0.0, "vectorize.lambda_dc", "must be nonnegative");
  check(c.blobs >= 1, "vectorize.blobs", "must be at least 1");
  check(c.blob_init_scale > 0.0, "vectorize.init_scale", "must be positive");
  check(c.vectorize_iterations >= 0 && c.vectorize_iterations <= c.T, "vectorize.iterations",
        "must lie in [0, schedule.T]");

  check(c.algorithm == "sds" || c.algorithm == "dreamsampler" || c.algorithm == "both",
        "distill.algorithm", "expected sds, dreamsampler or both");
  check(c.distill.iterations >= 1, "distill.iterations", "must be at least 1");
  if (c.algorithm != "sds")
    check(c.distill.iterations <= c.T, "distill.iterations", "must not exceed schedule.T");
  check(c.distill.learning_rate > 0.0, "distill.learning_rate", "must be positive");
  check(c.distill.beta1 >= 0.0 && c.distill.beta1 < 1.0, "distill.beta1", "must lie in [0, 1)");
  check(c.distill.beta2 >= 0.0 && c.distill.beta2 < 1.0, "distill.beta2", "must lie in [0, 1)");
  check(c.distill.eta >= 0.0 && c.distill.eta <= 1.0, "distill.eta", "must lie in [0, 1]");
  check(c.reach_radius > 0.0, "distill.reach_radius", "must be positive");
  if (c.pipeline == "distill" && !c.init.empty()) {
    const std::size_t d = k == "custom" ? c.prior.means.front().size() : 2;
    check(c.init.size() == d, "distill.init", "must match the prior dimension");
  }
}

// --- metrics and export -----------------------------------------------------------

double psnr(const Vec& a, const Vec& b, double peak, double cap) {
  require(a.size() == b.size(), "psnr: length mismatch");
  require(a.size() > 0, "psnr: empty signals");
  require(peak > 0.0, "psnr: peak must be positive");
  const double mse = (a - b).squaredNorm() / static_cast<double>(a.size());
  if (mse == 0.0) return cap;
  return std::min(cap, 10.0 * std::log10(peak * peak / mse));
}

void write_pgm(const std::filesystem::path& path, const Vec& image, int height, int width,
               double lo, double hi, const std::string& comment) {
  require(image.size() == static_cast<Eigen::Index>(height) * width, "write_pgm: size mismatch");
  require(hi > lo, "write_pgm: empty intensity range");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path.string());
  out << "P2\n# " << comment << "\n" << width << " " << height << "\n255\n";
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const double v = (image[i * width + j] - lo) / (hi - lo);
      const int g = static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
      out << g << (j + 1 < width ? " " : "\n");
    }
  }
}

int classify_region(const GmmPrior& prior, const Vec& z, const Vec& mask) {
  require(z.size() == prior.dim() && mask.size() == prior.dim(), "classify_region: dimension mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < prior.components(); ++k) {
    const double d = mask.cwiseProduct(z - prior.mean(k)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

// --- pipelines ----------------------------------------------------------------

namespace {

Vec sample_component(const GmmPrior& prior, int k, Rng& rng) {
  const Eigen::LLT<Mat> llt(prior.covariance(k));
  return prior.mean(k) + llt.matrixL() * rng.normal_vec(prior.dim());
}

struct Context {
  const ExperimentConfig& cfg;
  NoiseSchedule schedule;
  GmmPrior prior;
  std::optional<ToyImagePrior> image;
};

void run_sample(const Context& ctx, Rng& rng, ReplicateResult& r) {
  const ExperimentConfig& c = ctx.cfg;
  GmmEpsilonModel m(ctx.prior, ctx.schedule);
  SamplerConfig sc;
  sc.eta = c.eta;
  sc.omega = c.omega;
  sc.nfe = c.nfe;
  const TimestepPlan plan = plan_timesteps(ctx.schedule, c.nfe, Direction::Reverse);
  const LatentState start{rng.normal_vec(ctx.prior.dim()), plan.steps.front(), std::nullopt};
  const Condition cond = c.condition < 0 ? Condition::null() : Condition::of_class(c.condition);
  const LatentState out = sample_reverse(start, m, cond, plan, ctx.schedule, sc, rng,
                                         c.trace ? &r.trace : nullptr);
  r.metrics["mode"] = ctx.prior.nearest_mean(out.z);
  if (ctx.prior.dim() <= 8) {
    for (Eigen::Index i = 0; i < out.z.size(); ++i) r.metrics["z" + std::to_string(i)] = out.z[i];
  }
  r.metrics["norm"] = out.z.norm();
}

void run_edit(const Context& ctx, Rng& rng, ReplicateResult& r) {
  const ExperimentConfig& c = ctx.cfg;
  GmmEpsilonModel m(ctx.prior, ctx.schedule);
  Rng source_rng = Rng::stream(c.seed, "edit-source", static_cast<std::uint64_t>(r.index));
  const Vec z0 = sample_component(ctx.prior, c.source_class, source_rng);
  EditConfig ec;
  ec.nfe = c.nfe;
  ec.guidance.c = c.guidance_c;
  ec.renoise = c.renoise == "previous" ? RenoiseSource::Previous : RenoiseSource::Current;
  ec.eps_seed = c.eps_seed == "random" ? EpsSeed::Random : EpsSeed::Inversion;
  const Vec edited = edit(z0, m, Condition::of_class(c.target_class), ctx.schedule, ec, rng,
                          c.trace ? &r.trace : nullptr);
  EditConfig recon = ec;
  recon.guidance.c = 0.0;
  const Vec back = edit(z0, m, Condition::of_class(c.target_class), ctx.schedule, recon, rng);
  r.metrics["flipped"] = ctx.prior.nearest_mean(edited) == c.target_class ? 1.0 : 0.0;
  r.metrics["edit_distance"] = (edited - z0).norm();
  r.metrics["roundtrip_rel_error"] = (back - z0).norm() / z0.norm();
}

void run_inpaint(const Context& ctx, Rng& rng, ReplicateResult& r) {
  const ExperimentConfig& c = ctx.cfg;
  const ToyImagePrior& img = *ctx.image;
  GmmEpsilonModel m(img.prior, ctx.schedule);
  Rng source_rng = Rng::stream(c.seed, "inpaint-source", static_cast<std::uint64_t>(r.index));
  const Vec x = img.ae.decode(sample_component(img.prior, c.source_class, source_rng));
  const Vec observed = Vec::Ones(x.size()) - img.hole_pixels;
  const MaskOperator a(observed);
  InpaintProblem p;
  p.y = a.apply(x);
  p.a = &a;
  p.conditions.regions.push_back({img.hole_latent, Condition::of_class(c.target_class)});
  InpaintConfig ic = c.inpaint;
  ic.nfe = c.nfe;
  const Vec out = inpaint(p, m, img.ae, ctx.schedule, ic, rng, c.trace ? &r.trace : nullptr);

  std::vector<double> obs_out, obs_ref;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (observed[i] != 0.0) {
      obs_out.push_back(out[i]);
      obs_ref.push_back(x[i]);
    }
  }
  const auto view = [](const std::vector<double>& v) {
    return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  };
  r.metrics["psnr_observed"] = psnr(view(obs_out), view(obs_ref));
  r.metrics["psnr_full"] = psnr(out, x);
  r.metrics["residual"] = (a.apply(out) - p.y).norm();
  const int cls = classify_region(img.prior, img.ae.encode(out), img.hole_latent);
  r.metrics["region_class"] = cls;
  r.metrics["basin_hit"] = cls == c.target_class ? 1.0 : 0.0;
  if (r.index == 0) {
    r.images.push_back({"truth", x, img.height, img.width});
    r.images.push_back({"measurement", p.y, img.height, img.width});
    r.images.push_back({"output", out, img.height, img.width});
  }
}

std::unique_ptr<LinearOperator> make_restoration_operator(const ExperimentConfig& c) {
  if (c.op == "blur") return op_blur(16, 16, gaussian_kernel(c.blur_size, c.blur_sigma));
  return op_downsample(16, 16, c.down_factor);
}

void run_vectorize(const Context& ctx, Rng& rng, ReplicateResult& r) {
  const ExperimentConfig& c = ctx.cfg;
  const ToyImagePrior& img = *ctx.image;
  GmmEpsilonModel m(img.prior, ctx.schedule);
  Rng source_rng = Rng::stream(c.seed, "vectorize-source", static_cast<std::uint64_t>(r.index));
  const Vec x = img.ae.decode(sample_component(img.prior, c.source_class, source_rng));
  const auto a = make_restoration_operator(c);
  const Vec y = a->apply(x);
  const BlobScene scene0 = random_blob_scene(img.height, img.width, c.blobs, c.blob_init_scale, 0.0, rng);
  VectorizeConfig vc;
  const auto preset = vectorize_preset(c.op);
  vc.lambda_sds = c.lambda_sds.value_or(preset.first);
  vc.lambda_dc = c.lambda_dc.value_or(preset.second);
  vc.iterations = c.vectorize_iterations;
  vc.cond = Condition::of_class(c.source_class);
  vc.omega = c.omega;
  const VectorizeResult res = vectorize_restore(y, *a, scene0, m, img.ae, ctx.schedule, vc, rng,
                                                c.trace ? &r.trace : nullptr);
  const Vec out = render_blobs(res.scene);
  r.metrics["initial_residual"] = res.initial_residual;
  r.metrics["final_residual"] = res.final_residual;
  r.metrics["psnr"] = psnr(out, x);
  r.metrics["psnr_measurement_backprojection"] = psnr(a->adjoint(y), x);
  if (r.index == 0) {
    r.images.push_back({"truth", x, img.height, img.width});
    const int mh = c.op == "blur" ? img.height : img.height / c.down_factor;
    const int mw = c.op == "blur" ? img.width : img.width / c.down_factor;
    r.images.push_back({"measurement", y, mh, mw});
    r.images.push_back({"output", out, img.height, img.width});
  }
}

void run_distill(const Context& ctx, Rng& rng, ReplicateResult& r) {
  const ExperimentConfig& c = ctx.cfg;
  GmmEpsilonModel m(ctx.prior, ctx.schedule);
  const int d = ctx.prior.dim();
  IdentityGenerator g(d);
  const LatentTarget target{&g, nullptr};
  Vec psi0 = Vec::Zero(d);
  if (!c.init.empty()) {
    psi0 = Eigen::Map<const Vec>(c.init.data(), d);
  } else {
    psi0[0] = -0.5;
  }
  const Condition cond = c.condition < 0 ? Condition::null() : Condition::of_class(c.condition);
  DistillConfig dc = c.distill;
  const auto record = [&](const std::string& name, const DistillResult& res) {
    const int k = ctx.prior.nearest_mean(res.psi);
    const double dist = (res.psi - ctx.prior.mean(k)).norm();
    r.metrics[name + "_mode"] = k;
    r.metrics[name + "_distance"] = dist;
    r.metrics[name + "_reached"] = dist < c.reach_radius ? 1.0 : 0.0;
  };
  if (c.algorithm != "dreamsampler") {
    Rng sds_rng = Rng::stream(c.seed, "distill-sds", static_cast<std::uint64_t>(r.index));
    const DistillResult res = score_distillation_loop(target, psi0, m, cond, ctx.schedule, dc, sds_rng,
                                                      c.trace && c.algorithm == "sds");
    record("sds", res);
    if (c.trace && c.algorithm == "sds") r.trace = res.z_trace;
  }
  if (c.algorithm != "sds") {
    const DistillResult res = dreamsampler_distill_loop(target, psi0, m, cond, {}, ctx.schedule, dc, rng, c.trace);
    record("dreamsampler", res);
    if (c.trace) r.trace = res.z_trace;
  }
}

void summarize(const Context& ctx, RunReport& rep) {
  const ExperimentConfig& c = ctx.cfg;
  std::vector<const ReplicateResult*> ok;
  for (const auto& r : rep.replicates)
    if (r.error.empty()) ok.push_back(&r);
  auto& s = rep.summary;
  s["replicates_ok"] = static_cast<double>(ok.size());
  s["replicates_failed"] = static_cast<double>(rep.replicates.size() - ok.size());
  if (ok.empty()) return;
  const double n = static_cast<double>(ok.size());
  const auto mean_of = [&](const std::string& key) {
    double acc = 0.0;
    for (const auto* r : ok) acc += r->metrics.at(key);
    return acc / n;
  };

  if (c.pipeline == "sample") {
    const int K = ctx.prior.components();
    bool all_within = true;
    for (int k = 0; k < K; ++k) {
      double cnt = 0.0;
      for (const auto* r : ok) cnt += r->metrics.at("mode") == k ? 1.0 : 0.0;
      const double w = cnt / n;
      const double w0 = ctx.prior.weight(k);
      const double se = std::sqrt(w0 * (1.0 - w0) / n);
      const std::string p = "mode" + std::to_string(k) + "_";
      s[p + "weight"] = w;
      s[p + "weight_se"] = se;
      const bool within = se > 0.0 ? std::abs(w - w0) <= 3.0 * se : w == w0;
      s[p + "weight_within_3se"] = within ? 1.0 : 0.0;
      all_within = all_within && within;
    }
    s["weights_within_3se"] = all_within ? 1.0 : 0.0;
  } else if (c.pipeline == "edit") {
    s["basin_flip_rate"] = mean_of("flipped");
    s["mean_edit_distance"] = mean_of("edit_distance");
    s["mean_roundtrip_rel_error"] = mean_of("roundtrip_rel_error");
  } else if (c.pipeline == "inpaint") {
    s["basin_rate"] = mean_of("basin_hit");
    s["mean_psnr_observed"] = mean_of("psnr_observed");
    s["mean_psnr_full"] = mean_of("psnr_full");
    s["mean_residual"] = mean_of("residual");
  } else if (c.pipeline == "vectorize") {
    s["mean_initial_residual"] = mean_of("initial_residual");
    s["mean_final_residual"] = mean_of("final_residual");
    s["mean_psnr"] = mean_of("psnr");
  } else if (c.pipeline == "distill") {
    for (const std::string name : {"sds", "dreamsampler"}) {
      if (!ok.front()->metrics.count(name + "_mode")) continue;
      std::set<int> modes;
      double reached = 0.0;
      for (const auto* r : ok) {
        if (r->metrics.at(name + "_reached") != 0.0) {
          modes.insert(static_cast<int>(r->metrics.at(name + "_mode")));
          reached += 1.0;
        }
      }
      s[name + "_modes_reached"] = static_cast<double>(modes.size());
      s[name + "_reach_rate"] = reached / n;
    }
  }
}

}  // namespace

bool RunReport::failed() const {
  return std::any_of(replicates.begin(), replicates.end(),
                     [](const ReplicateResult& r) { return !r.error.empty(); });
}

RunReport run(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto started = std::chrono::steady_clock::now();
  const bool image = cfg.pipeline == "inpaint" || cfg.pipeline == "vectorize";
  std::optional<ToyImagePrior> img;
  if (image || cfg.prior.kind == "image") img = make_toy_image_prior();
  Context ctx{cfg, make_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
              img ? img->prior : build_prior(cfg.prior), img};

  RunReport rep;
  rep.pipeline = cfg.pipeline;
  rep.seed = cfg.seed;
  rep.config_hash = config_hash(cfg);
  rep.replicates.resize(static_cast<std::size_t>(cfg.replicates));

  const auto body = [&](int i) {
    ReplicateResult& r = rep.replicates[static_cast<std::size_t>(i)];
    r.index = i;
    Rng rng = Rng::stream(cfg.seed, cfg.pipeline, static_cast<std::uint64_t>(i));
    try {
      if (cfg.pipeline == "sample") run_sample(ctx, rng, r);
      else if (cfg.pipeline == "edit") run_edit(ctx, rng, r);
      else if (cfg.pipeline == "inpaint") run_inpaint(ctx, rng, r);
      else if (cfg.pipeline == "vectorize") run_vectorize(ctx, rng, r);
      else run_distill(ctx, rng, r);
      for (const auto& [k, v] : r.metrics) {
        if (!std::isfinite(v)) throw ConvergenceError("metric " + k + " is not finite");
      }
    } catch (const std::exception& e) {
      r.metrics.clear();
      r.trace.clear();
      r.images.clear();
      r.error = e.what();
    }
  };

  int workers = cfg.threads > 0 ? cfg.threads : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::clamp(workers, 1, cfg.replicates);
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < cfg.replicates; i = next++) body(i);
    });
  }
  for (auto& t : pool) t.join();

  summarize(ctx, rep);
  rep.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rep;
}

void write_outputs(const RunReport& rep, const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  const std::string stamp = "pipeline=" + rep.pipeline + " seed=" + std::to_string(rep.seed) +
                            " config_hash=" + hex64(rep.config_hash);

  std::set<std::string> keys;
  for (const auto& r : rep.replicates)
    for (const auto& [k, v] : r.metrics) keys.insert(k);
  {
    std::ofstream out(dir / "metrics.csv");
    out << "# " << stamp << "\nreplicate";
    for (const auto& k : keys) out << "," << k;
    out << ",error\n";
    for (const auto& r : rep.replicates) {
      out << r.index;
      for (const auto& k : keys) {
        const auto it = r.metrics.find(k);
        out << "," << (it == r.metrics.end() ? std::string() : fmt(it->second));
      }
      std::string err = r.error;
      std::replace(err.begin(), err.end(), '"', '\'');
      out << "," << (err.empty() ? "" : "\"" + err + "\"") << "\n";
    }
  }
  {
    std::ofstream out(dir / "summary.csv");
    out << "# " << stamp << "\nmetric,value\n";
    for (const auto& [k, v] : rep.summary) out << k << "," << fmt(v) << "\n";
  }
  if (cfg.trace) {
    std::ofstream out(dir / "trace.csv");
    out << "# " << stamp << "\nreplicate,step,values\n";
    for (const auto& r : rep.replicates) {
      for (std::size_t i = 0; i < r.trace.size(); ++i) {
        out << r.index << "," << i << ",";
        for (Eigen::Index j = 0; j < r.trace[i].size(); ++j)
          out << (j ? " " : "") << fmt(r.trace[i][j]);
        out << "\n";
      }
    }
  }
  for (const auto& r : rep.replicates) {
    for (const auto& im : r.images) {
      write_pgm(dir / (im.name + ".pgm"), im.pixels, im.height, im.width, 0.0, 1.0, stamp);
    }
  }
  json j;
  j["pipeline"] = rep.pipeline;
  j["seed"] = rep.seed;
  j["config_hash"] = hex64(rep.config_hash);
  j["config"] = to_json(cfg);
  j["summary"] = rep.summary;
  j["wall_clock_seconds"] = rep.wall_clock_seconds;
  j["failed"] = rep.failed();
  json reps = json::array();
  for (const auto& r : rep.replicates) {
    json e;
    e["index"] = r.index;
    e["metrics"] = r.metrics;
    if (!r.error.empty()) e["error"] = r.error;
    if (cfg.trace) e["trace_length"] = r.trace.size();
    reps.push_back(e);
  }
  j["replicates"] = reps;
  std::ofstream(dir / "report.json") << j.dump(2) << "\n";
}

}  // namespace dreamsampler
