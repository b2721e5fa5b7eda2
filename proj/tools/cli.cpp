#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "gridfill/hash.hpp"
#include "gridfill/parallel.hpp"
#include "gridfill/remote.hpp"
#include "gridfill/train.hpp"

namespace gridfill::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct BackendOptions {
  std::string kind = "consensus";
  std::string endpoint;
  double mu = 0.5;
  double sigma = 0.5;
  double strength = 1.0;
  int timeout_ms = 30000;
  int window = 8;
};

void add_backend_options(CLI::App* sub, BackendOptions& b) {
  sub->add_option("--backend", b.kind, "Denoiser: consensus, gaussian or remote")
      ->check(CLI::IsMember({"consensus", "gaussian", "remote"}));
  sub->add_option("--endpoint", b.endpoint, "Remote model server, unix:/path or tcp:host:port");
  sub->add_option("--prior-mu", b.mu, "Prior mean of the local backends");
  sub->add_option("--prior-sigma", b.sigma, "Prior standard deviation of the local backends")
      ->check(CLI::PositiveNumber);
  sub->add_option("--consensus-strength", b.strength, "Pull toward the cross-view mean, in (0, 1]");
  sub->add_option("--timeout-ms", b.timeout_ms, "Remote read timeout")->check(CLI::PositiveNumber);
  sub->add_option("--window", b.window, "Remote requests in flight")->check(CLI::PositiveNumber);
}

struct Backend {
  std::shared_ptr<const DenoiserBackend<float>> denoiser;
  std::shared_ptr<const Codec> codec;
};

Backend make_backend(const BackendOptions& b, const NoiseSchedule& sched) {
  if (b.kind == "remote") {
    if (b.endpoint.empty()) throw ConfigError("--backend remote needs --endpoint");
    RemoteClient::Options opt;
    opt.timeout = std::chrono::milliseconds(b.timeout_ms);
    opt.window = b.window;
    auto remote = std::make_shared<RemoteBackend>(b.endpoint, opt);
    return {remote, remote};
  }
  if (!b.endpoint.empty()) throw ConfigError("--endpoint only applies to --backend remote");
  auto codec = std::make_shared<IdentityCodec>();
  if (b.kind == "gaussian") return {std::make_shared<AnalyticGaussianBackend<float>>(b.mu, b.sigma, sched), codec};
  return {std::make_shared<ConsensusBackend<float>>(b.strength, b.mu, b.sigma, sched), codec};
}

json descriptor_json(const BackendDescriptor& d) {
  return {{"name", d.name},
          {"latent_shape", {d.latent_shape.height, d.latent_shape.width, d.latent_shape.channels}},
          {"supports_text", d.supports_text},
          {"grid_aware", d.grid_aware},
          {"applies_guidance", d.applies_guidance},
          {"deterministic", d.deterministic}};
}

std::string config_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw ConfigError("config: value " + v.dump() + " is not a string, number or boolean");
}

/// Applies a flat JSON object of flag names to the options not given on the
/// command line.
void apply_config(CLI::App* sub, const json& cfg) {
  if (!cfg.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& [key, value] : cfg.items()) {
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (!opt || key == "help") throw ConfigError("config: unknown key '" + key + "' for " + sub->get_name());
    if (opt->count() > 0) continue;
    if (value.is_array()) {
      for (const json& v : value) opt->add_result(config_string(v));
    } else {
      opt->add_result(config_string(value));
    }
    opt->run_callback();
  }
}

json typed_value(const std::string& s) {
  json v = json::parse(s, nullptr, false);
  if (!v.is_discarded() && (v.is_number() || v.is_boolean())) return v;
  return s;
}

/// Every option of the subcommand with its effective value.
json effective_config(const CLI::App* sub) {
  json cfg = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help") continue;
    if (opt->get_type_size() == 0) {
      cfg[name] = opt->count() > 0;
      continue;
    }
    std::vector<std::string> vals = opt->count() > 0 ? opt->results() : std::vector<std::string>{};
    if (vals.empty() && !opt->get_default_str().empty()) vals = {opt->get_default_str()};
    if (vals.empty()) {
      cfg[name] = nullptr;
    } else if (opt->get_expected_max() > 1) {
      json arr = json::array();
      for (const auto& v : vals) arr.push_back(typed_value(v));
      cfg[name] = arr;
    } else {
      cfg[name] = typed_value(vals.back());
    }
  }
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + path.string());
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

/// Hashes every file under the run directory into MANIFEST.json.
void write_manifest(const fs::path& dir, const std::string& command, std::uint64_t seed, const json& config,
                    const json& extra) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "MANIFEST.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  json artifacts = json::array();
  for (const fs::path& f : files)
    artifacts.push_back({{"path", fs::relative(f, dir).generic_string()},
                         {"bytes", fs::file_size(f)},
                         {"sha256", sha256_file(f.string())}});
  json m = {{"tool", "gridfill"},     {"command", command},     {"created", utc_now()},
            {"seed", seed},           {"config", config},       {"artifacts", artifacts}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_json(dir / "MANIFEST.json", m);
}

template <typename E>
json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw E("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw E(path + ": parse error at byte " + std::to_string(e.byte));
  }
}

Eigen::Vector3d vec3(const std::vector<double>& v, const std::string& what) {
  if (v.size() != 3) throw ConfigError(what + " needs three values");
  return {v[0], v[1], v[2]};
}

Background parse_background(const std::string& s) {
  if (s == "white") return Background::white;
  if (s == "black") return Background::black;
  throw ConfigError("unknown background '" + s + "'");
}

Image zero_unknown(Image img, const Mask<float>& mask) {
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      if (mask(y, x) == 0.0f)
        for (int c = 0; c < img.channels(); ++c) img(y, x, c) = 0.0f;
  return img;
}

// make-synthetic ------------------------------------------------------------

struct SyntheticArgs {
  std::string out;
  SyntheticSpec spec;
  std::string background = "white";
  std::vector<double> occluder_min{-0.3, -1.0, -0.75};
  std::vector<double> occluder_max{0.3, -0.35, -0.25};
};

void add_synthetic(CLI::App& app, SyntheticArgs& a) {
  CLI::App* sub = app.add_subcommand("make-synthetic", "Render the synthetic room dataset");
  sub->add_option("--out", a.out, "Run directory")->required();
  sub->add_option("--views", a.spec.views, "Number of views")->check(CLI::PositiveNumber);
  sub->add_option("--width", a.spec.width, "Image width")->check(CLI::PositiveNumber);
  sub->add_option("--height", a.spec.height, "Image height")->check(CLI::PositiveNumber);
  sub->add_option("--fov", a.spec.fov_deg, "Horizontal field of view in degrees");
  sub->add_option("--boxes", a.spec.boxes, "Colored boxes in the room")->check(CLI::NonNegativeNumber);
  sub->add_option("--occluder-min", a.occluder_min, "Occluder box minimum corner")->expected(3);
  sub->add_option("--occluder-max", a.occluder_max, "Occluder box maximum corner")->expected(3);
  sub->add_option("--azimuth", a.spec.azimuth_deg, "Camera arc half-width in degrees");
  sub->add_option("--radius", a.spec.radius, "Camera distance from the occluder centre");
  sub->add_option("--field-res", a.spec.field_resolution, "Ground-truth field resolution")
      ->check(CLI::PositiveNumber);
  sub->add_option("--render-samples", a.spec.render_samples, "Samples per ray for the renders")
      ->check(CLI::PositiveNumber);
  sub->add_option("--background", a.background, "white or black")->check(CLI::IsMember({"white", "black"}));
  sub->add_option("--seed", a.spec.seed, "Root seed");
}

void cmd_synthetic(SyntheticArgs& a, const json& config, std::ostream& out) {
  a.spec.background = parse_background(a.background);
  a.spec.occluder = Box3<double>(vec3(a.occluder_min, "--occluder-min"), vec3(a.occluder_max, "--occluder-max"));
  const SyntheticScene scene = make_synthetic_scene(a.spec);
  fs::create_directories(a.out);
  save_synthetic_scene(scene, a.out);
  write_manifest(a.out, "make-synthetic", a.spec.seed, config, json::object());
  out << "wrote " << scene.dataset.size() << " views to " << a.out << "\n";
}

// inpaint-joint -------------------------------------------------------------

struct InpaintArgs {
  std::string data;
  std::string out;
  BackendOptions backend;
  int first = 0;
  int n = 0;
  int m = 8;
  int steps = 20;
  int t_start = 1000;
  double s_image = 1.5;
  double s_text = 0.0;
  std::optional<int> reference;
  int latent_factor = 2;
  bool independent = false;
  std::string text;
  std::uint64_t seed = 0;
};

void add_inpaint(CLI::App& app, InpaintArgs& a) {
  CLI::App* sub = app.add_subcommand("inpaint-joint", "Inpaint dataset views jointly through 2x2 grids");
  sub->add_option("--data", a.data, "Dataset directory")->required();
  sub->add_option("--out", a.out, "Run directory")->required();
  add_backend_options(sub, a.backend);
  sub->add_option("--first", a.first, "First view to inpaint")->check(CLI::NonNegativeNumber);
  sub->add_option("--n", a.n, "Views to inpaint, 0 = all")->check(CLI::NonNegativeNumber);
  sub->add_option("--m", a.m, "Grid permutations per step")->check(CLI::PositiveNumber);
  sub->add_option("--steps", a.steps, "DDIM steps")->check(CLI::PositiveNumber);
  sub->add_option("--t-start", a.t_start, "Starting diffusion step")->check(CLI::Range(1, 1000));
  sub->add_option("--s-image", a.s_image, "Guidance scale s_I");
  sub->add_option("--s-text", a.s_text, "Guidance scale s_T");
  sub->add_option("--reference", a.reference, "View kept fully known and placed in every grid");
  sub->add_option("--latent-factor", a.latent_factor, "Image to latent downsampling")->check(CLI::PositiveNumber);
  sub->add_flag("--independent", a.independent, "Sample every view on its own instead");
  sub->add_option("--text", a.text, "Text prompt");
  sub->add_option("--seed", a.seed, "Root seed");
}

void cmd_inpaint(const InpaintArgs& a, const json& config, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  MultiViewDataset data = load_dataset(a.data);
  const NoiseSchedule sched = make_schedule(ScheduleKind::linear, 1000);
  const Backend backend = make_backend(a.backend, sched);
  const int f = a.latent_factor;
  if (data.width() % (f * backend.codec->scale_factor()) != 0 ||
      data.height() % (f * backend.codec->scale_factor()) != 0)
    throw ConfigError("image size is not divisible by the latent factor");
  if (a.first >= data.size()) throw ConfigError("--first is past the last view");
  const int n = a.n == 0 ? data.size() : a.n;
  if (n > data.size()) throw ConfigError("--n exceeds the number of views");

  std::vector<int> views;
  for (int k = 0; k < n; ++k) views.push_back((a.first + k) % data.size());
  std::optional<int> ref_pos;
  if (a.reference) {
    const auto it = std::find(views.begin(), views.end(), *a.reference);
    if (it == views.end()) throw ConfigError("--reference view is not among the selected views");
    ref_pos = int(it - views.begin());
  }

  LatentBatch<float> batch;
  Rng latent_rng(derive_seed(a.seed, "initial-latents"));
  for (int v : views) {
    const Frame& fr = data.frames[v];
    const Mask<float> mask_lo = binarize(downsample_mask(fr.mask, f));
    Conditioning<float> cond;
    const int sf = backend.codec->scale_factor();
    cond.mask = sf == 1 ? mask_lo : binarize(downsample_mask(mask_lo, sf));
    cond.image = zero_unknown(backend.codec->encode(zero_unknown(downsample(fr.image, f), mask_lo)), cond.mask);
    if (!a.text.empty()) cond.text = a.text;
    Tensor3<float> z = randn<float>(cond.image.shape(), latent_rng);
    batch.push_back(std::move(z), std::move(cond), v);
  }

  JointSampleConfig jc;
  jc.m_repeats = a.m;
  jc.num_steps = a.steps;
  jc.t_start = a.t_start;
  jc.scales = {a.s_image, a.s_text};
  jc.seed = derive_seed(a.seed, "sampler");
  int padded = 0;
  int grids = 0;
  std::vector<Tensor3<float>> latents;
  if (a.independent) {
    latents = independent_inpaint(*backend.denoiser, batch, jc, sched);
  } else {
    LatentBatch<float> full;
    if (ref_pos) {
      if (*ref_pos != 0) {
        std::swap(batch.latents[0], batch.latents[*ref_pos]);
        std::swap(batch.conds[0], batch.conds[*ref_pos]);
        std::swap(batch.view_ids[0], batch.view_ids[*ref_pos]);
        std::swap(views[0], views[*ref_pos]);
      }
      jc.reference_index = 0;
      full = known_padding(batch, 3, 1);
    } else {
      full = known_padding(batch, 4);
    }
    padded = full.size() - batch.size();
    grids = ref_pos ? (full.size() - 1) / 3 : full.size() / 4;
    latents = joint_inpaint(*backend.denoiser, full, jc, sched);
  }

  std::vector<Image> images;
  std::vector<Mask<float>> masks;
  for (int k = 0; k < n; ++k) {
    Frame& fr = data.frames[views[k]];
    if (ref_pos && k == 0) {
      images.push_back(fr.image);
      masks.push_back(fr.mask);
      continue;
    }
    const Image full = upsample_nearest(backend.codec->decode(latents[k]), f);
    if (full.shape() != fr.image.shape()) throw ShapeError("decoded inpaint has shape " + to_string(full.shape()));
    if (!full.values().allFinite()) throw NumericalError("inpaint of view " + std::to_string(views[k]) + " is not finite");
    for (int y = 0; y < full.height(); ++y)
      for (int x = 0; x < full.width(); ++x)
        if (fr.mask(y, x) == 0.0f)
          for (int c = 0; c < 3; ++c) fr.image(y, x, c) = std::clamp(full(y, x, c), 0.0f, 1.0f);
    fr.image = quantize8(fr.image);
    images.push_back(fr.image);
    masks.push_back(fr.mask);
  }

  const fs::path dir(a.out);
  save_dataset(data, (dir / "dataset").string());
  json prov = {{"seed", a.seed},
               {"sampler_seed", jc.seed},
               {"views", views},
               {"padding_views", padded},
               {"grids_per_repeat", grids},
               {"backend", descriptor_json(backend.denoiser->descriptor())},
               {"config", config}};
  if (fs::exists(fs::path(a.data) / "gt" / "index.json")) {
    MultiViewDataset selected;
    selected.aabb = data.aabb;
    selected.near = data.near;
    selected.far = data.far;
    std::vector<Plane<float>> depth_sel;
    const std::vector<Plane<float>> depth = load_gt_depth(a.data);
    for (int v : views) {
      selected.frames.push_back(data.frames[v]);
      depth_sel.push_back(depth.at(v));
    }
    ConsistencyConfig cc;
    cc.seed = derive_seed(a.seed, "consistency");
    const ConsistencyResult cr = cross_view_consistency(images, masks, selected, depth_sel, cc);
    prov["consistency"] = {{"mean_abs_diff", cr.mean_abs_diff}, {"correspondences", cr.correspondences}};
    out << "cross-view consistency " << cr.mean_abs_diff << " over " << cr.correspondences << " correspondences\n";
  }
  prov["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json(dir / "inpaint.json", prov);
  write_manifest(dir, "inpaint-joint", a.seed, config, {{"backend", prov["backend"]}});
  out << "inpainted " << n << " views into " << (dir / "dataset").string() << "\n";
}

// train ---------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  BackendOptions backend;
  TrainConfig cfg;
  std::string mode = "joint-du";
  std::string schedule = "linear";
  std::string optimizer = "adam";
  double depth_noise = 0.05;
  std::optional<double> near_offset;
};

void add_train(CLI::App& app, TrainArgs& a) {
  CLI::App* sub = app.add_subcommand("train", "Fit a field with iterative dataset updates");
  TrainConfig& c = a.cfg;
  sub->add_option("--data", a.data, "Dataset directory")->required();
  sub->add_option("--out", a.out, "Run directory")->required();
  add_backend_options(sub, a.backend);
  sub->add_option("--mode", a.mode, "joint-du, independent-du, inpaint-once or masked-only")
      ->check(CLI::IsMember({"joint-du", "independent-du", "inpaint-once", "masked-only"}));
  sub->add_option("--noise-schedule", a.schedule, "linear or random")->check(CLI::IsMember({"linear", "random"}));
  sub->add_option("--total", c.total_iterations, "Iterations after the warmup")->check(CLI::PositiveNumber);
  sub->add_option("--warmup", c.warmup_iterations, "Known-pixel iterations before the first update")
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--interval", c.update_interval, "Iterations between dataset updates (S)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--batch-views", c.batch_views, "Views per dataset update (N)")->check(CLI::PositiveNumber);
  sub->add_option("--m", c.m_repeats, "Grid permutations per step (M)")->check(CLI::PositiveNumber);
  sub->add_option("--t-min", c.t_min, "Noise level reached at the last iteration");
  sub->add_option("--t-random-min", c.t_random_min, "Lower bound of the random schedule");
  sub->add_option("--t-random-max", c.t_random_max, "Upper bound of the random schedule");
  sub->add_option("--steps", c.ddim_steps, "DDIM steps for a full-noise update")->check(CLI::PositiveNumber);
  sub->add_option("--s-image", c.scales.s_image, "Guidance scale s_I");
  sub->add_option("--s-text", c.scales.s_text, "Guidance scale s_T");
  sub->add_option("--latent-factor", c.latent_factor, "Image to latent downsampling")->check(CLI::PositiveNumber);
  sub->add_option("--field-res", c.field_resolution, "Voxels per axis")->check(CLI::PositiveNumber);
  sub->add_option("--rays", c.rays_per_batch, "Rays per iteration")->check(CLI::PositiveNumber);
  sub->add_option("--samples", c.samples, "Samples per training ray")->check(CLI::PositiveNumber);
  sub->add_option("--optimizer", a.optimizer, "adam or momentum")->check(CLI::IsMember({"adam", "momentum"}));
  sub->add_option("--lr", c.optimizer.learning_rate, "Learning rate")->check(CLI::PositiveNumber);
  sub->add_option("--final-lr-factor", c.final_lr_factor, "Learning rate multiplier at the last iteration");
  sub->add_option("--depth-weight", c.depth_weight, "Depth ranking loss weight, 0 disables it");
  sub->add_option("--depth-noise", a.depth_noise, "Relative noise of the synthetic depth prior");
  sub->add_option("--depth-pairs", c.depth_pairs, "Pixel pairs per depth ranking step")->check(CLI::PositiveNumber);
  sub->add_option("--eval-samples", c.eval_samples, "Samples per ray for evaluation")->check(CLI::PositiveNumber);
  sub->add_option("--near-offset", a.near_offset, "Evaluation near plane; default 5% of the scene diagonal");
  sub->add_option("--log-interval", c.log_interval, "Iterations per logged loss")->check(CLI::PositiveNumber);
  sub->add_option("--seed", c.seed, "Root seed");
}

void cmd_train(TrainArgs& a, const json& config, std::ostream& out) {
  TrainConfig& c = a.cfg;
  c.mode = parse_du_mode(a.mode);
  c.noise_schedule = parse_noise_schedule(a.schedule);
  c.optimizer.kind = a.optimizer == "adam" ? OptimizerKind::adam : OptimizerKind::momentum;
  c.near_offset = a.near_offset;
  c.checkpoint_dir = a.out;
  c.validate();
  const MultiViewDataset data = load_dataset(a.data);
  const NoiseSchedule sched = make_schedule(ScheduleKind::linear, 1000);
  const Backend backend = make_backend(a.backend, sched);
  DepthPrior prior;
  if (c.depth_weight > 0)
    prior = make_synthetic_depth_prior(load_gt_depth(a.data), a.depth_noise, derive_seed(c.seed, "depth-prior"));

  TrainResult r = run_training(c, data, *backend.denoiser, *backend.codec, sched, prior);
  const fs::path dir(a.out);
  save_field(r.field, (dir / "field.gfv").string());
  save_dataset(r.dataset, (dir / "dataset").string());
  json report = r.report.to_json();
  report["cli"] = config;
  report["backend"] = descriptor_json(backend.denoiser->descriptor());
  write_json(dir / "report.json", report);
  write_manifest(dir, "train", c.seed, config, {{"backend", report["backend"]}});
  const MetricReport& m = r.report.final_metrics;
  out << "trained " << to_string(c.mode) << " in " << r.report.seconds << " s: psnr " << m.psnr;
  if (m.psnr_unknown) out << ", unknown-region psnr " << *m.psnr_unknown;
  out << "\n";
}

// render --------------------------------------------------------------------

struct RenderArgs {
  std::string field;
  std::string out;
  std::string data;
  int frames = 300;
  int width = 64;
  int height = 64;
  double fov = 60.0;
  std::vector<double> center;
  std::optional<double> radius;
  double lift = 0.0;
  int samples = 128;
  double near = 0.05;
  std::optional<double> far;
};

void add_render(CLI::App& app, RenderArgs& a) {
  CLI::App* sub = app.add_subcommand("render", "Render a field along an orbit or the dataset cameras");
  sub->add_option("--field", a.field, "Field checkpoint")->required();
  sub->add_option("--out", a.out, "Run directory")->required();
  sub->add_option("--data", a.data, "Render the cameras of this dataset instead of an orbit");
  sub->add_option("--frames", a.frames, "Orbit frames")->check(CLI::PositiveNumber);
  sub->add_option("--width", a.width, "Image width")->check(CLI::PositiveNumber);
  sub->add_option("--height", a.height, "Image height")->check(CLI::PositiveNumber);
  sub->add_option("--fov", a.fov, "Horizontal field of view in degrees");
  sub->add_option("--center", a.center, "Orbit centre; default the field centre")->expected(3);
  sub->add_option("--radius", a.radius, "Orbit radius; default 30% of the smallest field extent");
  sub->add_option("--lift", a.lift, "Camera height above the centre");
  sub->add_option("--samples", a.samples, "Samples per ray")->check(CLI::PositiveNumber);
  sub->add_option("--near", a.near, "Near plane");
  sub->add_option("--far", a.far, "Far plane; default the field diagonal");
}

void cmd_render(const RenderArgs& a, const json& config, std::ostream& out) {
  const RadianceField<float> field = load_field(a.field);
  const Eigen::Vector3d lo = field.bounds.min().cast<double>(), hi = field.bounds.max().cast<double>();
  std::vector<Camera<double>> cams;
  double far = a.far.value_or(double(field.diagonal()));
  if (!a.data.empty()) {
    const MultiViewDataset data = load_dataset(a.data);
    for (const Frame& fr : data.frames) cams.push_back(fr.camera);
    if (!a.far) far = data.far;
  } else {
    const Eigen::Vector3d center = a.center.empty() ? Eigen::Vector3d(0.5 * (lo + hi)) : vec3(a.center, "--center");
    const double radius = a.radius.value_or(0.3 * (hi - lo).minCoeff());
    cams = orbit_cameras(center, radius, a.lift, a.frames, a.width, a.height, a.fov);
  }
  std::vector<Image> images(cams.size());
  std::vector<Plane<float>> depths(cams.size());
  parallel_for(cams.size(), [&](std::size_t k) {
    auto r = render_view(field, cams[k].cast<float>(), a.samples, float(a.near), float(far));
    images[k] = std::move(r.image);
    depths[k] = std::move(r.depth);
  });
  const fs::path dir(a.out);
  save_renders(images, depths, (dir / "renders").string(), DepthEncoding{far / 65535.0});
  write_manifest(dir, "render", 0, config, json::object());
  out << "rendered " << cams.size() << " frames to " << (dir / "renders").string() << "\n";
}

// eval ----------------------------------------------------------------------

struct EvalArgs {
  std::string field;
  std::string data;
  std::string out;
  std::optional<double> near_offset;
  int samples = 128;
  bool gt = false;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  CLI::App* sub = app.add_subcommand("eval", "Compare field renders against dataset images");
  sub->add_option("--field", a.field, "Field checkpoint")->required();
  sub->add_option("--data", a.data, "Dataset directory")->required();
  sub->add_option("--out", a.out, "Run directory")->required();
  sub->add_option("--near-offset", a.near_offset, "Near plane; default 5% of the scene diagonal");
  sub->add_option("--samples", a.samples, "Samples per ray")->check(CLI::PositiveNumber);
  sub->add_flag("--gt", a.gt, "Compare against the ground-truth renders under <data>/gt");
}

void cmd_eval(const EvalArgs& a, const json& config, std::ostream& out) {
  const RadianceField<float> field = load_field(a.field);
  MultiViewDataset data = load_dataset(a.data);
  if (a.gt) {
    const fs::path index_path = fs::path(a.data) / "gt" / "index.json";
    const json index = read_json_file<DataError>(index_path.string());
    if (int(index.at("frames").size()) != data.size()) throw DataError(index_path.string() + ": wrong frame count");
    for (int v = 0; v < data.size(); ++v)
      data.frames[v].image =
          read_png_rgb((fs::path(a.data) / "gt" / index["frames"][v].at("color").get<std::string>()).string());
    data.validate();
  }
  EvalConfig ec;
  ec.near_offset = a.near_offset;
  ec.samples = a.samples;
  const MetricReport m = eval_dataset_consistency(field, data, ec);
  const fs::path dir(a.out);
  write_json(dir / "metrics.json", m.to_json());
  std::ofstream csv(dir / "metrics.csv");
  csv << m.to_csv();
  if (!csv) throw DataError("cannot write " + (dir / "metrics.csv").string());
  csv.close();
  write_manifest(dir, "eval", 0, config, json::object());
  out << "psnr " << m.psnr << " ssim " << m.ssim;
  if (m.psnr_unknown) out << " unknown-region psnr " << *m.psnr_unknown << " ssim " << *m.ssim_unknown;
  out << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-view inpainting and scene completion on voxel radiance fields", "gridfill"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  unsigned threads = 0;
  app.add_option("--config", config_path, "JSON file of flag values; command-line flags win");
  app.add_option("--threads", threads, "Worker thread cap, 0 = all cores");

  SyntheticArgs synthetic;
  InpaintArgs inpaint;
  TrainArgs train;
  RenderArgs render;
  EvalArgs eval;
  add_synthetic(app, synthetic);
  add_inpaint(app, inpaint);
  add_train(app, train);
  add_render(app, render);
  add_eval(app, eval);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_config;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (!config_path.empty()) apply_config(sub, read_json_file<ConfigError>(config_path));
    thread_cap() = threads;
    const json config = effective_config(sub);
    const std::string name = sub->get_name();
    const CLI::Option* out_opt = sub->get_option_no_throw("--out");
    if (out_opt && out_opt->count() > 0) fs::create_directories(out_opt->as<std::string>());
    if (name == "make-synthetic") cmd_synthetic(synthetic, config, out);
    else if (name == "inpaint-joint") cmd_inpaint(inpaint, config, out);
    else if (name == "train") cmd_train(train, config, out);
    else if (name == "render") cmd_render(render, config, out);
    else cmd_eval(eval, config, out);
  } catch (const CLI::ParseError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return exit_data;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return exit_data;
  } catch (const BackendError& e) {
    err << "backend error: " << e.what() << "\n";
    return exit_backend;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_failure;
  }
  return exit_ok;
}

}  // namespace gridfill::cli
