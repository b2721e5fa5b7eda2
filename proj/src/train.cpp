#include <chrono>
#include <cmath>
#include <filesystem>
#include <set>

#include "gridfill/hash.hpp"
#include "gridfill/train.hpp"

namespace gridfill {

using nlohmann::json;

double anneal_t(long iteration, long total, double t_min) {
  if (total <= 0) throw ConfigError("anneal_t: total must be positive");
  if (iteration < 0 || iteration > total)
    throw ConfigError("anneal_t: iteration " + std::to_string(iteration) + " outside [0, " + std::to_string(total) +
                      "]");
  if (!(t_min > 0 && t_min < 1)) throw ConfigError("anneal_t: t_min must lie in (0, 1)");
  if (iteration == 0) return 1.0;
  if (iteration == total) return t_min;
  return 1.0 - (1.0 - t_min) * (double(iteration) / double(total));
}

int noise_step(double t, const NoiseSchedule& sched) {
  if (!(t >= 0 && t <= 1)) throw ConfigError("noise level " + std::to_string(t) + " outside [0, 1]");
  return int(std::lround(t * sched.num_train_steps));
}

DepthRankResult depth_rank_loss(const Eigen::ArrayXd& rendered, const Eigen::ArrayXd& prior,
                                const DepthRankConfig& cfg, Rng& rng) {
  const Eigen::Index k = rendered.size();
  if (prior.size() != k) throw ShapeError("depth_rank_loss: rendered and prior differ in length");
  if (k < 2) throw ConfigError("depth_rank_loss: need at least 2 samples");
  if (cfg.pair_count < 1) throw ConfigError("depth_rank_loss: pair_count must be positive");
  if (!(cfg.margin > 0)) throw ConfigError("depth_rank_loss: margin must be positive");

  DepthRankResult r;
  r.grad = Eigen::ArrayXd::Zero(k);
  std::uniform_int_distribution<Eigen::Index> pick(0, k - 1);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> active;
  for (int p = 0; p < cfg.pair_count; ++p) {
    Eigen::Index i = pick(rng), j = pick(rng);
    if (i == j) continue;
    const double gap = std::abs(prior[i] - prior[j]);
    if (gap <= cfg.tie_threshold * std::max(std::abs(prior[i]), std::abs(prior[j]))) continue;
    if (prior[i] > prior[j]) std::swap(i, j);
    ++r.pairs_used;
    const double h = rendered[i] - rendered[j] + cfg.margin;
    if (h > 0) {
      r.loss += h;
      active.emplace_back(i, j);
    }
  }
  if (r.pairs_used == 0) return r;
  r.loss /= r.pairs_used;
  for (const auto& [i, j] : active) {
    r.grad[i] += 1.0 / r.pairs_used;
    r.grad[j] -= 1.0 / r.pairs_used;
  }
  return r;
}

void DepthPrior::validate(const MultiViewDataset& data) const {
  if (source == DepthSource::none) return;
  if (int(depth.size()) != data.size() || int(valid.size()) != data.size())
    throw DataError("depth prior: need one depth map and validity mask per view");
  for (int i = 0; i < data.size(); ++i) {
    if (depth[i].rows() != data.height() || depth[i].cols() != data.width() || valid[i].rows() != data.height() ||
        valid[i].cols() != data.width())
      throw DataError("depth prior: view " + std::to_string(i) + " does not match the image size");
    for (Eigen::Index k = 0; k < depth[i].size(); ++k)
      if (valid[i].data()[k] != 0.0f && !(std::isfinite(depth[i].data()[k]) && depth[i].data()[k] > 0))
        throw DataError("depth prior: view " + std::to_string(i) + " has a non-positive valid depth");
  }
}

DepthPrior make_synthetic_depth_prior(const std::vector<Plane<float>>& gt_depth, double rel_noise,
                                      std::uint64_t seed) {
  if (!(rel_noise >= 0)) throw ConfigError("depth prior noise must be non-negative");
  DepthPrior p;
  p.source = DepthSource::synthetic_gt;
  Rng rng(derive_seed(seed, "depth-prior"));
  std::normal_distribution<double> n(0.0, 1.0);
  for (const Plane<float>& d : gt_depth) {
    Plane<float> noisy(d.rows(), d.cols());
    Mask<float> valid(d.rows(), d.cols());
    for (Eigen::Index k = 0; k < d.size(); ++k) {
      const double scale = rel_noise > 0 ? 1.0 + rel_noise * n(rng) : 1.0;
      const double v = d.data()[k] * scale;
      const bool ok = std::isfinite(v) && v > 0;
      noisy.data()[k] = ok ? float(v) : 0.0f;
      valid.data()[k] = ok ? 1.0f : 0.0f;
    }
    p.depth.push_back(std::move(noisy));
    p.valid.push_back(std::move(valid));
  }
  return p;
}

DuMode parse_du_mode(const std::string& s) {
  if (s == "joint-du") return DuMode::joint_du;
  if (s == "independent-du") return DuMode::independent_du;
  if (s == "inpaint-once") return DuMode::inpaint_once;
  if (s == "masked-only") return DuMode::masked_only;
  throw ConfigError("unknown mode '" + s + "' (joint-du, independent-du, inpaint-once, masked-only)");
}

std::string to_string(DuMode m) {
  switch (m) {
    case DuMode::joint_du: return "joint-du";
    case DuMode::independent_du: return "independent-du";
    case DuMode::inpaint_once: return "inpaint-once";
    case DuMode::masked_only: return "masked-only";
  }
  return "?";
}

NoiseScheduleMode parse_noise_schedule(const std::string& s) {
  if (s == "linear") return NoiseScheduleMode::linear;
  if (s == "random") return NoiseScheduleMode::random;
  throw ConfigError("unknown noise schedule '" + s + "' (linear, random)");
}

namespace {

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "momentum") return OptimizerKind::momentum;
  throw ConfigError("unknown optimizer '" + s + "' (adam, momentum)");
}

}  // namespace

std::string to_string(NoiseScheduleMode m) { return m == NoiseScheduleMode::linear ? "linear" : "random"; }

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  require(total_iterations >= 1, "total_iterations must be positive");
  require(warmup_iterations >= 0, "warmup_iterations must be non-negative");
  require(update_interval >= 1, "update_interval must be positive");
  require(batch_views >= 1, "batch_views must be positive");
  require(m_repeats >= 1, "m_repeats must be positive");
  require(t_min > 0 && t_min < 1, "t_min must lie in (0, 1)");
  require(t_random_min > 0 && t_random_min < t_random_max && t_random_max <= 1,
          "need 0 < t_random_min < t_random_max <= 1");
  require(ddim_steps >= 1, "ddim_steps must be positive");
  require(latent_factor >= 1, "latent_factor must be positive");
  require(field_resolution >= 2, "field_resolution must be at least 2");
  require(rays_per_batch >= 1, "rays_per_batch must be positive");
  require(samples >= 2 && eval_samples >= 2, "need at least 2 samples per ray");
  require(optimizer.learning_rate > 0, "learning_rate must be positive");
  require(optimizer.momentum >= 0 && optimizer.momentum < 1, "momentum must lie in [0, 1)");
  require(optimizer.beta2 >= 0 && optimizer.beta2 < 1, "beta2 must lie in [0, 1)");
  require(final_lr_factor > 0, "final_lr_factor must be positive");
  require(depth_weight >= 0, "depth_weight must be non-negative");
  require(depth_pairs >= 1, "depth_pairs must be positive");
  require(depth_margin > 0, "depth_margin must be positive");
  require(depth_tie >= 0, "depth_tie must be non-negative");
  require(!near_offset || *near_offset >= 0, "near_offset must be non-negative");
  require(log_interval >= 1, "log_interval must be positive");
}

json TrainConfig::to_json() const {
  return {{"mode", to_string(mode)},
          {"noise_schedule", to_string(noise_schedule)},
          {"total_iterations", total_iterations},
          {"warmup_iterations", warmup_iterations},
          {"update_interval", update_interval},
          {"batch_views", batch_views},
          {"m_repeats", m_repeats},
          {"t_min", t_min},
          {"t_random_min", t_random_min},
          {"t_random_max", t_random_max},
          {"ddim_steps", ddim_steps},
          {"s_image", scales.s_image},
          {"s_text", scales.s_text},
          {"latent_factor", latent_factor},
          {"field_resolution", field_resolution},
          {"rays_per_batch", rays_per_batch},
          {"samples", samples},
          {"learning_rate", optimizer.learning_rate},
          {"optimizer", optimizer.kind == OptimizerKind::adam ? "adam" : "momentum"},
          {"momentum", optimizer.momentum},
          {"beta2", optimizer.beta2},
          {"density_lr_scale", optimizer.density_lr_scale},
          {"color_lr_scale", optimizer.color_lr_scale},
          {"final_lr_factor", final_lr_factor},
          {"loss_mse", loss.mse},
          {"loss_l1", loss.l1},
          {"density_init", density_init},
          {"depth_weight", depth_weight},
          {"depth_pairs", depth_pairs},
          {"depth_margin", depth_margin},
          {"depth_tie", depth_tie},
          {"eval_samples", eval_samples},
          {"near_offset", near_offset ? json(*near_offset) : json()},
          {"log_interval", log_interval},
          {"seed", seed},
          {"checkpoint_dir", checkpoint_dir}};
}

void TrainConfig::update_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  const json known = to_json();
  try {
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
      if (key == "mode") mode = parse_du_mode(value.get<std::string>());
      else if (key == "noise_schedule") noise_schedule = parse_noise_schedule(value.get<std::string>());
      else if (key == "total_iterations") total_iterations = value.get<long>();
      else if (key == "warmup_iterations") warmup_iterations = value.get<long>();
      else if (key == "update_interval") update_interval = value.get<long>();
      else if (key == "batch_views") batch_views = value.get<int>();
      else if (key == "m_repeats") m_repeats = value.get<int>();
      else if (key == "t_min") t_min = value.get<double>();
      else if (key == "t_random_min") t_random_min = value.get<double>();
      else if (key == "t_random_max") t_random_max = value.get<double>();
      else if (key == "ddim_steps") ddim_steps = value.get<int>();
      else if (key == "s_image") scales.s_image = value.get<double>();
      else if (key == "s_text") scales.s_text = value.get<double>();
      else if (key == "latent_factor") latent_factor = value.get<int>();
      else if (key == "field_resolution") field_resolution = value.get<int>();
      else if (key == "rays_per_batch") rays_per_batch = value.get<int>();
      else if (key == "samples") samples = value.get<int>();
      else if (key == "learning_rate") optimizer.learning_rate = value.get<double>();
      else if (key == "optimizer") optimizer.kind = parse_optimizer(value.get<std::string>());
      else if (key == "momentum") optimizer.momentum = value.get<double>();
      else if (key == "beta2") optimizer.beta2 = value.get<double>();
      else if (key == "density_lr_scale") optimizer.density_lr_scale = value.get<double>();
      else if (key == "color_lr_scale") optimizer.color_lr_scale = value.get<double>();
      else if (key == "final_lr_factor") final_lr_factor = value.get<double>();
      else if (key == "loss_mse") loss.mse = value.get<double>();
      else if (key == "loss_l1") loss.l1 = value.get<double>();
      else if (key == "density_init") density_init = value.get<double>();
      else if (key == "depth_weight") depth_weight = value.get<double>();
      else if (key == "depth_pairs") depth_pairs = value.get<int>();
      else if (key == "depth_margin") depth_margin = value.get<double>();
      else if (key == "depth_tie") depth_tie = value.get<double>();
      else if (key == "eval_samples") eval_samples = value.get<int>();
      else if (key == "near_offset") near_offset = value.is_null() ? std::nullopt : std::optional(value.get<double>());
      else if (key == "log_interval") log_interval = value.get<long>();
      else if (key == "seed") seed = value.get<std::uint64_t>();
      else if (key == "checkpoint_dir") checkpoint_dir = value.get<std::string>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

json UpdateDiagnostics::to_json() const {
  json j = {{"iteration", iteration}, {"t", t},           {"step", step},
            {"views", views},         {"failed", failed}, {"psnr_unknown", psnr_unknown}};
  j["mean_psnr_unknown"] = psnr_unknown.empty() ? json() : json(mean_psnr_unknown);
  if (failed) j["error"] = error;
  return j;
}

json TrainReport::to_json() const {
  json updates_json = json::array();
  for (const auto& u : updates) updates_json.push_back(u.to_json());
  json loss_json = json::array();
  for (const auto& [it, l] : losses) loss_json.push_back({it, l});
  return {{"config", config},
          {"updates", updates_json},
          {"losses", loss_json},
          {"final", final_metrics.to_json()},
          {"known_checksum", {{"before", checksum_before}, {"after", checksum_after}}},
          {"seconds", seconds}};
}

std::string known_pixel_checksum(const MultiViewDataset& data) {
  Sha256 h;
  for (const Frame& f : data.frames)
    for (int y = 0; y < f.image.height(); ++y)
      for (int x = 0; x < f.image.width(); ++x) {
        if (f.mask(y, x) == 0.0f) continue;
        float px[3] = {f.image(y, x, 0), f.image(y, x, 1), f.image(y, x, 2)};
        h.update(px, sizeof px);
      }
  return h.hex();
}

namespace {

Image zero_unknown(const Image& img, const Mask<float>& mask) {
  Image out = img;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      if (mask(y, x) == 0.0f)
        for (int c = 0; c < img.channels(); ++c) out(y, x, c) = 0.0f;
  return out;
}

/// Pixels eligible for supervision: every known pixel plus the unknown pixels
/// of views that already hold an inpaint.
std::vector<long> eligible_pixels(const MultiViewDataset& data, const std::vector<bool>& inpainted) {
  std::vector<long> ids;
  const long hw = long(data.width()) * data.height();
  for (int v = 0; v < data.size(); ++v) {
    const Mask<float>& m = data.frames[v].mask;
    for (long k = 0; k < hw; ++k)
      if (m.data()[k] != 0.0f || inpainted[v]) ids.push_back(v * hw + k);
  }
  if (ids.empty()) throw DataError("dataset has no pixels to train on");
  return ids;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, TrainState& state, const DepthPrior* prior)
      : cfg_(cfg), state_(state), prior_(prior), opt_(state.field, cfg.optimizer) {
    for (const Frame& f : state.dataset.frames) cams_.push_back(f.camera.cast<float>());
  }

  void set_pixels(std::vector<long> ids) { ids_ = std::move(ids); }

  /// One optimization step on a random ray batch; returns the loss.
  double step(Rng& rng, double lr_factor) {
    const MultiViewDataset& data = state_.dataset;
    const long hw = long(data.width()) * data.height();
    const int k = cfg_.rays_per_batch;
    RayBatch<float> rays;
    rays.origins.resize(k, 3);
    rays.directions.resize(k, 3);
    rays.near = float(data.near);
    rays.far = float(data.far);
    Rows3<float> target(k, 3);
    std::vector<std::pair<Eigen::Index, double>> depth_rays;
    std::uniform_int_distribution<std::size_t> pick(0, ids_.size() - 1);
    for (int i = 0; i < k; ++i) {
      const long id = ids_[pick(rng)];
      const int v = int(id / hw), p = int(id % hw), y = p / data.width(), x = p % data.width();
      rays.origins.row(i) = cams_[v].origin().transpose().array();
      rays.directions.row(i) = cams_[v].pixel_direction(x, y).transpose().array();
      const Image& img = data.frames[v].image;
      for (int c = 0; c < 3; ++c) target(i, c) = img(y, x, c);
      if (prior_ && data.frames[v].mask(y, x) == 0.0f && prior_->valid[v](y, x) != 0.0f)
        depth_rays.emplace_back(i, prior_->depth[v](y, x));
    }

    DepthObjective<float> objective;
    if (depth_rays.size() >= 2) {
      objective = [&](const Eigen::ArrayXf& depth) {
        Eigen::ArrayXd rendered(depth_rays.size()), prior(depth_rays.size());
        for (std::size_t j = 0; j < depth_rays.size(); ++j) {
          rendered[j] = depth[depth_rays[j].first];
          prior[j] = depth_rays[j].second;
        }
        const DepthRankConfig rc{cfg_.depth_pairs, cfg_.depth_margin * data.diagonal(), cfg_.depth_tie};
        const DepthRankResult r = depth_rank_loss(rendered, prior, rc, rng);
        Eigen::ArrayXd grad = Eigen::ArrayXd::Zero(depth.size());
        for (std::size_t j = 0; j < depth_rays.size(); ++j)
          grad[depth_rays[j].first] = cfg_.depth_weight * r.grad[j];
        return std::pair<double, Eigen::ArrayXd>(cfg_.depth_weight * r.loss, grad);
      };
    }
    const auto ev = train_step(state_.field, opt_, rays, target, Eigen::ArrayXd::Ones(k), cfg_.loss, cfg_.samples,
                               rng, objective, lr_factor);
    return ev.loss;
  }

 private:
  const TrainConfig& cfg_;
  TrainState& state_;
  const DepthPrior* prior_;
  FieldOptimizer<float> opt_;
  std::vector<Camera<float>> cams_;
  std::vector<long> ids_;
};

double lr_factor(const TrainConfig& cfg, long iteration, long total) {
  return std::pow(cfg.final_lr_factor, double(iteration) / double(std::max(1L, total)));
}

void save_last_good(const TrainConfig& cfg, const RadianceField<float>& field, std::string& where) {
  if (cfg.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(cfg.checkpoint_dir);
  where = (std::filesystem::path(cfg.checkpoint_dir) / "last_good.gfv").string();
  save_field(field, where);
}

/// Runs iterations [begin, end) of one phase, logging mean losses.
template <typename BeforeStep>
void run_phase(const TrainConfig& cfg, TrainState& state, Optimizer& opt, Rng& rng, long begin, long end,
               long lr_total, long log_offset, std::vector<std::pair<long, double>>* losses, BeforeStep before) {
  double acc = 0;
  long count = 0;
  for (long it = begin; it < end; ++it) {
    before(it);
    try {
      acc += opt.step(rng, lr_factor(cfg, it - begin, lr_total));
    } catch (const NumericalError& e) {
      std::string where;
      save_last_good(cfg, state.field, where);
      throw NumericalError(std::string(e.what()) + " at iteration " + std::to_string(it) +
                           (where.empty() ? std::string() : "; last good field saved to " + where));
    }
    ++count;
    if (count == cfg.log_interval || it + 1 == end) {
      if (losses) losses->emplace_back(it + 1 + log_offset, acc / double(count));
      acc = 0;
      count = 0;
    }
  }
}

RadianceField<float> make_field(const TrainConfig& cfg, const MultiViewDataset& data) {
  if (!data.aabb) throw ConfigError("dataset has no aabb; the field bounds are taken from it");
  return RadianceField<float>(Eigen::Vector3i::Constant(cfg.field_resolution), data.aabb->cast<float>(),
                              data.background, float(cfg.density_init), 0.0f);
}

}  // namespace

UpdateDiagnostics dataset_update(TrainState& state, const TrainConfig& cfg, const DenoiserBackend<float>& backend,
                                 const Codec& codec, const NoiseSchedule& sched, double t) {
  UpdateDiagnostics diag;
  diag.iteration = state.iteration;
  diag.t = t;
  diag.step = noise_step(t, sched);
  const MultiViewDataset& data = state.dataset;
  const int n = std::min(cfg.batch_views, data.size());
  for (int k = 0; k < n; ++k) diag.views.push_back((state.cursor + k) % data.size());
  const std::uint64_t seed = derive_seed(derive_seed(state.seed, "dataset-update"), std::uint64_t(state.update_count));
  const int f = cfg.latent_factor;

  std::vector<Image> renders(n), updated(n);
  try {
    if (data.width() % (f * codec.scale_factor()) != 0 || data.height() % (f * codec.scale_factor()) != 0)
      throw ShapeError("image size " + std::to_string(data.width()) + "x" + std::to_string(data.height()) +
                       " is not divisible by the latent factor");
    LatentBatch<float> batch;
    Rng noise_rng(derive_seed(seed, "renoise"));
    for (int k = 0; k < n; ++k) {
      const Frame& fr = data.frames[diag.views[k]];
      renders[k] = render_view(state.field, fr.camera.cast<float>(), cfg.samples, float(data.near), float(data.far))
                       .image;
      const Mask<float> mask_lo = binarize(downsample_mask(fr.mask, f));
      const Tensor3<float> z0 = codec.encode(downsample(renders[k], f));
      Conditioning<float> cond;
      cond.mask = codec.scale_factor() == 1 ? mask_lo : binarize(downsample_mask(mask_lo, codec.scale_factor()));
      cond.image = zero_unknown(codec.encode(zero_unknown(downsample(fr.image, f), mask_lo)), cond.mask);
      const Tensor3<float> eps = randn<float>(z0.shape(), noise_rng);
      batch.push_back(t >= 1.0 ? eps : add_noise(z0, eps, diag.step, sched), std::move(cond), diag.views[k]);
    }

    JointSampleConfig jc;
    jc.m_repeats = cfg.m_repeats;
    jc.t_start = diag.step;
    jc.num_steps = std::max(1, int(std::lround(double(cfg.ddim_steps) * diag.step / sched.num_train_steps)));
    jc.scales = cfg.scales;
    jc.seed = seed;
    std::vector<Tensor3<float>> out;
    if (diag.step == 0) {
      out = batch.latents;
    } else if (cfg.mode == DuMode::joint_du) {
      out = joint_inpaint(backend, known_padding(batch, 4), jc, sched);
    } else {
      out = independent_inpaint(backend, batch, jc, sched);
    }

    for (int k = 0; k < n; ++k) {
      const Frame& fr = data.frames[diag.views[k]];
      const Image full = upsample_nearest(codec.decode(out[k]), f);
      if (full.shape() != fr.image.shape()) throw ShapeError("decoded inpaint has shape " + to_string(full.shape()));
      if (!full.values().allFinite()) throw NumericalError("inpaint of view " + std::to_string(diag.views[k]) +
                                                           " is not finite");
      updated[k] = fr.image;
      for (int y = 0; y < full.height(); ++y)
        for (int x = 0; x < full.width(); ++x)
          if (fr.mask(y, x) == 0.0f)
            for (int c = 0; c < 3; ++c) updated[k](y, x, c) = std::clamp(full(y, x, c), 0.0f, 1.0f);
    }
  } catch (const Error& e) {
    diag.failed = true;
    diag.error = e.what();
    return diag;
  }

  double sum = 0;
  for (int k = 0; k < n; ++k) {
    const Mask<float> unknown = (data.frames[diag.views[k]].mask == 0.0f).cast<float>();
    if ((unknown == 0.0f).all()) continue;
    diag.psnr_unknown.push_back(psnr(renders[k], updated[k], &unknown));
    sum += diag.psnr_unknown.back();
  }
  if (!diag.psnr_unknown.empty()) diag.mean_psnr_unknown = sum / double(diag.psnr_unknown.size());

  for (int k = 0; k < n; ++k) {
    std::swap(state.dataset.frames[diag.views[k]].image, updated[k]);
    state.inpainted[diag.views[k]] = true;
  }
  state.cursor = (state.cursor + n) % data.size();
  ++state.update_count;
  return diag;
}

RadianceField<float> masked_warmup(const TrainConfig& cfg, const MultiViewDataset& dataset,
                                   std::vector<std::pair<long, double>>* losses) {
  cfg.validate();
  dataset.validate();
  TrainState state{.field = make_field(cfg, dataset), .dataset = dataset};
  state.inpainted.assign(dataset.size(), false);
  Optimizer opt(cfg, state, nullptr);
  opt.set_pixels(eligible_pixels(state.dataset, state.inpainted));
  Rng rng(derive_seed(cfg.seed, "warmup"));
  run_phase(cfg, state, opt, rng, 0, cfg.warmup_iterations, cfg.warmup_iterations, -cfg.warmup_iterations, losses,
            [](long) {});
  return std::move(state.field);
}

TrainResult run_training(const TrainConfig& cfg, MultiViewDataset dataset, const DenoiserBackend<float>& backend,
                         const Codec& codec, const NoiseSchedule& sched, const DepthPrior& prior,
                         const RadianceField<float>* initial_field) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();
  dataset.validate();
  prior.validate(dataset);
  TrainReport report;
  report.config = cfg.to_json();
  report.checksum_before = known_pixel_checksum(dataset);

  TrainState state{.field = initial_field ? *initial_field : masked_warmup(cfg, dataset, &report.losses),
                   .dataset = std::move(dataset)};
  state.field.validate();
  state.inpainted.assign(state.dataset.size(), false);
  state.seed = derive_seed(cfg.seed, "trainer");

  const bool use_depth = prior.source != DepthSource::none && cfg.depth_weight > 0;
  Optimizer opt(cfg, state, use_depth ? &prior : nullptr);
  opt.set_pixels(eligible_pixels(state.dataset, state.inpainted));
  Rng rng(derive_seed(state.seed, "rays"));
  Rng t_rng(derive_seed(state.seed, "noise-level"));
  std::uniform_real_distribution<double> random_t(cfg.t_random_min, cfg.t_random_max);

  auto before = [&](long it) {
    state.iteration = it;
    bool due = false;
    switch (cfg.mode) {
      case DuMode::masked_only: break;
      case DuMode::inpaint_once: due = it == 0; break;
      default: due = it % cfg.update_interval == 0;
    }
    if (!due) return;
    double t = cfg.noise_schedule == NoiseScheduleMode::random ? random_t(t_rng)
                                                               : anneal_t(it, cfg.total_iterations, cfg.t_min);
    // Inpaint-once covers every view up front.
    const int rounds = cfg.mode == DuMode::inpaint_once
                           ? (state.dataset.size() + cfg.batch_views - 1) / cfg.batch_views
                           : 1;
    if (cfg.mode == DuMode::inpaint_once) t = 1.0;
    for (int r = 0; r < rounds; ++r) {
      report.updates.push_back(dataset_update(state, cfg, backend, codec, sched, t));
      if (!report.updates.back().failed) opt.set_pixels(eligible_pixels(state.dataset, state.inpainted));
    }
  };
  run_phase(cfg, state, opt, rng, 0, cfg.total_iterations, cfg.total_iterations, 0, &report.losses, before);
  state.iteration = cfg.total_iterations;

  report.checksum_after = known_pixel_checksum(state.dataset);
  if (report.checksum_after != report.checksum_before)
    throw DataError("known pixels changed during training (checksum mismatch)");
  report.final_metrics = eval_dataset_consistency(state.field, state.dataset, {cfg.near_offset, cfg.eval_samples});
  report.final_metrics.config["mode"] = to_string(cfg.mode);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(state.field), std::move(state.dataset), std::move(report)};
}

}  // namespace gridfill
