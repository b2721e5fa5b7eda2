#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridfill/backend.hpp"
#include "gridfill/dataset.hpp"
#include "gridfill/grid.hpp"
#include "gridfill/metrics.hpp"

namespace gridfill {

/// Noise level for the dataset update at an iteration: 1 at the start, t_min at
/// the end, linear in between.
double anneal_t(long iteration, long total, double t_min);

/// Maps a noise level in [0, 1] to a diffusion step of the schedule.
int noise_step(double t, const NoiseSchedule& sched);

struct DepthRankConfig {
  int pair_count = 512;
  /// Hinge margin in scene units.
  double margin = 1e-3;
  /// Pairs whose prior depths differ by less than this fraction are ties.
  double tie_threshold = 0.01;
};

struct DepthRankResult {
  double loss = 0;
  /// d loss / d rendered depth.
  Eigen::ArrayXd grad;
  int pairs_used = 0;
};

/// Hinge ranking loss over random pixel pairs: for every sampled pair where the
/// prior puts i in front of j, penalize max(0, rendered_i - rendered_j + margin).
/// Averaged over the non-tied pairs.
DepthRankResult depth_rank_loss(const Eigen::ArrayXd& rendered, const Eigen::ArrayXd& prior,
                                const DepthRankConfig& cfg, Rng& rng);

enum class DepthSource { none, synthetic_gt, external };

struct DepthPrior {
  DepthSource source = DepthSource::none;
  std::vector<Plane<float>> depth;
  std::vector<Mask<float>> valid;

  void validate(const MultiViewDataset& data) const;
};

/// Ground-truth depth times (1 + N(0, rel_noise^2)); pixels pushed to a
/// non-positive depth are marked invalid.
DepthPrior make_synthetic_depth_prior(const std::vector<Plane<float>>& gt_depth, double rel_noise, std::uint64_t seed);

enum class DuMode { joint_du, independent_du, inpaint_once, masked_only };
enum class NoiseScheduleMode { linear, random };

DuMode parse_du_mode(const std::string& s);
std::string to_string(DuMode m);
NoiseScheduleMode parse_noise_schedule(const std::string& s);
std::string to_string(NoiseScheduleMode m);

struct TrainConfig {
  DuMode mode = DuMode::joint_du;
  NoiseScheduleMode noise_schedule = NoiseScheduleMode::linear;
  long total_iterations = 30000;
  /// Known-pixel-only fitting before the first dataset update.
  long warmup_iterations = 2000;
  long update_interval = 500;
  int batch_views = 40;
  int m_repeats = 8;
  double t_min = 0.4;
  double t_random_min = 0.02;
  double t_random_max = 0.98;
  int ddim_steps = 20;
  GuidanceScales scales;
  /// Latents are images downsampled by this factor.
  int latent_factor = 2;

  int field_resolution = 64;
  int rays_per_batch = 1024;
  int samples = 64;
  OptimizerConfig optimizer{.learning_rate = 0.1, .kind = OptimizerKind::adam};
  /// Learning rate multiplier reached at the last iteration (exponential decay).
  double final_lr_factor = 0.1;
  LossWeights loss;
  double density_init = -4.0;

  double depth_weight = 0.0;
  int depth_pairs = 512;
  /// Margin as a fraction of the scene diagonal.
  double depth_margin = 1e-3;
  double depth_tie = 0.01;

  int eval_samples = 128;
  std::optional<double> near_offset;
  long log_interval = 100;
  std::uint64_t seed = 0;
  /// Where the last good field is written if training diverges; empty = nowhere.
  std::string checkpoint_dir;

  void validate() const;
  nlohmann::json to_json() const;
  /// Overrides the fields present in j; unknown keys are rejected.
  void update_from_json(const nlohmann::json& j);
};

struct UpdateDiagnostics {
  long iteration = 0;
  double t = 0;
  int step = 0;
  std::vector<int> views;
  /// Render vs new inpaint over unknown pixels, per updated view.
  std::vector<double> psnr_unknown;
  double mean_psnr_unknown = 0;
  bool failed = false;
  std::string error;

  nlohmann::json to_json() const;
};

/// Mutable training state shared by the update and optimization steps.
struct TrainState {
  RadianceField<float> field;
  MultiViewDataset dataset;
  long iteration = 0;
  /// Next view for round-robin selection.
  int cursor = 0;
  /// Views whose unknown pixels hold an inpaint.
  std::vector<bool> inpainted = {};
  std::uint64_t seed = 0;
  int update_count = 0;
};

/// Renders the next batch_views views, re-noises them to level t, inpaints them
/// jointly (or independently), and writes the result into the unknown pixels.
/// A failure leaves the dataset untouched and is reported in the diagnostics.
UpdateDiagnostics dataset_update(TrainState& state, const TrainConfig& cfg, const DenoiserBackend<float>& backend,
                                 const Codec& codec, const NoiseSchedule& sched, double t);

/// SHA-256 over the bytes of every known pixel, in view order.
std::string known_pixel_checksum(const MultiViewDataset& data);

struct TrainReport {
  nlohmann::json config;
  std::vector<UpdateDiagnostics> updates;
  /// (iteration, mean loss over the preceding log interval); warmup iterations
  /// are negative.
  std::vector<std::pair<long, double>> losses;
  MetricReport final_metrics;
  std::string checksum_before;
  std::string checksum_after;
  double seconds = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  RadianceField<float> field;
  MultiViewDataset dataset;
  TrainReport report;
};

/// Masked warmup, then optimization interleaved with dataset updates every
/// update_interval iterations. With an initial field the warmup is skipped.
TrainResult run_training(const TrainConfig& cfg, MultiViewDataset dataset, const DenoiserBackend<float>& backend,
                         const Codec& codec, const NoiseSchedule& sched, const DepthPrior& prior = {},
                         const RadianceField<float>* initial_field = nullptr);

/// Known-pixel-only fitting, the starting point of every mode.
RadianceField<float> masked_warmup(const TrainConfig& cfg, const MultiViewDataset& dataset,
                                   std::vector<std::pair<long, double>>* losses = nullptr);

}  // namespace gridfill
