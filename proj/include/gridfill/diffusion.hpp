#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gridfill/tensor.hpp"

namespace gridfill {

enum class ScheduleKind { linear, cosine };

/// Cumulative signal-retention table of the forward process.
/// alpha_bar[0] = 1 and alpha_bar is strictly decreasing in t.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int num_train_steps = 0;
  double beta_start = 8.5e-4;
  double beta_end = 1.2e-2;
  Eigen::ArrayXd alpha_bar;

  double signal(int t) const { return std::sqrt(alpha_bar[t]); }
  double noise(int t) const { return std::sqrt(1.0 - alpha_bar[t]); }
  void check_step(int t, const char* what) const;
};

NoiseSchedule make_schedule(ScheduleKind kind, int num_train_steps, double beta_start = 8.5e-4,
                            double beta_end = 1.2e-2);

/// Descending timesteps from t_start to 0 for a sampler with num_steps updates.
/// Duplicates produced by rounding are dropped, so fewer than num_steps pairs
/// can result when t_start < num_steps.
std::vector<int> ddim_timesteps(int t_start, int num_steps);

struct GuidanceScales {
  double s_image = 1.5;
  double s_text = 0.0;
};

/// What a denoiser is conditioned on. The image is the masked input with the
/// unknown region zeroed; mask uses 1 = known.
template <typename Scalar>
struct Conditioning {
  Tensor3<Scalar> image;
  Mask<Scalar> mask;
  std::optional<std::string> text;
  bool drop_image = false;
  bool drop_text = false;
  /// Set by the grid sampler when image holds a 2x2 tiling of four views.
  bool tiled = false;

  /// The conditioning a backend sees: drop_image clears the image and marks
  /// everything unknown.
  Conditioning effective() const {
    Conditioning out = *this;
    if (drop_image) {
      out.image = Tensor3<Scalar>(image.shape());
      out.mask = Mask<Scalar>::Zero(mask.rows(), mask.cols());
    }
    if (drop_text) out.text.reset();
    return out;
  }
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <typename Scalar>
Tensor3<Scalar> add_noise(const Tensor3<Scalar>& z0, const Tensor3<Scalar>& eps, int t, const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "add_noise");
  sched.check_step(t, "add_noise");
  const Scalar a = Scalar(sched.signal(t));
  const Scalar b = Scalar(sched.noise(t));
  return Tensor3<Scalar>(z0.shape(), a * z0.values() + b * eps.values());
}

/// Deterministic DDIM update from t to t_prev.
template <typename Scalar>
Tensor3<Scalar> ddim_step(const Tensor3<Scalar>& z_t, const Tensor3<Scalar>& eps_hat, int t, int t_prev,
                          const NoiseSchedule& sched) {
  require_same_shape(z_t, eps_hat, "ddim_step");
  sched.check_step(t, "ddim_step");
  sched.check_step(t_prev, "ddim_step");
  if (t_prev >= t) throw ConfigError("ddim_step: t_prev must be below t");
  const double a_t = sched.signal(t), b_t = sched.noise(t);
  const double a_p = sched.signal(t_prev), b_p = sched.noise(t_prev);
  Tensor3<Scalar> out(z_t.shape());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double e = double(eps_hat.values()[i]);
    const double z0 = (double(z_t.values()[i]) - b_t * e) / a_t;
    out.values()[i] = Scalar(a_p * z0 + b_p * e);
  }
  return out;
}

/// eps = e(cI,0) + s_I (e(cI,cT) - e(cI,0)) + s_T (e(cI,0) - e(0,0)),
/// evaluated as (1 - s_I + s_T) e(cI,0) + s_I e(cI,cT) - s_T e(0,0) so that
/// unit and zero scales select a branch exactly.
template <typename Scalar>
Tensor3<Scalar> cfg_combine(const Tensor3<Scalar>& eps_img_only, const Tensor3<Scalar>& eps_img_text,
                            const Tensor3<Scalar>& eps_uncond, const GuidanceScales& scales) {
  require_same_shape(eps_img_only, eps_img_text, "cfg_combine");
  require_same_shape(eps_img_only, eps_uncond, "cfg_combine");
  const Scalar w_only = Scalar(1.0 - scales.s_image + scales.s_text);
  const Scalar w_text = Scalar(scales.s_image);
  const Scalar w_uncond = Scalar(scales.s_text);
  return Tensor3<Scalar>(eps_img_only.shape(), w_only * eps_img_only.values() + w_text * eps_img_text.values() -
                                                   w_uncond * eps_uncond.values());
}

/// Re-noises the known latents to level t and keeps z_t elsewhere:
/// mask * add_noise(z0_known, eps, t) + (1 - mask) * z_t.
template <typename Scalar>
Tensor3<Scalar> enforce_known(const Tensor3<Scalar>& z_t, const Tensor3<Scalar>& z0_known, const Mask<Scalar>& mask,
                              const Tensor3<Scalar>& eps, int t, const NoiseSchedule& sched) {
  require_same_shape(z_t, z0_known, "enforce_known");
  require_mask_fits(z_t, mask, "enforce_known");
  return blend(mask, add_noise(z0_known, eps, t, sched), z_t);
}

}  // namespace gridfill
