#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>

#include "gridfill/diffusion.hpp"

namespace gridfill {

struct BackendDescriptor {
  std::string name;
  /// Latent shape the backend expects; all-zero means any shape.
  Shape latent_shape{};
  bool supports_text = false;
  bool grid_aware = false;
  /// The backend combines guidance branches itself (one call per prediction).
  bool applies_guidance = false;
  bool deterministic = true;
};

/// A noise predictor eps_phi(z_t, t, c).
template <typename Scalar>
class DenoiserBackend {
 public:
  virtual ~DenoiserBackend() = default;

  virtual BackendDescriptor descriptor() const = 0;

  virtual Tensor3<Scalar> predict_noise(const Tensor3<Scalar>& z_t, int t, const Conditioning<Scalar>& cond) const = 0;

  /// Classifier-free guided prediction. Branches whose weight is zero are not
  /// evaluated.
  virtual Tensor3<Scalar> predict_guided(const Tensor3<Scalar>& z_t, int t, const Conditioning<Scalar>& cond,
                                         const GuidanceScales& scales) const {
    Conditioning<Scalar> img_only = cond;
    img_only.drop_text = true;
    const Tensor3<Scalar> e_only = predict_noise(z_t, t, img_only);
    if (scales.s_image == 0.0 && scales.s_text == 0.0) return e_only;

    const Tensor3<Scalar> zero(z_t.shape());
    Tensor3<Scalar> e_text = zero;
    if (scales.s_image != 0.0) {
      Conditioning<Scalar> with_text = cond;
      with_text.drop_text = false;
      e_text = predict_noise(z_t, t, with_text);
    }
    Tensor3<Scalar> e_uncond = zero;
    if (scales.s_text != 0.0) {
      Conditioning<Scalar> uncond = cond;
      uncond.drop_image = true;
      uncond.drop_text = true;
      e_uncond = predict_noise(z_t, t, uncond);
    }
    return cfg_combine(e_only, e_text, e_uncond, scales);
  }

 protected:
  void check_shape(const Tensor3<Scalar>& z_t, const Conditioning<Scalar>& cond) const {
    const Shape want = descriptor().latent_shape;
    if (want != Shape{} && z_t.shape() != want)
      throw ShapeError("predict_noise: backend expects " + to_string(want) + ", got " + to_string(z_t.shape()));
    if (cond.image.size() != 0) require_same_shape(z_t, cond.image, "predict_noise");
    if (cond.mask.size() != 0) require_mask_fits(z_t, cond.mask, "predict_noise");
  }
};

/// Maps pixel images to latents and back.
class Codec {
 public:
  virtual ~Codec() = default;
  virtual Tensor3<float> encode(const Tensor3<float>& pixels) const = 0;
  virtual Tensor3<float> decode(const Tensor3<float>& latent) const = 0;
  /// Pixel-to-latent spatial downsampling factor per axis.
  virtual int scale_factor() const = 0;
};

class IdentityCodec final : public Codec {
 public:
  Tensor3<float> encode(const Tensor3<float>& pixels) const override { return pixels; }
  Tensor3<float> decode(const Tensor3<float>& latent) const override { return latent; }
  int scale_factor() const override { return 1; }
};

template <typename Scalar>
class ZeroBackend final : public DenoiserBackend<Scalar> {
 public:
  BackendDescriptor descriptor() const override { return {.name = "zero"}; }
  Tensor3<Scalar> predict_noise(const Tensor3<Scalar>& z_t, int, const Conditioning<Scalar>& cond) const override {
    this->check_shape(z_t, cond);
    return Tensor3<Scalar>(z_t.shape());
  }
};

namespace detail {

/// Posterior mean E[z0 | z_t] for an elementwise N(mu, sigma^2) prior.
inline double gaussian_posterior_mean(double z, double mu, double sigma, double abar) {
  const double s = std::sqrt(abar);
  const double var = sigma * sigma;
  return mu + (var * s / (abar * var + 1.0 - abar)) * (z - s * mu);
}

/// Noise implied by a clean estimate; 0 at abar = 1.
inline double implied_noise(double z, double z0, double abar) {
  if (abar >= 1.0) return 0.0;
  return (z - std::sqrt(abar) * z0) / std::sqrt(1.0 - abar);
}

}  // namespace detail

/// Exact minimum-MSE noise predictor for the prior N(mu, sigma^2 I).
/// Ignores conditioning.
template <typename Scalar>
class AnalyticGaussianBackend : public DenoiserBackend<Scalar> {
 public:
  AnalyticGaussianBackend(double mu, double sigma, NoiseSchedule sched)
      : mu_scalar_(mu), sigma_(sigma), sched_(std::move(sched)) {
    if (!(sigma > 0.0)) throw ConfigError("analytic gaussian: sigma must be positive");
  }
  AnalyticGaussianBackend(Tensor3<Scalar> mu, double sigma, NoiseSchedule sched)
      : AnalyticGaussianBackend(0.0, sigma, std::move(sched)) {
    mu_tensor_ = std::move(mu);
  }

  BackendDescriptor descriptor() const override {
    BackendDescriptor d{.name = "analytic-gaussian"};
    if (mu_tensor_) d.latent_shape = mu_tensor_->shape();
    return d;
  }

  Tensor3<Scalar> predict_noise(const Tensor3<Scalar>& z_t, int t, const Conditioning<Scalar>& cond) const override {
    this->check_shape(z_t, cond);
    return implied_noise(z_t, t, clean_estimate(z_t, t));
  }

  /// Elementwise posterior mean E[z0 | z_t].
  Tensor3<Scalar> clean_estimate(const Tensor3<Scalar>& z_t, int t) const {
    sched_.check_step(t, "analytic gaussian");
    const double abar = sched_.alpha_bar[t];
    Tensor3<Scalar> out(z_t.shape());
    for (Eigen::Index i = 0; i < out.size(); ++i)
      out.values()[i] = Scalar(detail::gaussian_posterior_mean(double(z_t.values()[i]), mu(i), sigma_, abar));
    return out;
  }

  Tensor3<Scalar> implied_noise(const Tensor3<Scalar>& z_t, int t, const Tensor3<Scalar>& z0) const {
    const double abar = sched_.alpha_bar[t];
    Tensor3<Scalar> out(z_t.shape());
    for (Eigen::Index i = 0; i < out.size(); ++i)
      out.values()[i] = Scalar(detail::implied_noise(double(z_t.values()[i]), double(z0.values()[i]), abar));
    return out;
  }

  double sigma() const { return sigma_; }
  const NoiseSchedule& schedule() const { return sched_; }

 private:
  double mu(Eigen::Index i) const { return mu_tensor_ ? double(mu_tensor_->values()[i]) : mu_scalar_; }

  double mu_scalar_;
  std::optional<Tensor3<Scalar>> mu_tensor_;
  double sigma_;
  NoiseSchedule sched_;
};

/// Grid-aware toy prior. On tiled inputs, the clean estimate of every unknown
/// pixel is pulled toward the mean of the same pixel across the quadrants in
/// which it is unknown:
///   z0' = local + strength * (mean - local).
/// Known pixels and untiled inputs follow the analytic Gaussian rule.
template <typename Scalar>
class ConsensusBackend final : public DenoiserBackend<Scalar> {
 public:
  ConsensusBackend(double strength, double mu, double sigma, NoiseSchedule sched)
      : strength_(strength), local_(mu, sigma, std::move(sched)) {
    if (!(strength > 0.0 && strength <= 1.0)) throw ConfigError("consensus: strength must lie in (0, 1]");
  }

  BackendDescriptor descriptor() const override { return {.name = "consensus", .grid_aware = true}; }

  Tensor3<Scalar> predict_noise(const Tensor3<Scalar>& z_t, int t, const Conditioning<Scalar>& cond) const override {
    this->check_shape(z_t, cond);
    return local_.implied_noise(z_t, t, clean_estimate(z_t, t, cond));
  }

  Tensor3<Scalar> clean_estimate(const Tensor3<Scalar>& z_t, int t, const Conditioning<Scalar>& cond) const {
    Tensor3<Scalar> z0 = local_.clean_estimate(z_t, t);
    if (!cond.tiled) return z0;
    if (z_t.height() % 2 != 0 || z_t.width() % 2 != 0) throw ShapeError("consensus: tiled input must have even size");

    const Conditioning<Scalar> eff = cond.effective();
    const bool have_mask = eff.mask.size() != 0;
    const int h = z_t.height() / 2, w = z_t.width() / 2, c = z_t.channels();
    const std::array<int, 4> oy{0, 0, h, h}, ox{0, w, 0, w};
    const Tensor3<Scalar> local = z0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        std::array<bool, 4> unknown{};
        int count = 0;
        for (int q = 0; q < 4; ++q) {
          unknown[q] = !have_mask || eff.mask(oy[q] + y, ox[q] + x) < Scalar(0.5);
          count += unknown[q];
        }
        if (count < 2) continue;
        for (int k = 0; k < c; ++k) {
          std::array<Scalar, 4> v{};
          for (int q = 0; q < 4; ++q) v[q] = unknown[q] ? local(oy[q] + y, ox[q] + x, k) : Scalar(0);
          // Pairwise sum keeps the mean exact when all members are equal.
          const Scalar mean = ((v[0] + v[1]) + (v[2] + v[3])) / Scalar(count);
          for (int q = 0; q < 4; ++q) {
            if (!unknown[q]) continue;
            const Scalar l = local(oy[q] + y, ox[q] + x, k);
            z0(oy[q] + y, ox[q] + x, k) = l + Scalar(strength_) * (mean - l);
          }
        }
      }
    return z0;
  }

  double strength() const { return strength_; }

 private:
  double strength_;
  AnalyticGaussianBackend<Scalar> local_;
};

}  // namespace gridfill
