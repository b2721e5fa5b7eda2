#pragma once

#include <exception>
#include <string>

#include "gridfill/backend.hpp"

namespace gridfill {

/// DDIM sampling from t_start down to 0 with known-region enforcement before
/// every backend call. The conditioning image doubles as the known latent and
/// its mask selects what is enforced. Fresh enforcement noise is drawn from rng
/// at every step, so the result is a pure function of the inputs and the seed.
template <typename Scalar>
Tensor3<Scalar> sample(const DenoiserBackend<Scalar>& backend, Tensor3<Scalar> z, const Conditioning<Scalar>& cond,
                       const GuidanceScales& scales, int num_steps, int t_start, const NoiseSchedule& sched, Rng& rng) {
  if (num_steps < 1) throw ConfigError("sample: num_steps must be at least 1");
  sched.check_step(t_start, "sample");
  require_same_shape(z, cond.image, "sample");
  require_mask_fits(z, cond.mask, "sample");

  const std::vector<int> ts = ddim_timesteps(t_start, num_steps);
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const Tensor3<Scalar> eps = randn<Scalar>(z.shape(), rng);
    z = enforce_known(z, cond.image, cond.mask, eps, ts[k], sched);
    Tensor3<Scalar> eps_hat;
    try {
      eps_hat = backend.predict_guided(z, ts[k], cond, scales);
    } catch (const std::exception& e) {
      throw BackendError("sampling step " + std::to_string(k) + " (t=" + std::to_string(ts[k]) + "): " + e.what());
    }
    z = ddim_step(z, eps_hat, ts[k], ts[k + 1], sched);
  }
  return blend(cond.mask, cond.image, z);
}

}  // namespace gridfill
