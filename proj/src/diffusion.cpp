#include "gridfill/diffusion.hpp"

#include <cmath>
#include <numbers>

namespace gridfill {

void NoiseSchedule::check_step(int t, const char* what) const {
  if (t < 0 || t > num_train_steps)
    throw ConfigError(std::string(what) + ": step " + std::to_string(t) + " outside [0, " +
                      std::to_string(num_train_steps) + "]");
}

NoiseSchedule make_schedule(ScheduleKind kind, int num_train_steps, double beta_start, double beta_end) {
  if (num_train_steps < 2) throw ConfigError("make_schedule: need at least 2 train steps");
  NoiseSchedule s;
  s.kind = kind;
  s.num_train_steps = num_train_steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.alpha_bar.resize(num_train_steps + 1);
  s.alpha_bar[0] = 1.0;

  if (kind == ScheduleKind::linear) {
    if (!(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0))
      throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1");
    const Eigen::ArrayXd betas = Eigen::ArrayXd::LinSpaced(num_train_steps, beta_start, beta_end);
    for (int t = 1; t <= num_train_steps; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - betas[t - 1]);
  } else {
    constexpr double offset = 0.008;
    auto f = [&](int t) {
      const double c = std::cos((double(t) / num_train_steps + offset) / (1.0 + offset) * std::numbers::pi / 2);
      return c * c;
    };
    const double f0 = f(0);
    for (int t = 1; t <= num_train_steps; ++t) {
      const double beta = std::min(1.0 - (f(t) / f0) / (f(t - 1) / f0), 0.999);
      s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
    }
  }
  return s;
}

std::vector<int> ddim_timesteps(int t_start, int num_steps) {
  std::vector<int> ts;
  ts.reserve(num_steps + 1);
  for (int k = 0; k <= num_steps; ++k) {
    const int t = int(std::lround(double(t_start) * (num_steps - k) / num_steps));
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }
  return ts;
}

}  // namespace gridfill
