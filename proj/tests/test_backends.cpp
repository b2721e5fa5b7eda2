#include <doctest.h>

#include <cmath>

#include "gridfill/backend.hpp"

using namespace gridfill;

namespace {

NoiseSchedule tiny_schedule() {
  NoiseSchedule s;
  s.num_train_steps = 2;
  s.alpha_bar.resize(3);
  s.alpha_bar << 1.0, 0.5, 0.25;
  return s;
}

Conditioning<double> all_unknown(Shape shape, bool tiled) {
  Conditioning<double> c;
  c.image = Tensor3<double>(shape);
  c.mask = Mask<double>::Zero(shape.height, shape.width);
  c.tiled = tiled;
  return c;
}

/// Grid whose quadrants hold the given constants.
Tensor3<double> quadrant_grid(int h, int w, std::array<double, 4> values) {
  Tensor3<double> g(Shape{2 * h, 2 * w, 1});
  for (int y = 0; y < 2 * h; ++y)
    for (int x = 0; x < 2 * w; ++x) g(y, x, 0) = values[(y >= h) * 2 + (x >= w)];
  return g;
}

double quadrant_variance(const Tensor3<double>& g) {
  const int h = g.height() / 2, w = g.width() / 2;
  double total = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::array<double, 4> v{g(y, x, 0), g(y, x + w, 0), g(y + h, x, 0), g(y + h, x + w, 0)};
      const double m = (v[0] + v[1] + v[2] + v[3]) / 4;
      for (double e : v) total += (e - m) * (e - m) / 4;
    }
  return total / (h * w);
}

}  // namespace

TEST_CASE("zero backend predicts zeros") {
  ZeroBackend<float> zero;
  Rng rng(1);
  const auto z = randn<float>({3, 3, 4}, rng);
  Conditioning<float> cond;
  CHECK((zero.predict_noise(z, 10, cond).values() == 0.0f).all());
}

TEST_CASE("analytic Gaussian prediction matches the closed-form posterior") {
  const NoiseSchedule s = tiny_schedule();
  AnalyticGaussianBackend<double> gauss(0.0, 1.0, s);
  const Tensor3<double> z = Tensor3<double>::Constant({1, 1, 1}, 1.3);
  // abar = 0.5: E[z0|z] = sqrt(.5) z, eps = (z - .5 z) / sqrt(.5) = z / sqrt(2).
  const double eps = gauss.predict_noise(z, 1, all_unknown(z.shape(), false)).values()[0];
  CHECK(eps == doctest::Approx(1.3 / std::sqrt(2.0)).epsilon(1e-12));

  SUBCASE("abar = 1 returns zero") {
    CHECK(gauss.predict_noise(z, 0, all_unknown(z.shape(), false)).values()[0] == 0.0);
  }
  SUBCASE("uninformative prior predicts no noise") {
    AnalyticGaussianBackend<double> wide(0.0, 1e6, s);
    CHECK(std::abs(wide.predict_noise(z, 2, all_unknown(z.shape(), false)).values()[0]) < 1e-5);
  }
  CHECK_THROWS_AS(AnalyticGaussianBackend<double>(0.0, 0.0, s), ConfigError);
  CHECK_THROWS_AS(AnalyticGaussianBackend<double>(0.0, -1.0, s), ConfigError);
}

TEST_CASE("analytic Gaussian prediction beats constant predictors in MSE") {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000);
  const double mu = 0.4, sigma = 0.7;
  AnalyticGaussianBackend<double> gauss(mu, sigma, s);
  Rng rng(77);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> step(1, 1000);
  const int n = 10000;
  double mse_model = 0.0;
  std::array<double, 4> constants{0.0, 0.1, -0.2, 0.5};
  std::array<double, 4> mse_const{};
  for (int i = 0; i < n; ++i) {
    const int t = step(rng);
    const double z0 = mu + sigma * normal(rng), eps = normal(rng);
    const Tensor3<double> zt = Tensor3<double>::Constant({1, 1, 1}, s.signal(t) * z0 + s.noise(t) * eps);
    const double pred = gauss.predict_noise(zt, t, all_unknown(zt.shape(), false)).values()[0];
    mse_model += (pred - eps) * (pred - eps) / n;
    for (std::size_t c = 0; c < constants.size(); ++c) mse_const[c] += (constants[c] - eps) * (constants[c] - eps) / n;
  }
  for (double m : mse_const) CHECK(mse_model < m);
}

TEST_CASE("consensus backend pulls quadrants toward their shared mean") {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000);
  const int t = 300;
  ConsensusBackend<double> consensus(0.5, 2.0, 1.0, s);
  AnalyticGaussianBackend<double> gauss(2.0, 1.0, s);
  const Tensor3<double> grid = quadrant_grid(2, 2, {0.0, 0.0, 4.0, 4.0});
  const auto cond = all_unknown(grid.shape(), true);

  const auto local = gauss.clean_estimate(grid, t);
  const auto pulled = consensus.clean_estimate(grid, t, cond);
  const double grid_mean = local.values().mean();
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double before = std::abs(local(y, x, 0) - grid_mean);
      const double after = std::abs(pulled(y, x, 0) - grid_mean);
      CHECK(after == doctest::Approx(0.5 * before));
    }
  // Quadrants below the mean get a higher clean estimate, hence lower noise.
  const auto e_consensus = consensus.predict_noise(grid, t, cond);
  const auto e_local = gauss.predict_noise(grid, t, cond);
  CHECK(e_consensus(0, 0, 0) < e_local(0, 0, 0));
  CHECK(e_consensus(3, 3, 0) > e_local(3, 3, 0));
}

TEST_CASE("consensus strength limits and symmetry") {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000);
  CHECK_THROWS_AS(ConsensusBackend<double>(0.0, 0.0, 1.0, s), ConfigError);
  CHECK_THROWS_AS(ConsensusBackend<double>(1.5, 0.0, 1.0, s), ConfigError);

  Rng rng(5);
  const Tensor3<double> grid = randn<double>({6, 8, 3}, rng);
  const auto cond = all_unknown(grid.shape(), true);

  SUBCASE("full strength equalizes unknown quadrants") {
    ConsensusBackend<double> full(1.0, 0.0, 1.0, s);
    CHECK(quadrant_variance(full.clean_estimate(grid, 500, cond)) < 1e-20);
  }
  SUBCASE("identical quadrants reduce to the analytic backend exactly") {
    Tensor3<double> sym(grid.shape());
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x)
        for (int c = 0; c < 3; ++c) sym(y, x, c) = grid(y % 3, x % 4, c);
    ConsensusBackend<double> consensus(0.7, 0.1, 0.9, s);
    AnalyticGaussianBackend<double> gauss(0.1, 0.9, s);
    CHECK(consensus.predict_noise(sym, 400, cond) == gauss.predict_noise(sym, 400, cond));
  }
  SUBCASE("untiled input follows the analytic backend") {
    ConsensusBackend<double> consensus(0.7, 0.1, 0.9, s);
    AnalyticGaussianBackend<double> gauss(0.1, 0.9, s);
    auto plain = cond;
    plain.tiled = false;
    CHECK(consensus.predict_noise(grid, 400, plain) == gauss.predict_noise(grid, 400, plain));
  }
  SUBCASE("cross-quadrant variance decreases with strength") {
    double previous = quadrant_variance(AnalyticGaussianBackend<double>(0.0, 1.0, s).clean_estimate(grid, 500));
    for (double strength : {0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
      ConsensusBackend<double> c(strength, 0.0, 1.0, s);
      const double v = quadrant_variance(c.clean_estimate(grid, 500, cond));
      CHECK(v < previous);
      previous = v;
    }
  }
}

TEST_CASE("consensus leaves known pixels on the analytic rule") {
  const NoiseSchedule s = make_schedule(ScheduleKind::linear, 1000);
  ConsensusBackend<double> consensus(1.0, 0.0, 1.0, s);
  AnalyticGaussianBackend<double> gauss(0.0, 1.0, s);
  const Tensor3<double> grid = quadrant_grid(2, 2, {0.0, 1.0, 2.0, 3.0});
  auto cond = all_unknown(grid.shape(), true);
  cond.mask.block(0, 0, 2, 2).setOnes();  // top-left quadrant known
  const auto pulled = consensus.clean_estimate(grid, 200, cond);
  const auto local = gauss.clean_estimate(grid, 200);
  CHECK(pulled(0, 0, 0) == local(0, 0, 0));
  const double mean_unknown = (local(0, 2, 0) + local(2, 0, 0) + local(2, 2, 0)) / 3.0;
  CHECK(pulled(0, 2, 0) == doctest::Approx(mean_unknown));
  CHECK(pulled(3, 3, 0) == doctest::Approx(mean_unknown));
}

TEST_CASE("guided prediction skips branches with zero weight") {
  struct Recorder final : DenoiserBackend<double> {
    BackendDescriptor descriptor() const override { return {.name = "recorder"}; }
    Tensor3<double> predict_noise(const Tensor3<double>& z, int, const Conditioning<double>& c) const override {
      const auto eff = c.effective();
      calls.push_back(c.drop_image ? 'u' : (c.drop_text ? 'i' : 't'));
      const double v = c.drop_image ? 0.0 : (c.drop_text ? 1.0 : 2.0);
      if (c.drop_image) CHECK((eff.mask == 0.0).all());
      return Tensor3<double>::Constant(z.shape(), v);
    }
    mutable std::string calls;
  } rec;
  const Tensor3<double> z({1, 1, 1});
  auto cond = all_unknown(z.shape(), false);
  cond.mask.setOnes();
  CHECK(rec.predict_guided(z, 5, cond, {2.0, 3.0}).values()[0] == 6.0);
  CHECK(rec.calls == "itu");
  rec.calls.clear();
  CHECK(rec.predict_guided(z, 5, cond, {1.5, 0.0}).values()[0] == 2.5);
  CHECK(rec.calls == "it");
}
