#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gridfill/field.hpp"

using namespace gridfill;

namespace {

double oracle_softplus(double x) { return std::log(1.0 + std::exp(x)); }
double oracle_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1 - p)); }

RadianceField<double> random_field(Eigen::Vector3i res, Rng& rng, double density_sd = 2.0) {
  RadianceField<double> f(res, Box3<double>(Vec3<double>(-1, -1, -1), Vec3<double>(1, 1, 1)), Background::white);
  std::normal_distribution<double> n;
  for (Eigen::Index i = 0; i < f.cell_count(); ++i) {
    f.density_raw[i] = density_sd * n(rng);
    for (int c = 0; c < 3; ++c) f.color_raw(i, c) = 1.5 * n(rng);
  }
  return f;
}

RayBatch<double> random_rays(int k, Rng& rng) {
  std::normal_distribution<double> n;
  RayBatch<double> rays;
  rays.origins.resize(k, 3);
  rays.directions.resize(k, 3);
  rays.near = 0.1;
  rays.far = 3.0;
  for (int i = 0; i < k; ++i) {
    Vec3<double> o(n(rng), n(rng), n(rng));
    o = o.normalized() * 1.6;
    Vec3<double> target(0.3 * n(rng), 0.3 * n(rng), 0.3 * n(rng));
    rays.origins.row(i) = o.transpose().array();
    rays.directions.row(i) = (target - o).normalized().transpose().array();
  }
  return rays;
}

Camera<double> test_camera(int w, int h) {
  Camera<double> cam;
  cam.width = w;
  cam.height = h;
  cam.fx = cam.fy = 0.9 * w;
  cam.cx = w / 2.0;
  cam.cy = h / 2.0;
  cam.camera_to_world = look_at<double>(Vec3<double>(0.4, 0.3, 2.2), Vec3<double>(0, 0, 0));
  return cam;
}

}  // namespace

TEST_CASE("field_query interpolates raw values then activates") {
  RadianceField<double> f({2, 3, 2}, Box3<double>(Vec3<double>(0, 0, 0), Vec3<double>(2, 3, 2)), Background::black);
  SUBCASE("constant grids give constant output") {
    f.density_raw.setConstant(0.3);
    f.color_raw.setConstant(-0.4);
    for (const Vec3<double>& p : {Vec3<double>(0.1, 0.2, 1.9), Vec3<double>(1.3, 2.7, 0.5), Vec3<double>(2, 3, 2)}) {
      const auto s = field_query(f, p);
      CHECK(s.density == doctest::Approx(oracle_softplus(0.3)).epsilon(1e-14));
      CHECK(s.color[1] == doctest::Approx(oracle_sigmoid(-0.4)).epsilon(1e-14));
    }
  }
  Rng rng(3);
  std::normal_distribution<double> n;
  for (Eigen::Index i = 0; i < f.cell_count(); ++i) {
    f.density_raw[i] = n(rng);
    for (int c = 0; c < 3; ++c) f.color_raw(i, c) = n(rng);
  }
  SUBCASE("voxel centres return their own value") {
    const auto s = field_query(f, f.cell_center(1, 2, 0));
    CHECK(s.density == doctest::Approx(oracle_softplus(f.density_raw[f.index(1, 2, 0)])).epsilon(1e-14));
    CHECK(s.color[2] == doctest::Approx(oracle_sigmoid(f.color_raw(f.index(1, 2, 0), 2))).epsilon(1e-14));
  }
  SUBCASE("midpoint between centres averages raw values") {
    // Centres of cells (0,1,1) and (1,1,1) are at x = 0.5 and 1.5.
    const auto s = field_query(f, Vec3<double>(1.0, 1.5, 1.5));
    const double raw = 0.5 * (f.density_raw[0 + 2 * (1 + 3 * 1)] + f.density_raw[1 + 2 * (1 + 3 * 1)]);
    CHECK(s.density == doctest::Approx(oracle_softplus(raw)).epsilon(1e-14));
    const double raw_c = 0.5 * (f.color_raw(0 + 2 * (1 + 3 * 1), 0) + f.color_raw(1 + 2 * (1 + 3 * 1), 0));
    CHECK(s.color[0] == doctest::Approx(oracle_sigmoid(raw_c)).epsilon(1e-14));
  }
  SUBCASE("general point against an independent trilinear oracle") {
    const Vec3<double> p(0.8, 1.1, 1.2);
    // Continuous index u = p / cell - 0.5 with cell size 1.
    const double ux = 0.3, uy = 0.6, uz = 0.7;
    double raw = 0;
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) {
          const double w = (dx ? ux : 1 - ux) * (dy ? uy : 1 - uy) * (dz ? uz : 1 - uz);
          raw += w * f.density_raw[dx + 2 * ((dy) + 3 * dz)];
        }
    CHECK(field_query(f, p).density == doctest::Approx(oracle_softplus(raw)).epsilon(1e-12));
  }
  SUBCASE("outside the bounds is empty background") {
    const auto s = field_query(f, Vec3<double>(-0.01, 1, 1));
    CHECK(s.density == 0.0);
    CHECK(s.color == Vec3<double>::Zero());
  }
}

TEST_CASE("empty space renders the background exactly") {
  RadianceField<double> f({4, 4, 4}, Box3<double>(Vec3<double>(-1, -1, -1), Vec3<double>(1, 1, 1)), Background::white,
                          -1e4);
  Rng rng(1);
  const auto rays = random_rays(50, rng);
  const auto r = render_rays(f, rays, 32);
  CHECK((r.rgb == 1.0).all());
  CHECK((r.opacity == 0.0).all());
  CHECK_THROWS_AS(render_rays(f, rays, 1), ConfigError);

  const auto view = render_view(f, test_camera(8, 6), 16, 0.1, 4.0);
  CHECK(view.image.shape() == Shape{6, 8, 3});
  CHECK((view.image.values() == 1.0).all());
}

TEST_CASE("homogeneous medium opacity follows Beer-Lambert") {
  const double sigma = 1.0, length = 2.0;
  RadianceField<double> f({4, 4, 4}, Box3<double>(Vec3<double>(0, -1, -1), Vec3<double>(length, 1, 1)),
                          Background::black, std::log(std::exp(sigma) - 1.0));
  RayBatch<double> rays;
  rays.origins = Rows3<double>::Zero(1, 3);
  rays.directions = Rows3<double>(1, 3);
  rays.directions << 1, 0, 0;
  rays.near = 0.0;
  rays.far = length;
  Rng rng(2);
  for (Rng* r : {static_cast<Rng*>(nullptr), &rng}) {
    const double opacity = render_rays(f, rays, 256, r).opacity[0];
    const double expected = 1.0 - std::exp(-sigma * length);
    CHECK(std::abs(opacity - expected) <= 0.01 * expected);
    CHECK(std::abs(opacity - expected) <= 1.0 / 256);
  }
}

TEST_CASE("opaque slab renders its color at its distance") {
  // Raw density is -R outside x in [2, 3] and +R inside; the interpolated
  // density becomes positive exactly at the cell boundary x = 2.
  RadianceField<double> f({40, 1, 1}, Box3<double>(Vec3<double>(0, -1, -1), Vec3<double>(4, 1, 1)),
                          Background::black);
  const Vec3<double> color(0.2, 0.6, 0.9);
  for (int x = 0; x < 40; ++x) {
    f.density_raw[x] = (x >= 20 && x < 30) ? 1e4 : -1e4;
    for (int c = 0; c < 3; ++c) f.color_raw(x, c) = logit(color[c]);
  }
  RayBatch<double> rays;
  rays.origins = Rows3<double>::Zero(1, 3);
  rays.directions = Rows3<double>(1, 3);
  rays.directions << 1, 0, 0;
  rays.near = 0.0;
  rays.far = 4.0;
  const int samples = 400;
  const auto r = render_rays(f, rays, samples);
  for (int c = 0; c < 3; ++c) CHECK(r.rgb(0, c) == doctest::Approx(color[c]).epsilon(1e-6));
  CHECK(std::abs(r.depth[0] - 2.0) <= 4.0 / samples);
}

TEST_CASE("ray weights are non-negative and sum to at most one") {
  Rng rng(11);
  const auto f = random_field({5, 4, 6}, rng, 4.0);
  std::uniform_real_distribution<double> u(0, 1);
  int checked = 0;
  for (int batch = 0; batch < 20; ++batch) {
    const auto rays = random_rays(500, rng);
    const auto offsets = stratified_offsets(rays.size(), 48, &rng);
    for (Eigen::Index i = 0; i < rays.size(); ++i) {
      std::vector<detail::SampleRecord> tr(48);
      Vec3<double> rgb;
      double depth, opacity, T_end;
      detail::render_ray<double>(f, rays.origins.row(i).transpose(), rays.directions.row(i).transpose(), rays.near,
                                 rays.far, &offsets[i * 48], 48, rgb, depth, opacity, tr.data(), &T_end);
      double sum = 0;
      bool ok = true;
      for (int s = 0; s < 48; ++s) {
        const double w = tr[s].transmittance - (s + 1 < 48 ? tr[s + 1].transmittance : T_end);
        ok &= w >= 0;
        sum += w;
      }
      ok &= sum <= 1.0 + 1e-12 && opacity <= 1.0 && opacity >= 0.0;
      ok &= (rgb.array() >= 0.0).all() && (rgb.array() <= 1.0).all();
      if (!ok) FAIL_CHECK("bad weights on ray " << i);
      ++checked;
    }
  }
  CHECK(checked == 10000);
}

TEST_CASE("rendering is translation-equivariant") {
  Rng rng(4);
  auto f = random_field({6, 6, 6}, rng);
  const auto cam = test_camera(12, 10);
  const auto a = render_view(f, cam, 32, 0.5, 4.0);
  const Vec3<double> shift(0.3, -0.7, 1.1);
  f.bounds.translate(shift);
  auto moved = cam;
  moved.camera_to_world.topRightCorner<3, 1>() += shift;
  const auto b = render_view(f, moved, 32, 0.5, 4.0);
  CHECK((a.image.values() - b.image.values()).abs().maxCoeff() < 1e-6);
  CHECK((a.depth - b.depth).abs().maxCoeff() < 1e-6);
}

TEST_CASE("near override removes a floater at the camera") {
  RadianceField<double> f({16, 16, 16}, Box3<double>(Vec3<double>(-1, -1, -1), Vec3<double>(1, 1, 1)),
                          Background::white, -20.0);
  // Dense blob around the camera position.
  const Vec3<double> eye(0, 0, 0.8);
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        if ((f.cell_center(x, y, z) - eye).norm() < 0.2) f.density_raw[f.index(x, y, z)] = 20.0;
  Camera<double> cam = test_camera(8, 8);
  cam.camera_to_world = look_at<double>(eye, Vec3<double>(0, 0, -1));
  const auto with = render_view(f, cam, 64, 0.0, 1.8);
  const auto without = render_view(f, cam, 64, 0.0, 1.8, std::optional<double>(0.3));
  CHECK(with.opacity.minCoeff() > 0.5);
  CHECK(without.opacity.maxCoeff() < 1e-6);
}

TEST_CASE("analytic gradients match central finite differences") {
  Rng rng(2024);
  std::uniform_int_distribution<int> res(1, 3), nrays(1, 4), nsamp(3, 8);
  double worst = 0;
  for (int config = 0; config < 100; ++config) {
    auto f = random_field({res(rng), res(rng), res(rng)}, rng, 1.0);
    f.background = config % 2 ? Background::white : Background::black;
    const auto rays = random_rays(nrays(rng), rng);
    const int samples = nsamp(rng);
    const auto offsets = stratified_offsets(rays.size(), samples, &rng);
    Rows3<double> target(rays.size(), 3);
    std::uniform_real_distribution<double> u(0, 1);
    for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = u(rng);
    Eigen::ArrayXd weights = Eigen::ArrayXd::Random(rays.size()).abs() + 0.5;
    Eigen::ArrayXd depth_target = Eigen::ArrayXd::Random(rays.size()) + 1.5;
    const DepthObjective<double> depth_obj = [&](const Eigen::ArrayXd& d) {
      const Eigen::ArrayXd r = d - depth_target;
      return std::pair<double, Eigen::ArrayXd>(0.3 * r.square().sum(), 0.6 * r);
    };
    const LossWeights lw{1.0, 0.1};
    auto loss = [&](const RadianceField<double>& g) {
      return loss_and_gradient(g, rays, target, weights, lw, samples, offsets, nullptr, depth_obj).loss;
    };
    FieldGradient<double> grad(f);
    loss_and_gradient(f, rays, target, weights, lw, samples, offsets, &grad, depth_obj);

    const double h = 1e-6;
    auto compare = [&](double analytic, double& param, RadianceField<double>& g) {
      const double keep = param;
      param = keep + h;
      const double up = loss(g);
      param = keep - h;
      const double down = loss(g);
      param = keep;
      const double numeric = (up - down) / (2 * h);
      const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / scale);
    };
    for (Eigen::Index i = 0; i < f.cell_count(); ++i) {
      compare(grad.density[i], f.density_raw[i], f);
      for (int c = 0; c < 3; ++c) compare(grad.color(i, c), f.color_raw(i, c), f);
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("single voxel, single ray gradient") {
  RadianceField<double> f({1, 1, 1}, Box3<double>(Vec3<double>(-1, -1, -1), Vec3<double>(1, 1, 1)), Background::white,
                          0.4, -0.3);
  RayBatch<double> rays;
  rays.origins = Rows3<double>(1, 3);
  rays.origins << 0, 0, 3;
  rays.directions = Rows3<double>(1, 3);
  rays.directions << 0, 0, -1;
  rays.near = 1.0;
  rays.far = 5.0;
  Rows3<double> target(1, 3);
  target << 0.1, 0.8, 0.35;
  const Eigen::ArrayXd w = Eigen::ArrayXd::Ones(1);
  const auto offsets = stratified_offsets(1, 16, nullptr);
  FieldGradient<double> grad(f);
  loss_and_gradient(f, rays, target, w, LossWeights{}, 16, offsets, &grad);
  auto loss = [&] { return loss_and_gradient(f, rays, target, w, LossWeights{}, 16, offsets, nullptr).loss; };
  const double h = 1e-6;
  f.density_raw[0] += h;
  const double up = loss();
  f.density_raw[0] -= 2 * h;
  const double down = loss();
  f.density_raw[0] += h;
  CHECK(grad.density[0] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-4));
}

TEST_CASE("train_step at the stationary point leaves the field unchanged") {
  Rng rng(8);
  auto f = random_field({3, 3, 3}, rng);
  const auto rays = random_rays(20, rng);
  Rng jitter(5), same(5);
  const auto offsets = stratified_offsets(rays.size(), 16, &same);
  const auto ev = loss_and_gradient(f, rays, Rows3<double>::Zero(20, 3), Eigen::ArrayXd::Ones(20), LossWeights{}, 16,
                                    offsets, nullptr);
  FieldOptimizer<double> opt(f, OptimizerConfig{});
  const auto before = f;
  FieldGradient<double> grad(f);
  loss_and_gradient(f, rays, ev.render.rgb, Eigen::ArrayXd::Ones(20), LossWeights{}, 16, offsets, &grad);
  CHECK(std::sqrt(grad.squared_norm()) < 1e-8);
  const auto step = train_step(f, opt, rays, ev.render.rgb, Eigen::ArrayXd::Ones(20), LossWeights{}, 16, jitter);
  CHECK(step.loss == 0.0);
  CHECK((f.density_raw == before.density_raw).all());
  CHECK((f.color_raw == before.color_raw).all());
}

TEST_CASE("train_step reduces the loss and rejects non-finite losses") {
  Rng rng(9);
  auto f = random_field({4, 4, 4}, rng, 0.5);
  const auto rays = random_rays(64, rng);
  Rows3<double> target = Rows3<double>::Constant(64, 3, 0.25);
  FieldOptimizer<double> opt(f, OptimizerConfig{.learning_rate = 20.0});
  const Eigen::ArrayXd w = Eigen::ArrayXd::Ones(64);
  const double first = train_step(f, opt, rays, target, w, LossWeights{}, 16, rng).loss;
  double last = first;
  for (int i = 0; i < 100; ++i) last = train_step(f, opt, rays, target, w, LossWeights{}, 16, rng).loss;
  CHECK(last < 0.5 * first);

  const auto before = f;
  target(3, 1) = std::nan("");
  CHECK_THROWS_AS(train_step(f, opt, rays, target, w, LossWeights{}, 16, rng), NumericalError);
  CHECK((f.density_raw == before.density_raw).all());
  CHECK_THROWS_AS(FieldOptimizer<double>(f, OptimizerConfig{.learning_rate = 0.0}), ConfigError);
}

TEST_CASE("checkpoint roundtrip is bit-exact") {
  Rng rng(12);
  const auto f = random_field({3, 5, 2}, rng).cast<float>();
  const auto path = (std::filesystem::temp_directory_path() / "gridfill_test_field.gfv").string();
  save_field(f, path);
  const auto g = load_field(path);
  CHECK(g.resolution == f.resolution);
  CHECK(g.bounds.min() == f.bounds.min());
  CHECK(g.bounds.max() == f.bounds.max());
  CHECK(g.background == f.background);
  CHECK((g.density_raw == f.density_raw).all());
  CHECK((g.color_raw == f.color_raw).all());

  {
    std::ifstream in(path, std::ios::binary);
    char head[4];
    in.read(head, 4);
    CHECK(std::string(head, 4) == "GFV1");
  }
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  CHECK_THROWS_AS(load_field(path), DataError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE0000";
  }
  CHECK_THROWS_AS(load_field(path), DataError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_field(path), DataError);
}

TEST_CASE("camera validation and projection") {
  auto cam = test_camera(16, 12);
  cam.validate();
  const Vec3<double> d = cam.pixel_direction(5, 7);
  const auto px = cam.project(cam.origin() + 2.5 * d);
  REQUIRE(px.has_value());
  CHECK((*px)(0) == doctest::Approx(5.5));
  CHECK((*px)(1) == doctest::Approx(7.5));
  CHECK_FALSE(cam.project(cam.origin() - d).has_value());
  cam.camera_to_world(0, 0) = 1.5;
  CHECK_THROWS_AS(cam.validate(), ConfigError);
}
