#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "gridfill/parallel.hpp"
#include "gridfill/tensor.hpp"

namespace gridfill {

enum class Background { white, black };

inline double background_value(Background b) { return b == Background::white ? 1.0 : 0.0; }
Background parse_background(const std::string& name);
std::string to_string(Background b);

template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

template <typename Scalar>
using Rows3 = Eigen::Array<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;

template <typename Scalar>
using Box3 = Eigen::AlignedBox<Scalar, 3>;

namespace detail {

template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > Scalar(20) ? x : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x)) : std::exp(x) / (Scalar(1) + std::exp(x));
}

}  // namespace detail

/// Dense Lambertian voxel field. Values live at cell centres; cell (x, y, z) is
/// stored at x + X * (y + Y * z).
template <typename Scalar_>
struct RadianceField {
  using Scalar = Scalar_;

  Eigen::Vector3i resolution = Eigen::Vector3i::Zero();
  Box3<Scalar> bounds;
  Background background = Background::white;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> density_raw;
  Rows3<Scalar> color_raw;

  RadianceField() = default;
  RadianceField(Eigen::Vector3i res, Box3<Scalar> box, Background bg, Scalar density_init = Scalar(-4),
                Scalar color_init = Scalar(0))
      : resolution(res), bounds(std::move(box)), background(bg) {
    validate_geometry();
    density_raw.setConstant(cell_count(), density_init);
    color_raw.setConstant(cell_count(), 3, color_init);
  }

  Eigen::Index cell_count() const { return Eigen::Index(resolution.x()) * resolution.y() * resolution.z(); }
  Eigen::Index index(int x, int y, int z) const {
    return x + Eigen::Index(resolution.x()) * (y + Eigen::Index(resolution.y()) * z);
  }
  Vec3<Scalar> cell_size() const {
    return (bounds.max() - bounds.min()).cwiseQuotient(resolution.template cast<Scalar>());
  }
  Vec3<Scalar> cell_center(int x, int y, int z) const {
    return bounds.min() + (Vec3<Scalar>(x, y, z).array() + Scalar(0.5)).matrix().cwiseProduct(cell_size());
  }
  Scalar diagonal() const { return bounds.diagonal().norm(); }

  void validate_geometry() const {
    if ((resolution.array() < 1).any()) throw ConfigError("radiance field: resolution must be positive");
    if (bounds.isEmpty() || !((bounds.max() - bounds.min()).array() > Scalar(0)).all())
      throw ConfigError("radiance field: bounds need positive extent on all axes");
  }

  void validate() const {
    validate_geometry();
    if (density_raw.size() != cell_count() || color_raw.rows() != cell_count())
      throw ShapeError("radiance field: grid sizes do not match resolution");
  }

  template <typename Other>
  RadianceField<Other> cast() const {
    RadianceField<Other> out;
    out.resolution = resolution;
    out.bounds = bounds.template cast<Other>();
    out.background = background;
    out.density_raw = density_raw.template cast<Other>();
    out.color_raw = color_raw.template cast<Other>();
    return out;
  }
};

/// Eight cell indices and weights of a trilinear lookup.
struct Trilinear {
  std::array<Eigen::Index, 8> index{};
  std::array<double, 8> weight{};
  bool inside = false;
};

template <typename Scalar>
Trilinear trilinear(const RadianceField<Scalar>& field, const Vec3<Scalar>& p) {
  Trilinear out;
  if (!field.bounds.contains(p)) return out;
  out.inside = true;
  const Vec3<Scalar> size = field.cell_size();
  std::array<int, 3> lo{}, hi{};
  std::array<double, 3> f{};
  for (int a = 0; a < 3; ++a) {
    const int n = field.resolution[a];
    double u = double((p[a] - field.bounds.min()[a]) / size[a]) - 0.5;
    u = std::clamp(u, 0.0, double(n - 1));
    lo[a] = std::min(int(std::floor(u)), n - 1);
    hi[a] = std::min(lo[a] + 1, n - 1);
    f[a] = u - lo[a];
  }
  for (int k = 0; k < 8; ++k) {
    const int x = (k & 1) ? hi[0] : lo[0];
    const int y = (k & 2) ? hi[1] : lo[1];
    const int z = (k & 4) ? hi[2] : lo[2];
    out.index[k] = field.index(x, y, z);
    out.weight[k] = ((k & 1) ? f[0] : 1 - f[0]) * ((k & 2) ? f[1] : 1 - f[1]) * ((k & 4) ? f[2] : 1 - f[2]);
  }
  return out;
}

template <typename Scalar>
struct PointSample {
  Scalar density = 0;
  Vec3<Scalar> color = Vec3<Scalar>::Zero();
};

/// Interpolated raw values, then softplus density and sigmoid color. Points
/// outside the bounds are empty and carry the background color.
template <typename Scalar>
PointSample<Scalar> field_query(const RadianceField<Scalar>& field, const Vec3<Scalar>& p) {
  const Trilinear tri = trilinear(field, p);
  PointSample<Scalar> s;
  if (!tri.inside) {
    s.color.setConstant(Scalar(background_value(field.background)));
    return s;
  }
  Scalar raw_d = 0;
  Vec3<Scalar> raw_c = Vec3<Scalar>::Zero();
  for (int k = 0; k < 8; ++k) {
    const Scalar w = Scalar(tri.weight[k]);
    raw_d += w * field.density_raw[tri.index[k]];
    raw_c += w * field.color_raw.row(tri.index[k]).matrix().transpose();
  }
  s.density = detail::softplus(raw_d);
  for (int c = 0; c < 3; ++c) s.color[c] = detail::sigmoid(raw_c[c]);
  return s;
}

template <typename Scalar>
std::pair<Eigen::Array<Scalar, Eigen::Dynamic, 1>, Rows3<Scalar>> field_query(const RadianceField<Scalar>& field,
                                                                               const Rows3<Scalar>& points) {
  Eigen::Array<Scalar, Eigen::Dynamic, 1> density(points.rows());
  Rows3<Scalar> color(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const auto s = field_query(field, Vec3<Scalar>(points.row(i).transpose()));
    density[i] = s.density;
    color.row(i) = s.color.transpose().array();
  }
  return {density, color};
}

/// Pinhole camera, OpenGL convention: looks down -Z, +Y up, pixel centres at
/// integer + 0.5.
template <typename Scalar_>
struct Camera {
  using Scalar = Scalar_;

  Scalar fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;
  Eigen::Matrix<Scalar, 4, 4> camera_to_world = Eigen::Matrix<Scalar, 4, 4>::Identity();

  Eigen::Matrix<Scalar, 3, 3> rotation() const { return camera_to_world.template topLeftCorner<3, 3>(); }
  Vec3<Scalar> origin() const { return camera_to_world.template topRightCorner<3, 1>(); }

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw ConfigError("camera: focal lengths must be positive");
    if (width < 1 || height < 1) throw ConfigError("camera: resolution must be positive");
    if (!camera_to_world.allFinite()) throw ConfigError("camera: pose is not finite");
    const Eigen::Matrix<Scalar, 3, 3> r = rotation();
    if (((r.transpose() * r - Eigen::Matrix<Scalar, 3, 3>::Identity()).cwiseAbs().maxCoeff()) > Scalar(1e-5))
      throw ConfigError("camera: rotation is not orthonormal");
  }

  /// Unit world-space direction through continuous pixel position (u, v).
  Vec3<Scalar> direction(Scalar u, Scalar v) const {
    const Vec3<Scalar> d((u - cx) / fx, -(v - cy) / fy, Scalar(-1));
    return (rotation() * d).normalized();
  }
  Vec3<Scalar> pixel_direction(int px, int py) const { return direction(px + Scalar(0.5), py + Scalar(0.5)); }

  /// Continuous pixel position of a world point, if it lies in front.
  std::optional<Eigen::Matrix<Scalar, 2, 1>> project(const Vec3<Scalar>& p) const {
    const Vec3<Scalar> q = rotation().transpose() * (p - origin());
    if (q.z() >= Scalar(0)) return std::nullopt;
    return Eigen::Matrix<Scalar, 2, 1>(cx + fx * q.x() / -q.z(), cy - fy * q.y() / -q.z());
  }

  template <typename Other>
  Camera<Other> cast() const {
    return {Other(fx), Other(fy), Other(cx), Other(cy), width, height, camera_to_world.template cast<Other>()};
  }
};

template <typename Scalar>
Eigen::Matrix<Scalar, 4, 4> look_at(const Vec3<Scalar>& eye, const Vec3<Scalar>& target,
                                    const Vec3<Scalar>& up = Vec3<Scalar>::UnitY()) {
  const Vec3<Scalar> back = (eye - target).normalized();
  const Vec3<Scalar> right = up.cross(back).normalized();
  Eigen::Matrix<Scalar, 4, 4> m = Eigen::Matrix<Scalar, 4, 4>::Identity();
  m.template block<3, 1>(0, 0) = right;
  m.template block<3, 1>(0, 1) = back.cross(right);
  m.template block<3, 1>(0, 2) = back;
  m.template block<3, 1>(0, 3) = eye;
  return m;
}

template <typename Scalar>
struct RayBatch {
  Rows3<Scalar> origins;
  Rows3<Scalar> directions;
  Scalar near = 0;
  Scalar far = 1;
  std::vector<long> pixel_ids;

  Eigen::Index size() const { return origins.rows(); }

  void validate() const {
    if (directions.rows() != origins.rows()) throw ShapeError("ray batch: origins and directions differ in length");
    if (!(near >= 0 && near < far)) throw ConfigError("ray batch: need 0 <= near < far");
    for (Eigen::Index i = 0; i < size(); ++i)
      if (std::abs(directions.row(i).matrix().norm() - Scalar(1)) > Scalar(1e-6))
        throw ConfigError("ray batch: direction " + std::to_string(i) + " is not unit length");
  }
};

/// Rays through the given pixels (index y * width + x).
template <typename Scalar>
RayBatch<Scalar> camera_rays(const Camera<Scalar>& cam, const std::vector<long>& pixels, Scalar near, Scalar far) {
  RayBatch<Scalar> rays;
  rays.origins.resize(Eigen::Index(pixels.size()), 3);
  rays.directions.resize(Eigen::Index(pixels.size()), 3);
  rays.near = near;
  rays.far = far;
  rays.pixel_ids = pixels;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    rays.origins.row(i) = cam.origin().transpose().array();
    rays.directions.row(i) = cam.pixel_direction(int(pixels[i] % cam.width), int(pixels[i] / cam.width)).transpose().array();
  }
  return rays;
}

template <typename Scalar>
RayBatch<Scalar> camera_rays(const Camera<Scalar>& cam, Scalar near, Scalar far) {
  std::vector<long> all(std::size_t(cam.width) * cam.height);
  std::iota(all.begin(), all.end(), 0L);
  return camera_rays(cam, all, near, far);
}

template <typename Scalar>
struct RenderResult {
  Rows3<Scalar> rgb;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> depth;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> opacity;
};

inline constexpr double depth_weight_floor = 1e-6;

namespace detail {

/// Per-sample state kept for the backward pass; lookups are recomputed from t.
struct SampleRecord {
  double t = 0;
  double transmittance = 1;
  double raw_density = 0;
  Vec3<double> color = Vec3<double>::Zero();
  bool inside = false;
};

/// Composites one ray. offsets holds one jitter in [0, 1) per sample. With a
/// trace, samples records are written and the final transmittance returned in T_end.
template <typename Scalar>
void render_ray(const RadianceField<Scalar>& field, const Vec3<Scalar>& o, const Vec3<Scalar>& d, double near,
                double far, const double* offsets, int samples, Vec3<double>& rgb, double& depth, double& opacity,
                SampleRecord* trace, double* T_end = nullptr) {
  const double delta = (far - near) / samples;
  const double bg = background_value(field.background);
  double T = 1.0, acc_w = 0.0, acc_t = 0.0;
  Vec3<double> acc_c = Vec3<double>::Zero();
  for (int i = 0; i < samples; ++i) {
    const double t = near + (i + offsets[i]) * delta;
    const Vec3<Scalar> p = o + Scalar(t) * d;
    const Trilinear tri = trilinear(field, p);
    double raw_d = 0, sigma = 0;
    Vec3<double> c = Vec3<double>::Constant(bg);
    if (tri.inside) {
      Vec3<double> raw_c = Vec3<double>::Zero();
      for (int k = 0; k < 8; ++k) {
        const Eigen::Index j = tri.index[k];
        const double w = tri.weight[k];
        raw_d += w * double(field.density_raw[j]);
        for (int a = 0; a < 3; ++a) raw_c[a] += w * double(field.color_raw(j, a));
      }
      sigma = softplus(raw_d);
      for (int a = 0; a < 3; ++a) c[a] = sigmoid(raw_c[a]);
    }
    const double alpha = 1.0 - std::exp(-sigma * delta);
    const double w = T * alpha;
    acc_w += w;
    acc_c += w * c;
    acc_t += w * t;
    if (trace) trace[i] = SampleRecord{t, T, raw_d, c, tri.inside};
    T *= 1.0 - alpha;
  }
  if (T_end) *T_end = T;
  rgb = acc_c + (1.0 - acc_w) * Vec3<double>::Constant(bg);
  opacity = acc_w;
  depth = acc_t / std::max(acc_w, depth_weight_floor);
}

}  // namespace detail

/// Jitter offsets for stratified sampling: 0.5 (bin centres) without rng.
inline std::vector<double> stratified_offsets(Eigen::Index rays, int samples, Rng* rng) {
  std::vector<double> u(std::size_t(rays) * samples, 0.5);
  if (rng) {
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (double& v : u) v = uniform(*rng);
  }
  return u;
}

/// Volume rendering with stratified samples on [near, far]. Each sample covers
/// one bin of width (far - near) / samples.
template <typename Scalar>
RenderResult<Scalar> render_rays(const RadianceField<Scalar>& field, const RayBatch<Scalar>& rays, int samples,
                                 Rng* rng = nullptr) {
  if (samples < 2) throw ConfigError("render_rays: need at least 2 samples per ray");
  const Eigen::Index k = rays.size();
  const std::vector<double> offsets = stratified_offsets(k, samples, rng);
  RenderResult<Scalar> out{Rows3<Scalar>(k, 3), Eigen::Array<Scalar, Eigen::Dynamic, 1>(k),
                           Eigen::Array<Scalar, Eigen::Dynamic, 1>(k)};
  constexpr Eigen::Index chunk = 256;
  parallel_for(std::size_t((k + chunk - 1) / chunk), [&](std::size_t c) {
    for (Eigen::Index i = Eigen::Index(c) * chunk; i < std::min(k, Eigen::Index(c + 1) * chunk); ++i) {
      Vec3<double> rgb;
      double depth, opacity;
      detail::render_ray<Scalar>(field, rays.origins.row(i).transpose(), rays.directions.row(i).transpose(),
                                 double(rays.near), double(rays.far), &offsets[std::size_t(i) * samples], samples,
                                 rgb, depth, opacity, nullptr);
      out.rgb.row(i) = rgb.cast<Scalar>().transpose().array();
      out.depth[i] = Scalar(depth);
      out.opacity[i] = Scalar(opacity);
    }
  });
  return out;
}

template <typename Scalar>
struct ViewRender {
  Tensor3<Scalar> image;
  Plane<Scalar> depth;
  Plane<Scalar> opacity;
};

template <typename Scalar>
ViewRender<Scalar> render_view(const RadianceField<Scalar>& field, const Camera<Scalar>& cam, int samples, Scalar near,
                               Scalar far, std::optional<Scalar> near_override = std::nullopt) {
  cam.validate();
  const RayBatch<Scalar> rays = camera_rays(cam, near_override.value_or(near), far);
  const RenderResult<Scalar> r = render_rays(field, rays, samples);
  ViewRender<Scalar> out;
  out.image = Tensor3<Scalar>(Shape{cam.height, cam.width, 3}, Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(
                                                                    r.rgb.data(), r.rgb.size()));
  out.depth = Eigen::Map<const Plane<Scalar>>(r.depth.data(), cam.height, cam.width);
  out.opacity = Eigen::Map<const Plane<Scalar>>(r.opacity.data(), cam.height, cam.width);
  return out;
}

template <typename Scalar>
struct FieldGradient {
  Eigen::Array<Scalar, Eigen::Dynamic, 1> density;
  Rows3<Scalar> color;

  explicit FieldGradient(const RadianceField<Scalar>& f) : FieldGradient(f.cell_count()) {}
  explicit FieldGradient(Eigen::Index cells)
      : density(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(cells)), color(Rows3<Scalar>::Zero(cells, 3)) {}

  double squared_norm() const {
    return density.template cast<double>().square().sum() + color.template cast<double>().square().sum();
  }
};

struct LossWeights {
  double mse = 1.0;
  double l1 = 0.1;
};

/// Optional extra objective on rendered depth: returns its loss and the
/// gradient with respect to each ray's depth.
template <typename Scalar>
using DepthObjective = std::function<std::pair<double, Eigen::ArrayXd>(const Eigen::Array<Scalar, Eigen::Dynamic, 1>&)>;

template <typename Scalar>
struct LossEvaluation {
  double loss = 0;
  double photometric = 0;
  double depth = 0;
  RenderResult<Scalar> render;
};

/// Photometric loss mean_k w_k (mse * |rgb - target|^2 / 3 + l1 * |rgb - target|_1 / 3),
/// plus the depth objective. Accumulates d loss / d raw parameters into grad.
template <typename Scalar>
LossEvaluation<Scalar> loss_and_gradient(const RadianceField<Scalar>& field, const RayBatch<Scalar>& rays,
                                         const std::type_identity_t<Rows3<Scalar>>& target,
                                         const Eigen::ArrayXd& ray_weights, const LossWeights& lw, int samples,
                                         const std::vector<double>& offsets,
                                         std::type_identity_t<FieldGradient<Scalar>>* grad,
                                         const std::type_identity_t<DepthObjective<Scalar>>& depth_objective = nullptr) {
  const Eigen::Index k = rays.size();
  if (target.rows() != k || ray_weights.size() != k) throw ShapeError("loss: target and weights must match ray count");
  if (samples < 2) throw ConfigError("loss: need at least 2 samples per ray");
  const double bg = background_value(field.background);

  std::vector<detail::SampleRecord> traces(grad ? std::size_t(k) * samples : 0);
  std::vector<double> T_end(grad ? std::size_t(k) : 0);
  LossEvaluation<Scalar> ev;
  ev.render = {Rows3<Scalar>(k, 3), Eigen::Array<Scalar, Eigen::Dynamic, 1>(k),
               Eigen::Array<Scalar, Eigen::Dynamic, 1>(k)};
  Rows3<double> rgb(k, 3);
  Eigen::ArrayXd depth(k), opacity(k);
  parallel_for(std::size_t(k), [&](std::size_t i) {
    Vec3<double> c;
    detail::render_ray<Scalar>(field, rays.origins.row(i).transpose(), rays.directions.row(i).transpose(),
                               double(rays.near), double(rays.far), &offsets[i * samples], samples, c, depth[i],
                               opacity[i], grad ? &traces[i * samples] : nullptr, grad ? &T_end[i] : nullptr);
    rgb.row(i) = c.transpose().array();
  });
  ev.render.rgb = rgb.cast<Scalar>();
  ev.render.depth = depth.cast<Scalar>();
  ev.render.opacity = opacity.cast<Scalar>();

  Rows3<double> g_rgb(k, 3);
  for (Eigen::Index i = 0; i < k; ++i)
    for (int a = 0; a < 3; ++a) {
      const double r = rgb(i, a) - double(target(i, a));
      ev.photometric += ray_weights[i] * (lw.mse * r * r + lw.l1 * std::abs(r)) / (3.0 * k);
      g_rgb(i, a) = ray_weights[i] * (lw.mse * 2 * r + lw.l1 * ((r > 0) - (r < 0))) / (3.0 * k);
    }
  Eigen::ArrayXd g_depth = Eigen::ArrayXd::Zero(k);
  if (depth_objective) {
    auto [dl, dg] = depth_objective(ev.render.depth);
    if (dg.size() != k) throw ShapeError("depth objective gradient has wrong length");
    ev.depth = dl;
    g_depth = dg;
  }
  ev.loss = ev.photometric + ev.depth;
  if (!grad) return ev;

  // Backward, ray by ray in index order so accumulation is reproducible.
  const double delta = (double(rays.far) - double(rays.near)) / samples;
  Scalar* gd = grad->density.data();
  Scalar* gc = grad->color.data();
  for (Eigen::Index i = 0; i < k; ++i) {
    const detail::SampleRecord* tr = &traces[std::size_t(i) * samples];
    const Vec3<Scalar> o = rays.origins.row(i).transpose();
    const Vec3<Scalar> dir = rays.directions.row(i).transpose();
    const double A = opacity[i];
    const double Te = T_end[i];
    const double N = depth[i] * std::max(A, depth_weight_floor);
    const Vec3<double> g_c = g_rgb.row(i).transpose();
    const double g_bg = g_c.sum() * Te * bg;
    double suffix_t = 0;
    Vec3<double> suffix_c = Vec3<double>::Zero();
    double T_next = Te;
    for (int s = samples - 1; s >= 0; --s) {
      const detail::SampleRecord& rec = tr[s];
      const double w = rec.transmittance - T_next;
      if (rec.inside) {
        const double d_rgb = T_next * g_c.dot(rec.color) - g_c.dot(suffix_c) - g_bg;
        const double dN = T_next * rec.t - suffix_t;
        const double dD = A > depth_weight_floor ? (dN * A - N * Te) / (A * A) : dN / depth_weight_floor;
        const double d_raw_density = delta * (d_rgb + g_depth[i] * dD) * detail::sigmoid(rec.raw_density);
        Vec3<double> d_raw_color;
        for (int a = 0; a < 3; ++a) d_raw_color[a] = g_c[a] * w * rec.color[a] * (1 - rec.color[a]);
        const Trilinear tri = trilinear(field, Vec3<Scalar>(o + Scalar(rec.t) * dir));
        for (int c = 0; c < 8; ++c) {
          const Eigen::Index j = tri.index[c];
          const double tw = tri.weight[c];
          gd[j] += Scalar(tw * d_raw_density);
          for (int a = 0; a < 3; ++a) gc[3 * j + a] += Scalar(tw * d_raw_color[a]);
        }
      }
      suffix_c += w * rec.color;
      suffix_t += w * rec.t;
      T_next = rec.transmittance;
    }
  }
  return ev;
}

enum class OptimizerKind { momentum, adam };

struct OptimizerConfig {
  double learning_rate = 1.0;
  /// Heavy-ball coefficient, or the first-moment decay for Adam.
  double momentum = 0.9;
  double density_lr_scale = 1.0;
  double color_lr_scale = 1.0;
  OptimizerKind kind = OptimizerKind::momentum;
  double beta2 = 0.99;
  double epsilon = 1e-8;
};

/// Gradient descent with heavy-ball momentum, or Adam.
template <typename Scalar>
class FieldOptimizer {
 public:
  FieldOptimizer(const RadianceField<Scalar>& field, OptimizerConfig cfg) : cfg_(cfg), first_(field), second_(field) {
    if (!(cfg.learning_rate > 0)) throw ConfigError("optimizer: learning rate must be positive");
    if (!(cfg.momentum >= 0 && cfg.momentum < 1)) throw ConfigError("optimizer: momentum must lie in [0, 1)");
    if (!(cfg.beta2 >= 0 && cfg.beta2 < 1)) throw ConfigError("optimizer: beta2 must lie in [0, 1)");
    if (!(cfg.epsilon > 0)) throw ConfigError("optimizer: epsilon must be positive");
  }

  void apply(RadianceField<Scalar>& field, const FieldGradient<Scalar>& g, double lr_factor = 1.0) {
    const double lr = cfg_.learning_rate * lr_factor;
    const double b1 = cfg_.momentum;
    if (cfg_.kind == OptimizerKind::momentum) {
      first_.density = Scalar(b1) * first_.density + g.density;
      first_.color = Scalar(b1) * first_.color + g.color;
      field.density_raw -= Scalar(lr * cfg_.density_lr_scale) * first_.density;
      field.color_raw -= Scalar(lr * cfg_.color_lr_scale) * first_.color;
      return;
    }
    ++steps_;
    const double b2 = cfg_.beta2;
    const double c1 = 1 - std::pow(b1, double(steps_)), c2 = 1 - std::pow(b2, double(steps_));
    const double step = lr * std::sqrt(c2) / c1;
    const double eps = cfg_.epsilon * std::sqrt(c2);
    auto adam = [&](const Scalar* g, Scalar* m, Scalar* v, Scalar* x, Eigen::Index n, double scale) {
      const Scalar sb1 = Scalar(b1), sb2 = Scalar(b2), st = Scalar(step * scale), se = Scalar(eps);
      for (Eigen::Index j = 0; j < n; ++j) {
        m[j] = sb1 * m[j] + (1 - sb1) * g[j];
        v[j] = sb2 * v[j] + (1 - sb2) * g[j] * g[j];
        x[j] -= st * m[j] / (std::sqrt(v[j]) + se);
      }
    };
    adam(g.density.data(), first_.density.data(), second_.density.data(), field.density_raw.data(),
         g.density.size(), cfg_.density_lr_scale);
    adam(g.color.data(), first_.color.data(), second_.color.data(), field.color_raw.data(), g.color.size(),
         cfg_.color_lr_scale);
  }

  /// Zeroed gradient storage reused across steps.
  FieldGradient<Scalar>& scratch_gradient() {
    if (!scratch_) scratch_.emplace(first_.density.size());
    scratch_->density.setZero();
    scratch_->color.setZero();
    return *scratch_;
  }

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  FieldGradient<Scalar> first_;
  FieldGradient<Scalar> second_;
  std::optional<FieldGradient<Scalar>> scratch_;
  long steps_ = 0;
};

/// One optimization step. Returns the loss before the update; throws
/// NumericalError (leaving the field untouched) if it is not finite.
template <typename Scalar>
LossEvaluation<Scalar> train_step(RadianceField<Scalar>& field, FieldOptimizer<Scalar>& opt,
                                  const RayBatch<Scalar>& rays, const std::type_identity_t<Rows3<Scalar>>& target,
                                  const Eigen::ArrayXd& ray_weights, const LossWeights& lw, int samples, Rng& rng,
                                  const std::type_identity_t<DepthObjective<Scalar>>& depth_objective = nullptr,
                                  double lr_factor = 1.0) {
  FieldGradient<Scalar>& grad = opt.scratch_gradient();
  const std::vector<double> offsets = stratified_offsets(rays.size(), samples, &rng);
  auto ev = loss_and_gradient(field, rays, target, ray_weights, lw, samples, offsets, &grad, depth_objective);
  if (!std::isfinite(ev.loss) || !std::isfinite(grad.squared_norm()))
    throw NumericalError("train_step: non-finite loss " + std::to_string(ev.loss) + " (photometric " +
                         std::to_string(ev.photometric) + ", depth " + std::to_string(ev.depth) + ")");
  opt.apply(field, grad, lr_factor);
  return ev;
}

/// Checkpoint container: "GFV1", uint32 LE header length, JSON header, then
/// little-endian float32 density grid followed by the color grid (x fastest,
/// three channels interleaved).
void save_field(const RadianceField<float>& field, const std::string& path);
RadianceField<float> load_field(const std::string& path);

}  // namespace gridfill
