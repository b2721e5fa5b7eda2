#include <algorithm>
#include <cmath>
#include <sstream>

#include "gridfill/metrics.hpp"
#include "gridfill/parallel.hpp"
#include "gridfill/seeds.hpp"

namespace gridfill {

namespace {

constexpr int window = 11;
constexpr double window_sigma = 1.5;
constexpr double c1 = 0.01 * 0.01;
constexpr double c2 = 0.03 * 0.03;

void require_same(const Image& a, const Image& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
}

void require_region(const Image& a, const Mask<float>& region, const char* what) {
  if (region.rows() != a.height() || region.cols() != a.width())
    throw ShapeError(std::string(what) + ": region does not match image " + to_string(a.shape()));
}

Plane<double> luma(const Image& img) {
  if (img.channels() != 3) throw ShapeError("ssim: expected 3 channels, got " + to_string(img.shape()));
  Plane<double> out(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      out(y, x) = 0.299 * img(y, x, 0) + 0.587 * img(y, x, 1) + 0.114 * img(y, x, 2);
  return out;
}

std::array<double, window> gaussian_window() {
  std::array<double, window> w{};
  double sum = 0;
  for (int i = 0; i < window; ++i) {
    const double d = i - window / 2;
    w[i] = std::exp(-d * d / (2 * window_sigma * window_sigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

/// Separable valid-mode filtering with the Gaussian window.
Plane<double> filter_valid(const Plane<double>& in) {
  static const auto w = gaussian_window();
  const Eigen::Index h = in.rows() - window + 1, wd = in.cols() - window + 1;
  Plane<double> rows(in.rows(), wd);
  for (Eigen::Index y = 0; y < in.rows(); ++y)
    for (Eigen::Index x = 0; x < wd; ++x) {
      double s = 0;
      for (int k = 0; k < window; ++k) s += w[k] * in(y, x + k);
      rows(y, x) = s;
    }
  Plane<double> out(h, wd);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < wd; ++x) {
      double s = 0;
      for (int k = 0; k < window; ++k) s += w[k] * rows(y + k, x);
      out(y, x) = s;
    }
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::string optional_csv(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << *v;
  return s.str();
}

}  // namespace

double psnr(const Image& a, const Image& b, const Mask<float>* region) {
  require_same(a, b, "psnr");
  if (region) require_region(a, *region, "psnr");
  double sum = 0;
  long count = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      if (region && (*region)(y, x) == 0.0f) continue;
      for (int c = 0; c < a.channels(); ++c) {
        const double d = double(a(y, x, c)) - double(b(y, x, c));
        sum += d * d;
      }
      ++count;
    }
  if (count == 0) throw ConfigError("psnr: empty region");
  const double mse = sum / double(count * a.channels());
  if (mse == 0) return psnr_cap;
  return std::min(psnr_cap, -10.0 * std::log10(mse));
}

Plane<double> ssim_map(const Image& a, const Image& b) {
  require_same(a, b, "ssim");
  if (a.height() < window || a.width() < window)
    throw ShapeError("ssim: image " + to_string(a.shape()) + " is smaller than the 11x11 window");
  const Plane<double> x = luma(a), y = luma(b);
  const Plane<double> mx = filter_valid(x), my = filter_valid(y);
  const Plane<double> sxx = filter_valid(x * x) - mx * mx;
  const Plane<double> syy = filter_valid(y * y) - my * my;
  const Plane<double> sxy = filter_valid(x * y) - mx * my;
  return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
}

double ssim(const Image& a, const Image& b, const Mask<float>* region) {
  const Plane<double> map = ssim_map(a, b);
  if (!region) return map.mean();
  require_region(a, *region, "ssim");
  double sum = 0;
  long count = 0;
  for (Eigen::Index y = 0; y < map.rows(); ++y)
    for (Eigen::Index x = 0; x < map.cols(); ++x)
      if ((*region)(y + window / 2, x + window / 2) != 0.0f) {
        sum += map(y, x);
        ++count;
      }
  if (count == 0) throw ConfigError("ssim: no window centred in the region");
  return sum / double(count);
}

void MetricReport::aggregate() {
  if (views.empty()) throw ConfigError("metric report has no views");
  std::vector<double> p, s, pu, su;
  for (const ViewMetrics& v : views) {
    p.push_back(v.psnr);
    s.push_back(v.ssim);
    if (v.psnr_unknown) pu.push_back(*v.psnr_unknown);
    if (v.ssim_unknown) su.push_back(*v.ssim_unknown);
  }
  psnr = mean(p);
  ssim = mean(s);
  psnr_unknown = pu.empty() ? std::nullopt : std::optional<double>(mean(pu));
  ssim_unknown = su.empty() ? std::nullopt : std::optional<double>(mean(su));
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json per_view = nlohmann::json::array();
  for (const ViewMetrics& v : views)
    per_view.push_back({{"view", v.view},
                        {"psnr", v.psnr},
                        {"ssim", v.ssim},
                        {"psnr_unknown", optional_json(v.psnr_unknown)},
                        {"ssim_unknown", optional_json(v.ssim_unknown)}});
  return {{"config", config},
          {"psnr_cap", psnr_cap},
          {"aggregate",
           {{"psnr", psnr},
            {"ssim", ssim},
            {"psnr_unknown", optional_json(psnr_unknown)},
            {"ssim_unknown", optional_json(ssim_unknown)},
            {"consistency", optional_json(consistency)}}},
          {"views", per_view}};
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "view,psnr,ssim,psnr_unknown,ssim_unknown\n";
  for (const ViewMetrics& v : views)
    out << v.view << ',' << optional_csv(v.psnr) << ',' << optional_csv(v.ssim) << ',' << optional_csv(v.psnr_unknown)
        << ',' << optional_csv(v.ssim_unknown) << '\n';
  out << "mean," << optional_csv(psnr) << ',' << optional_csv(ssim) << ',' << optional_csv(psnr_unknown) << ','
      << optional_csv(ssim_unknown) << '\n';
  return out.str();
}

double default_near_offset(const MultiViewDataset& data) { return 0.05 * data.diagonal(); }

MetricReport eval_dataset_consistency(const RadianceField<float>& field, const MultiViewDataset& data,
                                      const EvalConfig& cfg) {
  data.validate();
  const double offset = cfg.near_offset.value_or(default_near_offset(data));
  if (!(offset >= 0)) throw ConfigError("near offset must be non-negative");
  if (cfg.samples < 1) throw ConfigError("eval: samples must be positive");
  const float near = float(std::max(data.near, offset));
  if (near >= data.far) throw ConfigError("near offset reaches the far plane");

  MetricReport report;
  report.config = {{"near_offset", offset}, {"near", near}, {"far", data.far}, {"samples", cfg.samples}};
  for (int i = 0; i < data.size(); ++i) {
    const Frame& f = data.frames[i];
    const auto r = render_view(field, f.camera.cast<float>(), cfg.samples, float(data.near), float(data.far), std::optional<float>(near));
    ViewMetrics v;
    v.view = i;
    v.psnr = psnr(r.image, f.image);
    v.ssim = ssim(r.image, f.image);
    const Mask<float> unknown = (f.mask == 0.0f).cast<float>();
    if ((unknown != 0.0f).any()) {
      v.psnr_unknown = psnr(r.image, f.image, &unknown);
      try {
        v.ssim_unknown = ssim(r.image, f.image, &unknown);
      } catch (const ConfigError&) {
        // unknown pixels only near the border
      }
    }
    report.views.push_back(v);
  }
  report.aggregate();
  return report;
}

ConsistencyResult cross_view_consistency(const std::vector<Image>& images, const std::vector<Mask<float>>& masks,
                                         const MultiViewDataset& data, const std::vector<Plane<float>>& gt_depth,
                                         const ConsistencyConfig& cfg) {
  const int n = data.size();
  if (int(images.size()) != n || int(masks.size()) != n)
    throw ShapeError("cross_view_consistency: need one image and mask per view");
  if (int(gt_depth.size()) != n) throw DataError("cross_view_consistency: missing ground-truth depth");
  const int full_w = data.width(), full_h = data.height();
  const int lw = images[0].width(), lh = images[0].height();
  if (lw <= 0 || full_w % lw != 0 || full_h % lh != 0 || full_w / lw != full_h / lh)
    throw ShapeError("cross_view_consistency: image size must divide the camera resolution evenly");
  const int f = full_w / lw;
  for (int i = 0; i < n; ++i) {
    if (images[i].shape() != images[0].shape() || images[i].channels() != 3)
      throw ShapeError("cross_view_consistency: image " + std::to_string(i) + " has shape " +
                       to_string(images[i].shape()));
    if (masks[i].rows() != lh || masks[i].cols() != lw)
      throw ShapeError("cross_view_consistency: mask " + std::to_string(i) + " does not match its image");
    if (gt_depth[i].rows() != full_h || gt_depth[i].cols() != full_w)
      throw DataError("cross_view_consistency: depth map " + std::to_string(i) + " does not match the cameras");
  }

  std::vector<double> sums(n, 0.0);
  std::vector<long> counts(n, 0);
  parallel_for(std::size_t(n), [&](std::size_t iu) {
    const int i = int(iu);
    std::vector<int> unknown;
    for (int k = 0; k < lw * lh; ++k)
      if (masks[i](k / lw, k % lw) == 0.0f) unknown.push_back(k);
    Rng rng(derive_seed(derive_seed(cfg.seed, "consistency"), std::uint64_t(i)));
    if (int(unknown.size()) > cfg.samples_per_view) {
      std::shuffle(unknown.begin(), unknown.end(), rng);
      unknown.resize(std::size_t(cfg.samples_per_view));
    }
    const Camera<double>& cam = data.frames[i].camera;
    for (int k : unknown) {
      const int u = k % lw, v = k / lw;
      const int px = u * f + f / 2, py = v * f + f / 2;
      const double d = gt_depth[i](py, px);
      if (!(d > 0) || !std::isfinite(d)) continue;
      const Eigen::Vector3d p = cam.origin() + d * cam.pixel_direction(px, py);
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const Camera<double>& other = data.frames[j].camera;
        const auto q = other.project(p);
        if (!q || (*q)(0) < 0 || (*q)(1) < 0 || (*q)(0) >= full_w || (*q)(1) >= full_h) continue;
        const int qx = int((*q)(0)), qy = int((*q)(1));
        const double dist = (p - other.origin()).norm();
        if (std::abs(double(gt_depth[j](qy, qx)) - dist) > cfg.depth_tolerance * dist) continue;
        double diff = 0;
        for (int c = 0; c < 3; ++c) diff += std::abs(double(images[i](v, u, c)) - double(images[j](qy / f, qx / f, c)));
        sums[i] += diff / 3;
        ++counts[i];
      }
    }
  });
  ConsistencyResult r;
  double total = 0;
  for (int i = 0; i < n; ++i) {
    total += sums[i];
    r.correspondences += counts[i];
  }
  if (r.correspondences == 0) throw DataError("cross_view_consistency: no visible correspondences");
  r.mean_abs_diff = total / double(r.correspondences);
  return r;
}

}  // namespace gridfill
