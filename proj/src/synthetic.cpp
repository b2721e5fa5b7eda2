#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "gridfill/dataset.hpp"
#include "gridfill/seeds.hpp"

namespace gridfill {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double solid_raw_density = 60.0;
constexpr double empty_raw_density = -10.0;

double logit(double p) {
  p = std::clamp(p, 0.02, 0.98);
  return std::log(p / (1 - p));
}

Eigen::Vector3d checker_color(const SolidBox& s, const Eigen::Vector3d& p) {
  const Eigen::Vector3d q = (p - s.box.min()) / s.checker;
  const long parity = long(std::floor(q.x())) + long(std::floor(q.y())) + long(std::floor(q.z()));
  return (parity & 1) ? s.color2 : s.color;
}

Eigen::Vector3d random_color(Rng& rng) {
  std::uniform_real_distribution<double> u(0.1, 0.9);
  return {u(rng), u(rng), u(rng)};
}

std::vector<SolidBox> build_walls(const SyntheticSpec& spec, Rng& rng) {
  const Eigen::Vector3d lo = spec.room.min(), hi = spec.room.max();
  const double th = spec.wall_thickness;
  const Eigen::Vector3d olo = lo.array() - th, ohi = hi.array() + th;
  std::vector<SolidBox> walls;
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      Eigen::Vector3d a = olo, b = ohi;
      if (side == 0)
        b[axis] = lo[axis];
      else
        a[axis] = hi[axis];
      SolidBox w;
      w.box = Box3<double>(a, b);
      w.color = random_color(rng);
      w.color2 = (0.6 * w.color.array() + 0.4 * random_color(rng).array()).matrix();
      w.checker = 0.25;
      walls.push_back(w);
    }
  return walls;
}

std::vector<SolidBox> build_boxes(const SyntheticSpec& spec, Rng& rng) {
  std::vector<SolidBox> boxes;
  const Box3<double>& room = spec.room;
  const Box3<double>& occ = spec.occluder;
  // A box hidden behind the occluder, resting on the floor.
  if (occ.volume() > 0) {
    const Eigen::Vector3d c = occ.center(), half = 0.6 * occ.sizes() / 2;
    SolidBox hidden;
    hidden.box = Box3<double>(Eigen::Vector3d(c.x() - half.x(), room.min().y(), c.z() - half.z()),
                              Eigen::Vector3d(c.x() + half.x(), room.min().y() + 0.5 * occ.sizes().y(),
                                              c.z() + half.z()));
    hidden.color = hidden.color2 = Eigen::Vector3d(0.9, 0.3, 0.2);
    boxes.push_back(hidden);
  }
  std::uniform_real_distribution<double> size(0.2, 0.45), ux(room.min().x() + 0.1, room.max().x() - 0.55),
      uz(room.min().z() + 0.1, room.max().z() - 0.55);
  const Box3<double> keep_out(occ.min().array() - 0.15, occ.max().array() + 0.15);
  for (int k = 0, attempts = 0; k < spec.boxes && attempts < 1000; ++attempts) {
    const double sx = size(rng), sy = size(rng), sz = size(rng);
    const Eigen::Vector3d a(ux(rng), room.min().y(), uz(rng));
    const Box3<double> b(a, a + Eigen::Vector3d(sx, sy, sz));
    if (occ.volume() > 0 && b.intersects(keep_out)) continue;
    bool overlaps = false;
    for (const SolidBox& o : boxes) overlaps |= b.intersects(o.box);
    if (overlaps) continue;
    SolidBox s;
    s.box = b;
    s.color = random_color(rng);
    s.color2 = (0.75 * s.color.array()).matrix();
    s.checker = 0.1;
    boxes.push_back(s);
    ++k;
  }
  return boxes;
}

std::vector<Eigen::Matrix4d> arc_poses(const SyntheticSpec& spec, Rng& rng) {
  std::vector<Eigen::Matrix4d> poses;
  const Eigen::Vector3d c = spec.occluder.center();
  std::uniform_real_distribution<double> elev(spec.elevation_min_deg, spec.elevation_max_deg);
  constexpr double deg = std::numbers::pi / 180.0;
  for (int i = 0; i < spec.views; ++i) {
    const double az = spec.views == 1 ? 0.0 : -spec.azimuth_deg + 2 * spec.azimuth_deg * i / (spec.views - 1);
    const double el = elev(rng);
    const Eigen::Vector3d eye = c + spec.radius * Eigen::Vector3d(std::sin(az * deg) * std::cos(el * deg),
                                                                  std::sin(el * deg),
                                                                  std::cos(az * deg) * std::cos(el * deg));
    poses.push_back(look_at<double>(eye, c));
  }
  return poses;
}

}  // namespace

std::optional<std::pair<double, double>> ray_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                                 const Box3<double>& box) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < box.min()[a] || o[a] > box.max()[a]) return std::nullopt;
      continue;
    }
    double ta = (box.min()[a] - o[a]) / d[a], tb = (box.max()[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t1 < 0) return std::nullopt;
  return std::make_pair(t0, t1);
}

double scene_hit_distance(const SyntheticScene& scene, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  double best = std::numeric_limits<double>::infinity();
  for (const SolidBox& s : scene.solids) {
    const auto hit = ray_box(o, d, s.box);
    if (hit) best = std::min(best, std::max(hit->first, 0.0));
  }
  return best;
}

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec) {
  if (spec.views < 1) throw ConfigError("synthetic scene: need at least one view");
  if (spec.width < 2 || spec.height < 2 || spec.width % 2 || spec.height % 2)
    throw ConfigError("synthetic scene: width and height must be even and at least 2");
  if (spec.field_resolution < 2) throw ConfigError("synthetic scene: field resolution must be at least 2");
  if (!(spec.wall_thickness > 0)) throw ConfigError("synthetic scene: wall thickness must be positive");
  if (!spec.room.contains(spec.occluder.min()) || !spec.room.contains(spec.occluder.max()))
    throw DataError("synthetic scene: occluder lies outside the room bounds");

  SyntheticScene scene;
  scene.occluder = spec.occluder;
  Rng rng(derive_seed(spec.seed, "scene-gen"));
  Rng camera_rng(derive_seed(spec.seed, "scene-cameras"));
  const auto walls = build_walls(spec, rng);
  const auto boxes = build_boxes(spec, rng);
  scene.solids = boxes;
  scene.solids.insert(scene.solids.end(), walls.begin(), walls.end());

  const Box3<double> bounds(spec.room.min().array() - spec.wall_thickness,
                            spec.room.max().array() + spec.wall_thickness);
  RadianceField<double> gt(Eigen::Vector3i::Constant(spec.field_resolution), bounds, spec.background,
                           empty_raw_density);
  std::vector<char> solid(std::size_t(gt.cell_count()), 0);
  for (int z = 0; z < gt.resolution.z(); ++z)
    for (int y = 0; y < gt.resolution.y(); ++y)
      for (int x = 0; x < gt.resolution.x(); ++x) {
        const Eigen::Vector3d p = gt.cell_center(x, y, z);
        for (const SolidBox& s : scene.solids)
          if (s.box.contains(p)) {
            const Eigen::Index i = gt.index(x, y, z);
            gt.density_raw[i] = solid_raw_density;
            const Eigen::Vector3d c = checker_color(s, p);
            for (int a = 0; a < 3; ++a) gt.color_raw(i, a) = logit(c[a]);
            solid[std::size_t(i)] = 1;
            break;
          }
      }
  // Empty cells next to surfaces take a neighbour's color so interpolation
  // near a surface does not bleed gray.
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<char> next = solid;
    for (int z = 0; z < gt.resolution.z(); ++z)
      for (int y = 0; y < gt.resolution.y(); ++y)
        for (int x = 0; x < gt.resolution.x(); ++x) {
          const Eigen::Index i = gt.index(x, y, z);
          if (solid[std::size_t(i)]) continue;
          const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& n : nb) {
            const int xx = x + n[0], yy = y + n[1], zz = z + n[2];
            if (xx < 0 || yy < 0 || zz < 0 || xx >= gt.resolution.x() || yy >= gt.resolution.y() ||
                zz >= gt.resolution.z())
              continue;
            const Eigen::Index j = gt.index(xx, yy, zz);
            if (solid[std::size_t(j)]) {
              gt.color_raw.row(i) = gt.color_raw.row(j);
              next[std::size_t(i)] = 1;
              break;
            }
          }
        }
    solid = std::move(next);
  }

  MultiViewDataset& data = scene.dataset;
  data.name = "synthetic-room";
  data.background = spec.background;
  data.aabb = bounds;
  data.near = 0.05;
  data.far = bounds.diagonal().norm();

  const std::vector<Eigen::Matrix4d> poses = spec.poses.empty() ? arc_poses(spec, camera_rng) : spec.poses;
  const double focal = 0.5 * spec.width / std::tan(0.5 * spec.fov_deg * std::numbers::pi / 180.0);
  for (std::size_t v = 0; v < poses.size(); ++v) {
    Camera<double> cam;
    cam.width = spec.width;
    cam.height = spec.height;
    cam.fx = cam.fy = focal;
    cam.cx = spec.width / 2.0;
    cam.cy = spec.height / 2.0;
    cam.camera_to_world = poses[v];
    cam.validate();
    if (!spec.room.contains(cam.origin()))
      throw ConfigError("synthetic scene: camera " + std::to_string(v) + " lies outside the room");

    const auto render = render_view(gt, cam, spec.render_samples, data.near, data.far);
    Image full = quantize8(render.image.cast<float>());
    Plane<float> depth(spec.height, spec.width);
    Mask<float> mask = Mask<float>::Ones(spec.height, spec.width);
    for (int py = 0; py < spec.height; ++py)
      for (int px = 0; px < spec.width; ++px) {
        const Eigen::Vector3d d = cam.pixel_direction(px, py);
        const double scene_t = scene_hit_distance(scene, cam.origin(), d);
        depth(py, px) = float(scene_t);
        if (spec.occluder.volume() <= 0) continue;
        const auto occ = ray_box(cam.origin(), d, spec.occluder);
        if (occ && std::max(occ->first, 0.0) < scene_t) mask(py, px) = 0.0f;
      }
    Frame f;
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", v);
    f.file_path = "images/" + std::string(name);
    f.mask_path = "masks/" + std::string(name);
    f.camera = cam;
    f.image = full;
    for (int py = 0; py < spec.height; ++py)
      for (int px = 0; px < spec.width; ++px)
        if (mask(py, px) == 0.0f)
          for (int c = 0; c < 3; ++c) f.image(py, px, c) = 0.0f;
    f.mask = mask;
    data.frames.push_back(std::move(f));
    scene.gt_images.push_back(std::move(full));
    scene.gt_depth.push_back(std::move(depth));
  }
  scene.gt_field = gt.cast<float>();
  data.validate();
  return scene;
}

std::vector<Camera<double>> orbit_cameras(const Eigen::Vector3d& center, double radius, double lift, int frames,
                                          int width, int height, double fov_deg) {
  if (frames < 1) throw ConfigError("orbit: frame count must be positive");
  if (!(radius > 0)) throw ConfigError("orbit: radius must be positive");
  if (!(fov_deg > 0 && fov_deg < 180)) throw ConfigError("orbit: field of view must lie in (0, 180)");
  const double focal = 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
  std::vector<Camera<double>> cams;
  for (int k = 0; k < frames; ++k) {
    const double a = 2 * std::numbers::pi * k / frames;
    const Eigen::Vector3d eye = center + Eigen::Vector3d(radius * std::sin(a), lift, radius * std::cos(a));
    Camera<double> cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = focal;
    cam.cx = width / 2.0;
    cam.cy = height / 2.0;
    cam.camera_to_world = look_at<double>(eye, center);
    cam.validate();
    cams.push_back(cam);
  }
  return cams;
}

void save_synthetic_scene(const SyntheticScene& scene, const std::string& dir) {
  save_dataset(scene.dataset, dir);
  const DepthEncoding enc{scene.dataset.diagonal() / 65535.0};
  save_renders(scene.gt_images, scene.gt_depth, (fs::path(dir) / "gt").string(), enc);
  save_field(scene.gt_field, (fs::path(dir) / "gt_field.gfv").string());
  json solids = json::array();
  for (const SolidBox& s : scene.solids)
    solids.push_back({{"min", {s.box.min().x(), s.box.min().y(), s.box.min().z()}},
                      {"max", {s.box.max().x(), s.box.max().y(), s.box.max().z()}},
                      {"color", {s.color.x(), s.color.y(), s.color.z()}},
                      {"color2", {s.color2.x(), s.color2.y(), s.color2.z()}},
                      {"checker", s.checker}});
  const json info = {
      {"occluder",
       {{"min", {scene.occluder.min().x(), scene.occluder.min().y(), scene.occluder.min().z()}},
        {"max", {scene.occluder.max().x(), scene.occluder.max().y(), scene.occluder.max().z()}}}},
      {"solids", solids}};
  std::ofstream out(fs::path(dir) / "scene.json");
  out << info.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + (fs::path(dir) / "scene.json").string());
}

std::vector<Plane<float>> load_gt_depth(const std::string& dir) {
  const fs::path index_path = fs::path(dir) / "gt" / "index.json";
  std::ifstream in(index_path);
  if (!in) throw DataError("missing depth index " + index_path.string());
  json index;
  try {
    index = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(index_path.string() + ": parse error at byte " + std::to_string(e.byte));
  }
  const DepthEncoding enc{index.at("depth_scale").get<double>()};
  std::vector<Plane<float>> depths;
  for (const json& e : index.at("frames")) {
    if (!e.contains("depth")) throw DataError(index_path.string() + ": frame without depth");
    depths.push_back(read_depth_png((fs::path(dir) / "gt" / e.at("depth").get<std::string>()).string(), enc));
  }
  return depths;
}

}  // namespace gridfill
