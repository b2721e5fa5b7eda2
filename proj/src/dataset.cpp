#include <json.hpp>

#include <Eigen/SVD>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gridfill/dataset.hpp"

namespace gridfill {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Gray8 = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Gray16 = Eigen::Array<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double rotation_tolerance = 1e-3;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

Eigen::Matrix4d parse_pose(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw DataError(where + ": transform_matrix must be 4x4");
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r) {
    if (!j[r].is_array() || j[r].size() != 4) throw DataError(where + ": transform_matrix must be 4x4");
    for (int c = 0; c < 4; ++c) m(r, c) = j[r][c].get<double>();
  }
  if (!m.allFinite()) throw DataError(where + ": transform_matrix is not finite");
  const Eigen::Matrix3d rot = m.topLeftCorner<3, 3>();
  const double err = (rot.transpose() * rot - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (err > rotation_tolerance || rot.determinant() <= 0)
    throw DataError(where + ": rotation is not orthonormal (error " + std::to_string(err) + ")");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(rot, Eigen::ComputeFullU | Eigen::ComputeFullV);
  m.topLeftCorner<3, 3>() = svd.matrixU() * svd.matrixV().transpose();
  return m;
}

json pose_json(const Eigen::Matrix4d& m) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
  return rows;
}

double field_or(const json& frame, const json& root, const char* key, const std::string& where) {
  if (frame.contains(key)) return frame.at(key).get<double>();
  if (root.contains(key)) return root.at(key).get<double>();
  throw DataError(where + ": missing intrinsic '" + key + "'");
}

}  // namespace

void MultiViewDataset::validate() const {
  if (frames.empty()) throw DataError("dataset '" + name + "' has no frames");
  if (!(near >= 0 && near < far)) throw DataError("dataset '" + name + "': need 0 <= near < far");
  for (const Frame& f : frames) {
    if (f.camera.width != width() || f.camera.height != height())
      throw DataError(f.file_path + ": resolution " + std::to_string(f.camera.width) + "x" +
                      std::to_string(f.camera.height) + " differs from " + std::to_string(width()) + "x" +
                      std::to_string(height()));
    try {
      f.camera.validate();
    } catch (const ConfigError& e) {
      throw DataError(f.file_path + ": " + e.what());
    }
    if (f.image.height() != height() || f.image.width() != width() || f.image.channels() != 3)
      throw DataError(f.file_path + ": image is " + to_string(f.image.shape()) + ", camera says " +
                      std::to_string(width()) + "x" + std::to_string(height()));
    if (f.mask.rows() != height() || f.mask.cols() != width())
      throw DataError(f.mask_path + ": mask size does not match image " + f.file_path);
  }
}

MultiViewDataset load_dataset(const std::string& dir) {
  const fs::path root_dir(dir);
  const fs::path manifest = root_dir / "transforms.json";
  const json root = read_json(manifest);
  MultiViewDataset data;
  try {
    data.name = root.value("name", root_dir.filename().string());
    data.background = parse_background(root.value("background", std::string("white")));
    data.near = root.value("near", data.near);
    data.far = root.value("far", data.far);
    if (root.contains("aabb")) {
      const auto lo = root.at("aabb").at(0).get<std::array<double, 3>>();
      const auto hi = root.at("aabb").at(1).get<std::array<double, 3>>();
      data.aabb = Box3<double>(Eigen::Vector3d(lo[0], lo[1], lo[2]), Eigen::Vector3d(hi[0], hi[1], hi[2]));
    }
    if (!root.contains("frames") || !root.at("frames").is_array())
      throw DataError(manifest.string() + ": missing frames array");

    const json& frames = root.at("frames");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const json& fj = frames[i];
      Frame f;
      f.file_path = fj.at("file_path").get<std::string>();
      f.mask_path = fj.value("mask_path", std::string());
      const std::string where = manifest.string() + " frame " + std::to_string(i) + " (" + f.file_path + ")";
      f.camera.fx = field_or(fj, root, "fl_x", where);
      f.camera.fy = fj.contains("fl_y") || root.contains("fl_y") ? field_or(fj, root, "fl_y", where) : f.camera.fx;
      f.camera.width = int(field_or(fj, root, "w", where));
      f.camera.height = int(field_or(fj, root, "h", where));
      f.camera.cx = fj.contains("cx") || root.contains("cx") ? field_or(fj, root, "cx", where) : f.camera.width / 2.0;
      f.camera.cy = fj.contains("cy") || root.contains("cy") ? field_or(fj, root, "cy", where) : f.camera.height / 2.0;
      f.camera.camera_to_world = parse_pose(fj.at("transform_matrix"), where);

      const fs::path image_path = root_dir / f.file_path;
      f.image = read_png_rgb(image_path.string());
      if (f.image.width() != f.camera.width || f.image.height() != f.camera.height)
        throw DataError(image_path.string() + ": image is " + std::to_string(f.image.width()) + "x" +
                        std::to_string(f.image.height()) + " but manifest says " + std::to_string(f.camera.width) +
                        "x" + std::to_string(f.camera.height));
      if (f.mask_path.empty()) {
        f.mask = Mask<float>::Ones(f.camera.height, f.camera.width);
      } else {
        const fs::path mask_path = root_dir / f.mask_path;
        const Gray8 m = read_png_gray8(mask_path.string());
        if (m.rows() != f.image.height() || m.cols() != f.image.width())
          throw DataError(mask_path.string() + ": mask is " + std::to_string(m.cols()) + "x" + std::to_string(m.rows()) +
                          ", image " + image_path.string() + " is " + std::to_string(f.image.width()) + "x" +
                          std::to_string(f.image.height()));
        f.mask = (m >= std::uint8_t(128)).cast<float>();
      }
      data.frames.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  data.validate();
  return data;
}

void save_dataset(const MultiViewDataset& data, const std::string& dir) {
  data.validate();
  const fs::path root_dir(dir);
  fs::create_directories(root_dir);
  json frames = json::array();
  for (const Frame& f : data.frames) {
    fs::create_directories((root_dir / f.file_path).parent_path());
    write_png_rgb((root_dir / f.file_path).string(), f.image);
    json fj = {{"file_path", f.file_path}, {"transform_matrix", pose_json(f.camera.camera_to_world)}};
    if (!f.mask_path.empty()) {
      fs::create_directories((root_dir / f.mask_path).parent_path());
      write_png_gray8((root_dir / f.mask_path).string(), (f.mask > 0.5f).cast<std::uint8_t>() * std::uint8_t(255));
      fj["mask_path"] = f.mask_path;
    }
    const Camera<double>& c0 = data.frames[0].camera;
    if (f.camera.fx != c0.fx || f.camera.fy != c0.fy || f.camera.cx != c0.cx || f.camera.cy != c0.cy) {
      fj["fl_x"] = f.camera.fx;
      fj["fl_y"] = f.camera.fy;
      fj["cx"] = f.camera.cx;
      fj["cy"] = f.camera.cy;
    }
    frames.push_back(std::move(fj));
  }
  const Camera<double>& c0 = data.frames[0].camera;
  json root = {{"name", data.name},     {"fl_x", c0.fx},   {"fl_y", c0.fy},
               {"cx", c0.cx},           {"cy", c0.cy},     {"w", c0.width},
               {"h", c0.height},        {"near", data.near}, {"far", data.far},
               {"background", to_string(data.background)}, {"frames", frames}};
  if (data.aabb)
    root["aabb"] = {{data.aabb->min().x(), data.aabb->min().y(), data.aabb->min().z()},
                    {data.aabb->max().x(), data.aabb->max().y(), data.aabb->max().z()}};
  write_text(root_dir / "transforms.json", root.dump(2) + "\n");
}

std::string save_renders(const std::vector<Image>& images, const std::vector<Plane<float>>& depths,
                         const std::string& dir, const DepthEncoding& enc) {
  if (!depths.empty() && depths.size() != images.size())
    throw ShapeError("save_renders: " + std::to_string(depths.size()) + " depth maps for " +
                     std::to_string(images.size()) + " images");
  const fs::path root_dir(dir);
  fs::create_directories(root_dir);
  json entries = json::array();
  char name[32];
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::snprintf(name, sizeof name, "%04zu.png", i);
    json e = {{"color", "color/" + std::string(name)}};
    fs::create_directories(root_dir / "color");
    write_png_rgb((root_dir / "color" / name).string(), images[i]);
    if (!depths.empty()) {
      fs::create_directories(root_dir / "depth");
      const Plane<float>& d = depths[i];
      Gray16 q(d.rows(), d.cols());
      for (Eigen::Index k = 0; k < d.size(); ++k)
        q.data()[k] = std::uint16_t(std::clamp(std::lround(double(d.data()[k]) / enc.scale), 0L, 65535L));
      write_png_gray16((root_dir / "depth" / name).string(), q);
      e["depth"] = "depth/" + std::string(name);
    }
    entries.push_back(std::move(e));
  }
  const json index = {{"depth_scale", enc.scale}, {"frames", entries}};
  const std::string text = index.dump(2) + "\n";
  write_text(root_dir / "index.json", text);
  return text;
}

Plane<float> read_depth_png(const std::string& path, const DepthEncoding& enc) {
  const Gray16 q = read_png_gray16(path);
  return (q.cast<double>() * enc.scale).cast<float>();
}

}  // namespace gridfill
