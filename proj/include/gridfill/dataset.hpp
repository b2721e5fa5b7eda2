#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gridfill/field.hpp"

namespace gridfill {

using Image = Tensor3<float>;

/// 8-bit PNG I/O. Color images load as H x W x 3 floats k / 255; gray and
/// alpha variants are converted on load.
Image read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const Image& image);
Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> read_png_gray8(const std::string& path);
void write_png_gray8(const std::string& path,
                     const Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& pixels);
Eigen::Array<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> read_png_gray16(const std::string& path);
void write_png_gray16(const std::string& path,
                      const Eigen::Array<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& pixels);

/// Rounds to the nearest k / 255 after clamping to [0, 1].
Image quantize8(const Image& image);

struct Frame {
  std::string file_path;
  std::string mask_path;
  Camera<double> camera;
  Image image;
  /// 1 = known, 0 = to inpaint.
  Mask<float> mask;
};

struct MultiViewDataset {
  std::string name = "dataset";
  Background background = Background::white;
  double near = 0.05;
  double far = 4.0;
  std::optional<Box3<double>> aabb;
  std::vector<Frame> frames;

  int width() const { return frames.empty() ? 0 : frames[0].camera.width; }
  int height() const { return frames.empty() ? 0 : frames[0].camera.height; }
  int size() const { return int(frames.size()); }
  /// Scene scale used for depth margins and the evaluation near offset.
  double diagonal() const { return aabb ? aabb->diagonal().norm() : far; }

  void validate() const;
};

/// Reads <dir>/transforms.json. Masks load as >= 128 known. Rotations within
/// 1e-3 of orthonormal are projected onto SO(3), others rejected.
MultiViewDataset load_dataset(const std::string& dir);

/// Writes images, masks and transforms.json under dir. Images are quantized
/// to 8 bits.
void save_dataset(const MultiViewDataset& data, const std::string& dir);

/// Depth maps are written as 16-bit PNG with value = round(depth / scale).
struct DepthEncoding {
  double scale = 1.0 / 65535;
};

/// Writes color/NNN.png and depth/NNN.png plus index.json; returns the index.
std::string save_renders(const std::vector<Image>& images, const std::vector<Plane<float>>& depths,
                         const std::string& dir, const DepthEncoding& enc);
Plane<float> read_depth_png(const std::string& path, const DepthEncoding& enc);

struct SolidBox {
  Box3<double> box;
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);
  /// Second checker color; equal to color for a plain box.
  Eigen::Vector3d color2 = Eigen::Vector3d::Constant(0.5);
  double checker = 0.25;
};

struct SyntheticSpec {
  int views = 60;
  int width = 64;
  int height = 64;
  double fov_deg = 60.0;
  /// Interior of the room; walls are wall_thickness thick outside it.
  Box3<double> room{Eigen::Vector3d::Constant(-1.0), Eigen::Vector3d::Constant(1.0)};
  double wall_thickness = 0.1;
  int boxes = 3;
  Box3<double> occluder{Eigen::Vector3d(-0.3, -1.0, -0.75), Eigen::Vector3d(0.3, -0.35, -0.25)};
  /// Camera arc around the occluder centre.
  double azimuth_deg = 50.0;
  double elevation_min_deg = 10.0;
  double elevation_max_deg = 35.0;
  double radius = 1.2;
  /// Explicit camera-to-world poses; when non-empty they replace the arc.
  std::vector<Eigen::Matrix4d> poses;
  int field_resolution = 64;
  int render_samples = 192;
  Background background = Background::white;
  std::uint64_t seed = 0;
};

struct SyntheticScene {
  MultiViewDataset dataset;
  RadianceField<float> gt_field;
  /// Distance along each pixel ray to the first scene surface (no occluder).
  std::vector<Plane<float>> gt_depth;
  /// Full renders of the scene without the occluder.
  std::vector<Image> gt_images;
  std::vector<SolidBox> solids;
  Box3<double> occluder;
};

/// Slab-test entry and exit distances of a ray with a box, if it is hit at t >= 0.
std::optional<std::pair<double, double>> ray_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                                 const Box3<double>& box);

/// First-surface distance inside the room built by make_synthetic_scene.
double scene_hit_distance(const SyntheticScene& scene, const Eigen::Vector3d& o, const Eigen::Vector3d& d);

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec);

/// Cameras evenly spaced on a horizontal circle of the given radius around
/// center, raised by lift, all looking at center.
std::vector<Camera<double>> orbit_cameras(const Eigen::Vector3d& center, double radius, double lift, int frames,
                                          int width, int height, double fov_deg);

/// Writes the dataset, gt/ renders, depth/ maps and gt_field.gfv under dir.
void save_synthetic_scene(const SyntheticScene& scene, const std::string& dir);

/// Reads the gt depth maps written by save_synthetic_scene.
std::vector<Plane<float>> load_gt_depth(const std::string& dir);

}  // namespace gridfill
