#include <json.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "gridfill/field.hpp"

namespace gridfill {

namespace {

constexpr std::array<char, 4> magic{'G', 'F', 'V', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

void put_floats(std::ostream& out, const float* data, std::size_t n) {
  std::vector<unsigned char> bytes(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = std::bit_cast<std::uint32_t>(data[i]);
    for (int k = 0; k < 4; ++k) bytes[4 * i + k] = static_cast<unsigned char>(u >> (8 * k));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void get_floats(const unsigned char* bytes, float* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(get_u32(bytes + 4 * i));
}

}  // namespace

Background parse_background(const std::string& name) {
  if (name == "white") return Background::white;
  if (name == "black") return Background::black;
  throw ConfigError("unknown background '" + name + "' (expected white or black)");
}

std::string to_string(Background b) { return b == Background::white ? "white" : "black"; }

void save_field(const RadianceField<float>& field, const std::string& path) {
  field.validate();
  const nlohmann::json header = {
      {"resolution", {field.resolution.x(), field.resolution.y(), field.resolution.z()}},
      {"bounds",
       {{"min", {field.bounds.min().x(), field.bounds.min().y(), field.bounds.min().z()}},
        {"max", {field.bounds.max().x(), field.bounds.max().y(), field.bounds.max().z()}}}},
      {"background", to_string(field.background)},
      {"density", "softplus"},
      {"color", "sigmoid"},
      {"order", "x-fastest"},
  };
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(magic.data(), 4);
  put_u32(out, std::uint32_t(text.size()));
  out.write(text.data(), std::streamsize(text.size()));
  put_floats(out, field.density_raw.data(), std::size_t(field.density_raw.size()));
  put_floats(out, field.color_raw.data(), std::size_t(field.color_raw.size()));
  if (!out) throw DataError("failed writing checkpoint " + path);
}

RadianceField<float> load_field(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), magic.data(), 4) != 0)
    throw DataError(path + ": not a GFV1 checkpoint");
  const std::uint32_t header_len = get_u32(bytes.data() + 4);
  if (bytes.size() < 8 + std::size_t(header_len)) throw DataError(path + ": truncated header");

  RadianceField<float> field;
  try {
    const auto header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    const auto res = header.at("resolution").get<std::array<int, 3>>();
    const auto lo = header.at("bounds").at("min").get<std::array<float, 3>>();
    const auto hi = header.at("bounds").at("max").get<std::array<float, 3>>();
    field.resolution = Eigen::Vector3i(res[0], res[1], res[2]);
    field.bounds = Box3<float>(Vec3<float>(lo[0], lo[1], lo[2]), Vec3<float>(hi[0], hi[1], hi[2]));
    field.background = parse_background(header.at("background").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(path + ": " + e.what());
  }
  try {
    field.validate_geometry();
  } catch (const ConfigError& e) {
    throw DataError(path + ": " + e.what());
  }
  const std::size_t cells = std::size_t(field.cell_count());
  const std::size_t expect = 8 + header_len + 4 * 4 * cells;
  if (bytes.size() != expect)
    throw DataError(path + ": expected " + std::to_string(expect) + " bytes, found " + std::to_string(bytes.size()));
  field.density_raw.resize(Eigen::Index(cells));
  field.color_raw.resize(Eigen::Index(cells), 3);
  const unsigned char* p = bytes.data() + 8 + header_len;
  get_floats(p, field.density_raw.data(), cells);
  get_floats(p + 4 * cells, field.color_raw.data(), 3 * cells);
  return field;
}

}  // namespace gridfill
