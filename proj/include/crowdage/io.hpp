#pragma once
// PNG images and on-disk dataset manifests:
//   <dir>/manifest.json       {"name", "weight", "num_scenes", "image_side"}
//   <dir>/annotations.jsonl   one record per scene
//   <dir>/images/NNNNNN.png

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdage/scene.hpp"
#include "crowdage/synth_data.hpp"

namespace crowdage {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

/// Writes an 8-bit RGB PNG; values are rounded from [0,1].
inline void write_png(const fs::path& path, const Image& img) {
  if (img.channels != 3) throw std::invalid_argument("write_png: expected 3 channels");
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: cannot allocate writer");
  }
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(img.at(c, y, x)), 0.0, 1.0);
        row[static_cast<std::size_t>(x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads any PNG as 3-channel float in [0,1] (gray expanded, alpha dropped).
inline Image read_png(const fs::path& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open image: " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw std::runtime_error("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: cannot allocate reader");
  }
  Image img;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: corrupt image " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("unsupported PNG layout: " + path.string());
  }
  img = Image(3, h, w);
  row.resize(png_get_rowbytes(png, info));
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(row[static_cast<std::size_t>(x) * 3 + c] / 255.0);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// ---------------------------------------------------------------------------
// Annotation records
// ---------------------------------------------------------------------------

inline json face_to_json(const FaceAnnotation& f) {
  json j = {{"x1", f.box.x1}, {"y1", f.box.y1}, {"x2", f.box.x2}, {"y2", f.box.y2}};
  if (f.age) j["age"] = *f.age;
  if (f.gender) j["gender"] = std::string(to_string(*f.gender));
  return j;
}

inline FaceAnnotation face_from_json(const json& j) {
  for (const auto& [k, v] : j.items())
    if (k != "x1" && k != "y1" && k != "x2" && k != "y2" && k != "age" && k != "gender")
      throw std::runtime_error("annotation: unknown face key '" + k + "'");
  FaceAnnotation f;
  f.box = {j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(), j.at("y2").get<double>()};
  if (!f.box.valid()) throw std::runtime_error("annotation: degenerate face box");
  if (j.contains("age") && !j["age"].is_null()) {
    const int a = j["age"].get<int>();
    if (a < 0 || a >= kNumAges) throw std::runtime_error("annotation: age out of range");
    f.age = a;
  }
  if (j.contains("gender") && !j["gender"].is_null()) f.gender = gender_from_string(j["gender"].get<std::string>());
  return f;
}

inline json annotation_record(const Scene& s) {
  json faces = json::array();
  for (const auto& f : s.faces) faces.push_back(face_to_json(f));
  return {{"image_path", s.image_path}, {"width", s.width()}, {"height", s.height()}, {"faces", faces}};
}

// ---------------------------------------------------------------------------
// Manifests on disk
// ---------------------------------------------------------------------------

inline void write_manifest(const fs::path& dir, const DatasetManifest& m, const json& extra = json::object()) {
  fs::create_directories(dir / "images");
  std::ofstream ann(dir / "annotations.jsonl");
  if (!ann) throw std::runtime_error("cannot write " + (dir / "annotations.jsonl").string());
  int side = 0;
  for (std::size_t i = 0; i < m.scenes.size(); ++i) {
    Scene s = m.scenes[i];
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
    s.image_path = name.str();
    write_png(dir / s.image_path, s.image);
    ann << annotation_record(s).dump() << "\n";
    side = s.width();
  }
  json meta = {{"name", m.name}, {"weight", m.weight}, {"num_scenes", m.scenes.size()}, {"image_side", side}};
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  std::ofstream(dir / "manifest.json") << meta.dump(2) << "\n";
}

inline DatasetManifest read_manifest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("manifest directory not found: " + dir.string());
  std::ifstream meta_in(dir / "manifest.json");
  if (!meta_in) throw std::runtime_error("missing manifest.json in " + dir.string());
  const json meta = json::parse(meta_in);
  DatasetManifest m;
  m.name = meta.value("name", dir.filename().string());
  m.weight = meta.value("weight", 0.0);
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann) throw std::runtime_error("missing annotations.jsonl in " + dir.string());
  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json r = json::parse(line);
      Scene s;
      s.image_path = r.at("image_path").get<std::string>();
      s.source_dataset = m.name;
      s.image = read_png(dir / s.image_path);
      if (s.width() != r.at("width").get<int>() || s.height() != r.at("height").get<int>())
        throw std::runtime_error("image size differs from the record");
      for (const auto& f : r.at("faces")) s.faces.push_back(face_from_json(f));
      m.scenes.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error((dir / "annotations.jsonl").string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (meta.contains("num_scenes") && meta["num_scenes"].get<std::size_t>() != m.scenes.size())
    throw std::runtime_error("manifest.json scene count does not match annotations.jsonl in " + dir.string());
  return m;
}

}  // namespace crowdage
