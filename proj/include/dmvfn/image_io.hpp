#pragma once

// PNG frame folders and dataset manifests.
//
// A clip is a directory of 8-bit PNG frames read in lexicographic order
// (zero-padded names keep that equal to temporal order). A manifest is a JSON
// list whose entries are either a directory string or an object
//   {"dir": "...", "subset": "...", "max_speed": 3.5}
// with relative directories resolved against the manifest's own folder.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmvfn/data.hpp"

namespace dmvfn {

namespace fs = std::filesystem;

/// Reads one PNG (any colour type) as a [1, 3, H, W] frame in [0, 1].
inline Frame load_png(const fs::path& file) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, file.string().c_str()))
    throw DataError("cannot read '" + file.string() + "': " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode '" + file.string() + "': " + img.message);
  }
  const std::int64_t H = img.height, W = img.width;
  Frame f(Shape{1, 3, H, W});
  auto v = f.mutable_values();
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) v[(c * H + y) * W + x] = buf[(y * W + x) * 3 + c] / 255.f;
  return f;
}

/// Writes a [1, 3, H, W] (or [3, H, W]) frame as 8-bit RGB, rounding to nearest.
inline void save_png(const Frame& f, const fs::path& file) {
  const bool batched = f.rank() == 4;
  if (!(batched ? (f.dim(0) == 1 && f.dim(1) == 3) : (f.rank() == 3 && f.dim(0) == 3)))
    throw ShapeError("save_png: expected [1,3,H,W] or [3,H,W], got " + shape_str(f.dims()));
  const auto H = f.dim(f.rank() - 2), W = f.dim(f.rank() - 1);
  std::vector<png_byte> buf(static_cast<std::size_t>(H * W * 3));
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const float e = std::clamp(f.vec()[(c * H + y) * W + x], 0.f, 1.f);
        buf[(y * W + x) * 3 + c] = static_cast<png_byte>(std::lround(e * 255.f));
      }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(W);
  img.height = static_cast<png_uint_32>(H);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, file.string().c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("cannot write '" + file.string() + "': " + img.message);
}

/// All *.png files of `dir`, sorted by name.
inline std::vector<fs::path> list_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline ClipRecord load_sequence(const fs::path& dir) {
  const auto files = list_frames(dir);
  if (files.empty()) throw DataError("no frames in '" + dir.string() + "'");
  ClipRecord clip;
  clip.meta.source = dir.string();
  for (const auto& f : files) {
    clip.frames.push_back(load_png(f));
    if (clip.frames.back().dims() != clip.frames.front().dims())
      throw DataError("frame '" + f.string() + "' has dims " + shape_str(clip.frames.back().dims()) + ", expected " +
                      shape_str(clip.frames.front().dims()));
  }
  return clip;
}

/// Writes frames as 00000.png, 00001.png, ... creating `dir` if needed.
inline void save_frames(const std::vector<Frame>& frames, const fs::path& dir, int first_index = 0) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05d.png", first_index + static_cast<int>(i));
    save_png(frames[i], dir / name);
  }
}

struct ManifestEntry {
  fs::path dir;
  std::string subset;       // "" when untagged
  double max_speed = -1.0;  // -1 when unknown
};

inline std::vector<ManifestEntry> read_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open manifest '" + file.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest '" + file.string() + "': " + e.what());
  }
  if (!j.is_array()) throw DataError("manifest '" + file.string() + "' must be a JSON list");
  const auto base = file.parent_path();
  std::vector<ManifestEntry> out;
  for (const auto& e : j) {
    ManifestEntry m;
    if (e.is_string()) {
      m.dir = e.get<std::string>();
    } else if (e.is_object() && e.contains("dir") && e["dir"].is_string()) {
      m.dir = e["dir"].get<std::string>();
      m.subset = e.value("subset", std::string{});
      m.max_speed = e.value("max_speed", -1.0);
    } else {
      throw DataError("manifest '" + file.string() + "': bad entry " + e.dump());
    }
    if (m.dir.is_relative()) m.dir = base / m.dir;
    out.push_back(std::move(m));
  }
  if (out.empty()) throw DataError("manifest '" + file.string() + "' lists no clips");
  return out;
}

inline void write_manifest(const std::vector<ManifestEntry>& entries, const fs::path& file) {
  nlohmann::json j = nlohmann::json::array();
  const auto base = file.parent_path();
  for (const auto& m : entries) {
    nlohmann::json e;
    e["dir"] = m.dir.is_absolute() && !base.empty() ? fs::relative(m.dir, base).string() : m.dir.string();
    if (!m.subset.empty()) e["subset"] = m.subset;
    if (m.max_speed >= 0) e["max_speed"] = m.max_speed;
    j.push_back(std::move(e));
  }
  std::ofstream out(file);
  if (!out) throw DataError("cannot write manifest '" + file.string() + "'");
  out << j.dump(2) << "\n";
}

/// Loads every clip of a manifest and fills in subset / motion metadata.
inline std::vector<ClipRecord> load_manifest(const fs::path& file) {
  std::vector<ClipRecord> clips;
  for (const auto& m : read_manifest(file)) {
    auto clip = load_sequence(m.dir);
    clip.meta.max_speed = m.max_speed;
    clip.meta.motion_bin = m.max_speed >= 0 ? motion_bin_for(m.max_speed) : "";
    clip.meta.subset = m.subset.empty() ? "all" : m.subset;
    clips.push_back(std::move(clip));
  }
  return clips;
}

}  // namespace dmvfn
