// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// Lossless-enough frame storage: clips live as directories of binary PPM
// (P6) images named 00000.ppm, 00001.ppm, ... Values map linearly between
// [-1, 1] floats and 8-bit bytes.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stitchflow/errors.hpp"
#include "stitchflow/tensor.hpp"

namespace stitchflow {

inline std::uint8_t pixel_to_byte(float v) {
  const float clamped = std::clamp(v, -1.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround((clamped + 1.0f) * 0.5f * 255.0f));
}

inline float byte_to_pixel(std::uint8_t b) {
  return static_cast<float>(b) / 255.0f * 2.0f - 1.0f;
}

/// Writes one frame of a clip as binary PPM.
inline void write_ppm(const std::filesystem::path& path, const Video<float>& clip, int frame) {
  require(frame >= 0 && frame < clip.frames(), "write_ppm: frame index out of range");
  require(clip.channels() == kPixelChannels, "write_ppm: expected 3-channel pixels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactMissing("write_ppm: cannot open " + path.string());
  out << "P6\n" << clip.width() << ' ' << clip.height() << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(clip.width()) * 3);
  for (int y = 0; y < clip.height(); ++y) {
    for (int x = 0; x < clip.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            pixel_to_byte(clip(frame, y, x, c));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw ArtifactMissing("write_ppm: short write to " + path.string());
}

namespace frames_detail {

inline int read_pnm_int(std::istream& in) {
  // Skips whitespace and `#` comments, then reads one decimal integer.
  int ch = in.peek();
  while (ch == '#' || std::isspace(ch)) {
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      in.get();
    }
    ch = in.peek();
  }
  int value = 0;
  if (!(in >> value)) throw ArtifactMissing("read_ppm: malformed header integer");
  return value;
}

}  // namespace frames_detail

/// Reads one PPM file into a single-frame video tensor.
inline Video<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactMissing("read_ppm: cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ArtifactMissing("read_ppm: not a binary PPM: " + path.string());
  const int width = frames_detail::read_pnm_int(in);
  const int height = frames_detail::read_pnm_int(in);
  const int maxval = frames_detail::read_pnm_int(in);
  if (width <= 0 || height <= 0 || maxval != 255) {
    throw ArtifactMissing("read_ppm: unsupported dimensions/maxval in " + path.string());
  }
  in.get();  // single whitespace byte before the raster
  std::vector<std::uint8_t> raster(static_cast<std::size_t>(width) * height * 3);
  in.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (in.gcount() != static_cast<std::streamsize>(raster.size())) {
    throw ArtifactMissing("read_ppm: truncated raster in " + path.string());
  }
  Video<float> frame(1, height, width, kPixelChannels);
  std::size_t i = 0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) frame(0, y, x, c) = byte_to_pixel(raster[i++]);
    }
  }
  return frame;
}

inline std::string frame_file_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d.ppm", index);
  return buf;
}

/// Writes every frame of a clip into dir as 00000.ppm, 00001.ppm, ...
inline void write_clip_frames(const std::filesystem::path& dir, const Video<float>& clip) {
  std::filesystem::create_directories(dir);
  for (int f = 0; f < clip.frames(); ++f) write_ppm(dir / frame_file_name(f), clip, f);
}

/// Reads a clip back from a directory of numbered PPM frames.
inline Video<float> read_clip_frames(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(dir)) {
    throw ArtifactMissing("read_clip_frames: no such directory: " + dir.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
      files.push_back(entry.path());
    }
  }
  if (files.empty()) throw ArtifactMissing("read_clip_frames: no frames in " + dir.string());
  std::sort(files.begin(), files.end());
  const Video<float> first = read_ppm(files.front());
  Video<float> clip(static_cast<int>(files.size()), first.height(), first.width(), kPixelChannels);
  for (std::size_t f = 0; f < files.size(); ++f) {
    const Video<float> frame = read_ppm(files[f]);
    if (frame.height() != clip.height() || frame.width() != clip.width()) {
      throw ShapeError("read_clip_frames: inconsistent frame sizes in " + dir.string());
    }
    for (int y = 0; y < clip.height(); ++y) {
      for (int x = 0; x < clip.width(); ++x) {
        for (int c = 0; c < 3; ++c) {
          clip(static_cast<int>(f), y, x, c) = frame(0, y, x, c);
        }
      }
    }
  }
  return clip;
}

}  // namespace stitchflow
