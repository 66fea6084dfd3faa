// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/flatgeo.hpp"
#include "flatmae/io.hpp"
#include "flatmae/prep.hpp"

namespace flatmae {

// FMSHRD1: magic "FMSHRD1\0", u32 T/H/W, f64 TR, length-prefixed UTF-8
// subject/run ids, 32-byte grid hash, then T*H*W little-endian f32. One run
// per shard.
struct Shard {
  std::uint32_t t = 0, height = 0, width = 0;
  double tr = 1.0;
  std::string subject_id, run_id;
  std::array<std::uint8_t, 32> grid_hash{};
  std::vector<float> frames;  // t*height*width

  std::size_t frame_size() const { return std::size_t(height) * width; }

  void save(const std::string& path) const {
    if (frames.size() != std::size_t(t) * height * width)
      throw DimensionError("shard frame buffer does not match dims");
    ByteWriter w;
    w.magic("FMSHRD1", 8);
    w.u32(t);
    w.u32(height);
    w.u32(width);
    w.f64(tr);
    w.str(subject_id);
    w.str(run_id);
    w.span(grid_hash.data(), grid_hash.size());
    w.span(frames.data(), frames.size());
    w.to_file(path);
  }

  static Shard load(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    Shard s;
    r.magic("FMSHRD1", 8);
    s.t = r.u32();
    s.height = r.u32();
    s.width = r.u32();
    s.tr = r.f64();
    s.subject_id = r.str();
    s.run_id = r.str();
    r.span(s.grid_hash.data(), s.grid_hash.size());
    s.frames.resize(std::size_t(s.t) * s.height * s.width);
    r.span(s.frames.data(), s.frames.size());
    return s;
  }

  // Header-only read for `info` and shard listings.
  static Shard load_header(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    Shard s;
    r.magic("FMSHRD1", 8);
    s.t = r.u32();
    s.height = r.u32();
    s.width = r.u32();
    s.tr = r.f64();
    s.subject_id = r.str();
    s.run_id = r.str();
    r.span(s.grid_hash.data(), s.grid_hash.size());
    return s;
  }
};

// FMRUN1: raw surface-mapped run on disk, V x T f32 vertex-major.
inline void save_run(const SurfaceRun& run, const std::string& path) {
  ByteWriter w;
  w.magic("FMRUN1", 7);
  w.u32(static_cast<std::uint32_t>(run.n_vertices));
  w.u32(static_cast<std::uint32_t>(run.n_timepoints));
  w.f64(run.tr);
  w.str(run.subject_id);
  w.str(run.run_id);
  std::vector<float> values(run.values.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(run.values[i]);
  w.span(values.data(), values.size());
  w.to_file(path);
}

inline SurfaceRun load_run(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.magic("FMRUN1", 7);
  SurfaceRun run;
  run.n_vertices = r.u32();
  run.n_timepoints = r.u32();
  run.tr = r.f64();
  run.subject_id = r.str();
  run.run_id = r.str();
  std::vector<float> values(run.n_vertices * run.n_timepoints);
  r.span(values.data(), values.size());
  run.values.assign(values.begin(), values.end());
  run.validate();
  return run;
}

// Converts one raw run through the full preprocessing chain into a shard.
inline Shard run_to_shard(const SurfaceRun& raw, const ResampleGrid& grid) {
  Shard shard;
  shard.height = grid.height;
  shard.width = grid.width;
  shard.tr = 1.0;
  shard.subject_id = raw.subject_id;
  shard.run_id = raw.run_id;
  shard.grid_hash = grid.content_hash();
  shard.frames = run_to_frames(raw, grid, &shard.t);
  return shard;
}

// labels.csv: "subject_id,run_id,class" with a header line.
struct LabelRow {
  std::string subject_id, run_id;
  std::uint32_t class_id = 0;
};

inline void save_labels(const std::vector<LabelRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out << "subject_id,run_id,class\n";
  for (const auto& r : rows) out << r.subject_id << "," << r.run_id << "," << r.class_id << "\n";
}

inline std::vector<LabelRow> load_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open: " + path);
  std::vector<LabelRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("subject_id,", 0) == 0) continue;
    }
    std::istringstream ss(line);
    LabelRow row;
    std::string cls;
    if (!std::getline(ss, row.subject_id, ',') || !std::getline(ss, row.run_id, ',') ||
        !std::getline(ss, cls))
      throw FormatError("malformed label row: " + line);
    row.class_id = static_cast<std::uint32_t>(std::stoul(cls));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace flatmae
