// Copyright 2026 The TIMI Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef TIMI_IO_HPP
#define TIMI_IO_HPP

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "timi/latent_field.hpp"

namespace timi::io {

static_assert(std::endian::native == std::endian::little,
              "blob files are little-endian; add byte swapping for this target");

namespace fs = std::filesystem;

// Shortest text that round-trips a double (17 significant digits).
inline std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << text;
  if (!out) throw Error("io", "short write to " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error("io", path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

// Writes `<stem>.json` (shape header) and `<stem>.f64` (raw little-endian doubles).
inline void write_blob(const fs::path& stem, const std::vector<std::size_t>& shape,
                       std::span<const double> data) {
  std::size_t expected = 1;
  for (std::size_t s : shape) expected *= s;
  if (expected != data.size()) throw Error("shape", "blob shape does not match data length");
  nlohmann::json header;
  header["shape"] = shape;
  header["dtype"] = "f64";
  header["layout"] = "channel-major,row-major";
  write_text(fs::path(stem).concat(".json"), header.dump() + "\n");
  std::ofstream out(fs::path(stem).concat(".f64"), std::ios::binary);
  if (!out) throw Error("io", "cannot write " + stem.string() + ".f64");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!out) throw Error("io", "short write to " + stem.string() + ".f64");
}

struct Blob {
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

inline Blob read_blob(const fs::path& stem) {
  const auto header = read_json(fs::path(stem).concat(".json"));
  Blob blob;
  try {
    if (header.at("dtype") != "f64") throw Error("io", "unsupported dtype in " + stem.string());
    blob.shape = header.at("shape").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("io", stem.string() + ".json: " + e.what());
  }
  std::size_t n = 1;
  for (std::size_t s : blob.shape) n *= s;
  const fs::path raw = fs::path(stem).concat(".f64");
  std::error_code ec;
  const auto bytes = fs::file_size(raw, ec);
  if (ec || bytes != n * sizeof(double)) throw Error("io", raw.string() + " has the wrong size");
  blob.data.resize(n);
  std::ifstream in(raw, std::ios::binary);
  in.read(reinterpret_cast<char*>(blob.data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw Error("io", "cannot read " + raw.string());
  return blob;
}

inline void write_field(const fs::path& stem, const LatentField& f) {
  write_blob(stem, {f.channels(), f.dims().depth, f.dims().height, f.dims().width}, f.data());
}

inline LatentField read_field(const fs::path& stem) {
  Blob blob = read_blob(stem);
  if (blob.shape.size() != 4) throw Error("io", stem.string() + " is not a C,D,H,W field");
  return LatentField(blob.shape[0], {blob.shape[1], blob.shape[2], blob.shape[3]},
                     std::move(blob.data));
}

// Occupancy grids travel as single-channel 0/1 fields.
inline void write_grid(const fs::path& stem, const VoxelGrid& g) {
  std::vector<double> data(g.cells.begin(), g.cells.end());
  write_blob(stem, {1, g.dims.depth, g.dims.height, g.dims.width}, data);
}

inline VoxelGrid read_grid(const fs::path& stem) {
  const LatentField f = read_field(stem);
  VoxelGrid g(f.dims());
  for (std::size_t v = 0; v < g.cells.size(); ++v) g.cells[v] = f.at(0, v) > 0.5 ? 1 : 0;
  return g;
}

}  // namespace timi::io

#endif  // TIMI_IO_HPP
