// Copyright 2026 the capseg authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CAPSEG_IO_HPP
#define CAPSEG_IO_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace capseg::io {

// flat named-array container used for checkpoints; raw f64 bytes round-trip
// bitwise. u64 payloads (rng states) are bit-cast into doubles by callers.
struct ArrayEntry {
  std::vector<int> shape;
  std::vector<double> data;
};
using NamedArrays = std::map<std::string, ArrayEntry>;

void save_arrays(const std::string& path, const NamedArrays& arrays);
NamedArrays load_arrays(const std::string& path);

// plain-text manifest, one key=value per line, keys sorted
void save_manifest(const std::string& path, const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> load_manifest(const std::string& path);

// 16-bit binary PPM (P6), values clamped from [0,1]; data is H*W*3 row-major
void write_ppm16(const std::string& path, int h, int w, const std::vector<double>& rgb);
// 8-bit binary PGM (P5) for binary masks; nonzero -> 255
void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& mask);
std::vector<double> read_ppm16(const std::string& path, int* h, int* w);
std::vector<std::uint8_t> read_pgm(const std::string& path, int* h, int* w);

// deterministic float formatting shared by every CSV writer
std::string fmt_double(double v);

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row);
  int column(const std::string& name) const;  // -1 when absent
  // throws SchemaError naming the column when absent
  int require_column(const std::string& name) const;
  std::string to_string() const;
  void save(const std::string& path) const;
  static Csv load(const std::string& path);
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace capseg::io

#endif  // CAPSEG_IO_HPP
