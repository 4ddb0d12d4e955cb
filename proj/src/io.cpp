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

#include "capseg/io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "capseg/common.hpp"

namespace capseg::io {

namespace {
constexpr char kMagic[] = "CAPSEGA1";

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  data_require(static_cast<bool>(is), "truncated array container");
  return v;
}
}  // namespace

void save_arrays(const std::string& path, const NamedArrays& arrays) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  data_require(static_cast<bool>(os), "cannot open for write: " + path);
  os.write(kMagic, 8);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, e] : arrays) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(e.shape.size()));
    long long n = 1;
    for (int d : e.shape) {
      put<std::int32_t>(os, d);
      n *= d;
    }
    data_require(static_cast<long long>(e.data.size()) == n, "array size/shape mismatch: " + name);
    os.write(reinterpret_cast<const char*>(e.data.data()),
             static_cast<std::streamsize>(sizeof(double) * e.data.size()));
  }
  data_require(static_cast<bool>(os), "write failed: " + path);
}

NamedArrays load_arrays(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  data_require(static_cast<bool>(is), "cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  data_require(static_cast<bool>(is) && std::memcmp(magic, kMagic, 8) == 0,
               "bad container magic: " + path);
  const auto count = get<std::uint32_t>(is);
  NamedArrays out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = get<std::uint8_t>(is);
    ArrayEntry e;
    long long n = 1;
    for (int d = 0; d < ndim; ++d) {
      e.shape.push_back(get<std::int32_t>(is));
      n *= e.shape.back();
    }
    e.data.resize(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(sizeof(double) * e.data.size()));
    data_require(static_cast<bool>(is), "truncated array data: " + name);
    out.emplace(std::move(name), std::move(e));
  }
  return out;
}

void save_manifest(const std::string& path, const std::map<std::string, std::string>& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
  write_text_file(path, os.str());
}

std::map<std::string, std::string> load_manifest(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::istringstream is(read_text_file(path));
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    data_require(eq != std::string::npos, "bad manifest line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void write_ppm16(const std::string& path, int h, int w, const std::vector<double>& rgb) {
  data_require(static_cast<long long>(rgb.size()) == 3ll * h * w, "ppm: bad buffer size");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  data_require(static_cast<bool>(os), "cannot open for write: " + path);
  os << "P6\n" << w << " " << h << "\n65535\n";
  std::vector<unsigned char> buf(static_cast<size_t>(h) * w * 6);
  for (size_t i = 0; i < rgb.size(); ++i) {
    double v = std::min(1.0, std::max(0.0, rgb[i]));
    const auto q = static_cast<unsigned>(v * 65535.0 + 0.5);
    buf[2 * i] = static_cast<unsigned char>(q >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& mask) {
  data_require(static_cast<long long>(mask.size()) == 1ll * h * w, "pgm: bad buffer size");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  data_require(static_cast<bool>(os), "cannot open for write: " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> buf(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) buf[i] = mask[i] ? 255 : 0;
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

namespace {
void read_pnm_header(std::ifstream& is, const char* magic, int* h, int* w, int* maxval) {
  std::string m;
  is >> m;
  data_require(m == magic, std::string("expected ") + magic + " header");
  is >> *w >> *h >> *maxval;
  is.get();  // single whitespace after maxval
  data_require(static_cast<bool>(is), "bad pnm header");
}
}  // namespace

std::vector<double> read_ppm16(const std::string& path, int* h, int* w) {
  std::ifstream is(path, std::ios::binary);
  data_require(static_cast<bool>(is), "cannot open: " + path);
  int maxval = 0;
  read_pnm_header(is, "P6", h, w, &maxval);
  data_require(maxval == 65535, "expected 16-bit ppm");
  std::vector<unsigned char> buf(static_cast<size_t>(*h) * *w * 6);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  data_require(static_cast<bool>(is), "truncated ppm");
  std::vector<double> rgb(static_cast<size_t>(*h) * *w * 3);
  for (size_t i = 0; i < rgb.size(); ++i) {
    const unsigned q = (static_cast<unsigned>(buf[2 * i]) << 8) | buf[2 * i + 1];
    rgb[i] = q / 65535.0;
  }
  return rgb;
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int* h, int* w) {
  std::ifstream is(path, std::ios::binary);
  data_require(static_cast<bool>(is), "cannot open: " + path);
  int maxval = 0;
  read_pnm_header(is, "P5", h, w, &maxval);
  std::vector<unsigned char> buf(static_cast<size_t>(*h) * *w);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  data_require(static_cast<bool>(is), "truncated pgm");
  std::vector<std::uint8_t> mask(buf.size());
  for (size_t i = 0; i < buf.size(); ++i) mask[i] = buf[i] >= 128 ? 1 : 0;
  return mask;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void Csv::add_row(std::vector<std::string> row) {
  contract_require(row.size() == header.size(), "csv row width mismatch");
  rows.push_back(std::move(row));
}

int Csv::column(const std::string& name) const {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

int Csv::require_column(const std::string& name) const {
  const int c = column(name);
  if (c < 0) throw SchemaError("missing csv column: " + name);
  return c;
}

std::string Csv::to_string() const {
  std::ostringstream os;
  for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n";
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << "\n";
  }
  return os.str();
}

void Csv::save(const std::string& path) const { write_text_file(path, to_string()); }

Csv Csv::load(const std::string& path) {
  Csv csv;
  std::istringstream is(read_text_file(path));
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    if (first) {
      csv.header = std::move(cells);
      first = false;
    } else {
      data_require(cells.size() == csv.header.size(), "ragged csv row in " + path);
      csv.rows.push_back(std::move(cells));
    }
  }
  return csv;
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  data_require(static_cast<bool>(is), "cannot open: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  data_require(static_cast<bool>(os), "cannot open for write: " + path);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  data_require(static_cast<bool>(os), "write failed: " + path);
}

}  // namespace capseg::io
