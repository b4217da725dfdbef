#pragma once
// File helpers: numeric CSV, little-endian f64 blobs, JSON documents.

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace dynenc {

using Json = nlohmann::json;
namespace fs = std::filesystem;

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CsvTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_double(const std::string& cell, double& out) {
  auto t = trim(cell);
  if (t.empty()) return false;
  // strtod rather than stod: subnormal values set ERANGE but are valid data.
  char* end = nullptr;
  out = std::strtod(t.c_str(), &end);
  return end == t.c_str() + t.size();
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep)) cells.push_back(cell);
  if (!line.empty() && line.back() == sep) cells.emplace_back();
  return cells;
}

}  // namespace detail

// Reads a rectangular numeric CSV. With allow_header, a first line that does
// not parse as numbers is skipped. Blank lines are ignored.
inline CsvTable read_csv(const fs::path& path, bool allow_header = false) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split(line);
    std::vector<double> row;
    row.reserve(cells.size());
    bool ok = true;
    std::size_t bad = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      double v;
      if (!detail::parse_double(cells[c], v)) {
        ok = false;
        bad = c + 1;
        break;
      }
      row.push_back(v);
    }
    if (!ok) {
      if (first && allow_header) {
        first = false;
        continue;
      }
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": non-numeric cell in column " +
                       std::to_string(bad));
    }
    first = false;
    if (t.rows == 0) {
      t.cols = row.size();
    } else if (row.size() != t.cols) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(t.cols) + " columns, found " + std::to_string(row.size()));
    }
    t.values.insert(t.values.end(), row.begin(), row.end());
    ++t.rows;
  }
  if (t.rows == 0) throw ParseError(path.string() + ": no data rows");
  return t;
}

inline void write_csv(const fs::path& path, std::size_t cols, const std::vector<double>& values,
                      const std::string& header = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  if (!header.empty()) out << header << '\n';
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << values[i] << ((i + 1) % cols == 0 ? '\n' : ',');
  }
}

inline void write_f64le(const fs::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
    out.write(reinterpret_cast<const char*>(b), 8);
  }
}

inline std::vector<double> read_f64le(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0) throw ParseError(path.string() + ": size is not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + k])) << (8 * k);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

inline Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace dynenc
