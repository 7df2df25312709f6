#pragma once

// Extended-XYZ reading and writing.
//
//   <atom count>
//   Properties=species:S:1:pos:R:3[:forces:R:3] [energy=<eV>] [other key=value ...]
//   <symbol> <x> <y> <z> [<fx> <fy> <fz>]
//
// Records are concatenated. Floats are written with 17 significant digits.

#include <array>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dimekit/errors.hpp"
#include "dimekit/geometry.hpp"

namespace dimekit {

inline constexpr std::array<std::string_view, 87> kElementSymbols = {
    "",   "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",  "S",  "Cl",
    "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br",
    "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",
    "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu",
    "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn"};

/// Atomic number of an element symbol, or 0 if unknown.
inline int atomic_number(std::string_view symbol) {
  for (std::size_t z = 1; z < kElementSymbols.size(); ++z)
    if (kElementSymbols[z] == symbol) return static_cast<int>(z);
  return 0;
}

inline std::string element_symbol(int z) {
  if (z < 1 || z >= static_cast<int>(kElementSymbols.size())) return "Z" + std::to_string(z);
  return std::string(kElementSymbols[static_cast<std::size_t>(z)]);
}

/// Shortest-round-trip-safe text for a double: 17 significant digits.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

/// key=value pairs of the comment line; values may be double-quoted.
inline std::map<std::string, std::string> parse_comment(std::string_view line, std::size_t lineno) {
  std::map<std::string, std::string> kv;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    std::size_t k = i;
    while (k < line.size() && line[k] != '=' && !std::isspace(static_cast<unsigned char>(line[k]))) ++k;
    std::string key(line.substr(i, k - i));
    if (k >= line.size() || line[k] != '=') {
      kv[key] = "T";  // bare flag
      i = k;
      continue;
    }
    ++k;
    std::string value;
    if (k < line.size() && line[k] == '"') {
      const auto close = line.find('"', k + 1);
      if (close == std::string_view::npos) throw ParseError(lineno, "unterminated quoted value for key " + key);
      value = std::string(line.substr(k + 1, close - k - 1));
      i = close + 1;
    } else {
      std::size_t e = k;
      while (e < line.size() && !std::isspace(static_cast<unsigned char>(line[e]))) ++e;
      value = std::string(line.substr(k, e - k));
      i = e;
    }
    kv[key] = value;
  }
  return kv;
}

inline double parse_double(const std::string& s, std::size_t lineno, const char* what) {
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError(lineno, std::string("invalid ") + what + " value '" + s + "'");
  return v;
}

struct Column {
  std::string name;
  char type;
  int count;
  int offset;
};

inline std::vector<Column> parse_properties(const std::string& spec, std::size_t lineno) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() % 3 != 0) throw ParseError(lineno, "Properties must be name:type:count triples");
  std::vector<Column> cols;
  int offset = 0;
  for (std::size_t i = 0; i < parts.size(); i += 3) {
    int n = 0;
    const auto res = std::from_chars(parts[i + 2].data(), parts[i + 2].data() + parts[i + 2].size(), n);
    if (res.ec != std::errc() || n < 1 || parts[i + 1].size() != 1)
      throw ParseError(lineno, "bad Properties entry " + parts[i] + ":" + parts[i + 1] + ":" + parts[i + 2]);
    cols.push_back({parts[i], parts[i + 1][0], n, offset});
    offset += n;
  }
  return cols;
}

}  // namespace detail

inline std::vector<AtomicConfiguration> parse_extxyz(std::istream& in) {
  std::vector<AtomicConfiguration> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto count_fields = detail::split_ws(line);
    if (count_fields.empty()) continue;  // blank separator lines
    int n = 0;
    {
      const auto& t = count_fields[0];
      const auto res = std::from_chars(t.data(), t.data() + t.size(), n);
      if (count_fields.size() != 1 || res.ec != std::errc() || res.ptr != t.data() + t.size() || n < 1)
        throw ParseError(lineno, "expected a positive atom count, got '" + line + "'");
    }
    if (!std::getline(in, line)) throw ParseError(lineno + 1, "missing comment line");
    ++lineno;
    const auto kv = detail::parse_comment(line, lineno);
    std::vector<detail::Column> cols;
    if (auto it = kv.find("Properties"); it != kv.end()) {
      cols = detail::parse_properties(it->second, lineno);
    } else {
      cols = {{"species", 'S', 1, 0}, {"pos", 'R', 3, 1}};
    }
    const detail::Column* species = nullptr;
    const detail::Column* pos = nullptr;
    const detail::Column* forces = nullptr;
    int width = 0;
    for (const auto& c : cols) {
      if (c.name == "species") species = &c;
      if (c.name == "pos") pos = &c;
      if (c.name == "forces") forces = &c;
      width += c.count;
    }
    if (!species || species->count != 1 || !pos || pos->count != 3 || (forces && forces->count != 3))
      throw ParseError(lineno, "Properties must contain species:S:1 and pos:R:3 (forces:R:3 optional)");

    AtomicConfiguration c;
    if (auto it = kv.find("energy"); it != kv.end()) c.energy = detail::parse_double(it->second, lineno, "energy");
    if (forces) c.forces.emplace();
    for (int a = 0; a < n; ++a) {
      if (!std::getline(in, line)) throw ParseError(lineno + 1, "unexpected end of file inside a record");
      ++lineno;
      const auto f = detail::split_ws(line);
      if (static_cast<int>(f.size()) != width)
        throw ParseError(lineno, "expected " + std::to_string(width) + " fields, got " + std::to_string(f.size()));
      const int z = atomic_number(f[species->offset]);
      if (z == 0) throw ParseError(lineno, "unknown element symbol '" + f[species->offset] + "'");
      c.atomic_numbers.push_back(z);
      Vec3 x;
      for (int k = 0; k < 3; ++k) x[k] = detail::parse_double(f[pos->offset + k], lineno, "coordinate");
      if (!x.allFinite()) throw ParseError(lineno, "non-finite coordinate");
      c.positions.push_back(x);
      if (forces) {
        Vec3 g;
        for (int k = 0; k < 3; ++k) g[k] = detail::parse_double(f[forces->offset + k], lineno, "force");
        c.forces->push_back(g);
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline void write_extxyz(std::ostream& os, std::span<const AtomicConfiguration> configs) {
  for (const auto& c : configs) {
    c.validate();
    os << c.size() << '\n';
    os << "Properties=species:S:1:pos:R:3" << (c.forces ? ":forces:R:3" : "");
    if (c.energy) os << " energy=" << format_double(*c.energy);
    os << '\n';
    for (std::size_t a = 0; a < c.size(); ++a) {
      os << element_symbol(c.atomic_numbers[a]);
      for (int k = 0; k < 3; ++k) os << ' ' << format_double(c.positions[a][k]);
      if (c.forces)
        for (int k = 0; k < 3; ++k) os << ' ' << format_double((*c.forces)[a][k]);
      os << '\n';
    }
  }
}

inline std::vector<AtomicConfiguration> read_extxyz_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  try {
    return parse_extxyz(in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.detail() + " (in " + path + ")");
  }
}

inline void write_extxyz_file(const std::string& path, std::span<const AtomicConfiguration> configs) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot open " + path + " for writing");
  write_extxyz(os, configs);
  if (!os) throw InputError("write failed: " + path);
}

}  // namespace dimekit
