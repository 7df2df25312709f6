#pragma once

// Checkpoint container:
//
//   "DIMEKIT1"                      8-byte magic, carries the format version
//   u64 header_length, header       JSON text: model config, reference energies
//   u64 tensor_count
//   per tensor:
//     u32 name_length, name
//     u32 rank (always 2), u64 rows, u64 cols
//     rows * cols IEEE-754 doubles, row-major
//
// All integers and doubles are little-endian.

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>

#include "dimekit/errors.hpp"
#include "dimekit/model.hpp"

namespace dimekit {

inline constexpr char kCheckpointMagic[9] = "DIMEKIT1";

struct Checkpoint {
  ModelConfig config;
  ParameterStore params;
  /// Per-element energy offsets (eV) subtracted from labels before training.
  std::map<int, double> reference_energies;
};

namespace detail {
template <class T>
void write_le(std::ostream& os, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(v);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  os.write(bytes, sizeof(U));
}

template <class T>
T read_le(std::istream& is) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw InputError("checkpoint: truncated file");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}
}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["model"] = ckpt.config;
  nlohmann::json refs = nlohmann::json::object();
  for (const auto& [z, e] : ckpt.reference_energies) refs[std::to_string(z)] = e;
  header["reference_energies"] = refs;
  const std::string text = header.dump(2);
  os.write(kCheckpointMagic, 8);
  detail::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_le<std::uint64_t>(os, ckpt.params.size());
  for (const auto& e : ckpt.params.entries()) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_le<std::uint32_t>(os, 2);
    detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(e.value.rows()));
    detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(e.value.cols()));
    for (Eigen::Index i = 0; i < e.value.size(); ++i) detail::write_le<double>(os, e.value.data()[i]);
  }
  if (!os) throw InputError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw InputError("checkpoint: bad magic header (expected DIMEKIT1)");
  Checkpoint ckpt;
  const auto header_len = detail::read_le<std::uint64_t>(is);
  if (header_len > (1u << 26)) throw InputError("checkpoint: implausible header length");
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) throw InputError("checkpoint: truncated header");
  try {
    const auto header = nlohmann::json::parse(text);
    ckpt.config = header.at("model").get<ModelConfig>();
    const auto refs = header.value("reference_energies", nlohmann::json::object());
    for (const auto& [z, e] : refs.items()) ckpt.reference_energies[std::stoi(z)] = e.get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const auto count = detail::read_le<std::uint64_t>(is);
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto name_len = detail::read_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw InputError("checkpoint: truncated tensor name");
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank != 2) throw InputError("checkpoint: tensor " + name + " has unsupported rank");
    const auto rows = detail::read_le<std::uint64_t>(is);
    const auto cols = detail::read_le<std::uint64_t>(is);
    if (rows * cols > (1u << 28)) throw InputError("checkpoint: tensor " + name + " is implausibly large");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::read_le<double>(is);
    ckpt.params.add(std::move(name), std::move(m));
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path + " for writing");
  write_checkpoint(os, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace dimekit
