#include "fidelity/autodiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace fidelity::ad {
namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw CheckpointError("checkpoint truncated");
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

std::string get_string(std::istream& in) {
  const auto len = get_u32(in);
  if (len > (1u << 24)) throw CheckpointError("checkpoint string length out of range");
  std::string s(len, '\0');
  if (len > 0 && !in.read(s.data(), len)) throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params,
                     const Metadata& metadata) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  out.write(checkpoint_magic, sizeof checkpoint_magic);
  put_u32(out, checkpoint_version);
  put_u32(out, static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [key, value] : metadata) {
    put_string(out, key);
    put_string(out, value);
  }
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::uint32_t i = 0; i < params.size(); ++i) {
    const ParamId id{i};
    const auto& v = params.value(id);
    put_string(out, params.name(id));
    put_u32(out, 2);
    put_u32(out, static_cast<std::uint32_t>(v.rows()));
    put_u32(out, static_cast<std::uint32_t>(v.cols()));
    for (Eigen::Index k = 0; k < v.size(); ++k) put_u32(out, std::bit_cast<std::uint32_t>(v.data()[k]));
  }
  if (!out) throw CheckpointError("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  char magic[sizeof checkpoint_magic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, checkpoint_magic, sizeof magic) != 0) {
    throw CheckpointError("'" + path.string() + "' is not a parameter checkpoint");
  }
  const auto version = get_u32(in);
  if (version != checkpoint_version) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto n_meta = get_u32(in);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto key = get_string(in);
    ck.metadata[key] = get_string(in);
  }
  const auto n_entries = get_u32(in);
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    auto name = get_string(in);
    const auto rank = get_u32(in);
    if (rank < 1 || rank > 2) throw CheckpointError("entry '" + name + "' has unsupported rank");
    const auto rows = get_u32(in);
    const auto cols = rank == 2 ? get_u32(in) : 1u;
    Tensorf v(rows, cols);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = std::bit_cast<float>(get_u32(in));
    ck.parameters.add(std::move(name), std::move(v));
  }
  return ck;
}

void assign_parameters(ParameterSet<float>& target, const ParameterSet<float>& source) {
  for (std::uint32_t i = 0; i < target.size(); ++i) {
    const ParamId id{i};
    const auto& name = target.name(id);
    const auto src = source.find(name);
    if (!src) throw CheckpointError("checkpoint lacks parameter '" + name + "'");
    const auto& v = source.value(*src);
    if (shape_of(v) != shape_of(target.value(id))) {
      throw CheckpointError("parameter '" + name + "' shape " + shape_of(v).str() + " vs expected " +
                            shape_of(target.value(id)).str());
    }
    target.value(id) = v;
  }
}

}  // namespace fidelity::ad
