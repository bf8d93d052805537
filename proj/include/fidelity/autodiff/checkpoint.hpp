#pragma once

#include "fidelity/autodiff/graph.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace fidelity::ad {

// Binary parameter checkpoint:
//   magic "FIDCKPT\0", u32 version,
//   u32 n_meta, n_meta x (u32 len, key bytes, u32 len, value bytes),
//   u32 n_entries, n_entries x (u32 len, UTF-8 name, u32 rank, rank x u32 dim,
//                               product(dims) x little-endian float32).
inline constexpr char checkpoint_magic[8] = {'F', 'I', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t checkpoint_version = 1;

using Metadata = std::map<std::string, std::string>;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  Metadata metadata;
  ParameterSet<float> parameters;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params,
                     const Metadata& metadata = {});

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies values from `source` into same-named, same-shaped entries of `target`.
void assign_parameters(ParameterSet<float>& target, const ParameterSet<float>& source);

}  // namespace fidelity::ad
