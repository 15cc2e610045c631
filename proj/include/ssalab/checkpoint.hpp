#pragma once

#include "ssalab/model.hpp"
#include "ssalab/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ssalab {

/// Malformed, truncated or incompatible checkpoint data.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  std::int64_t step = 0;
  std::uint64_t model_seed = 0;
  std::uint64_t data_seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

struct LoadedCheckpoint {
  Model model;
  std::optional<AdamState> optimizer;
  CheckpointMeta meta;
};

/// Layout: "SSALABCK", u32 version, u64 header size, a UTF-8 JSON header
/// (model config, meta, parameter manifest, optimizer flag), then every
/// parameter as little-endian doubles in declaration order, followed by the
/// Adam first and second moments when present.
inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'A', 'L', 'A', 'B', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> save_checkpoint(const Model& model, const AdamState* optimizer,
                                          const CheckpointMeta& meta);
LoadedCheckpoint load_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint_file(const std::filesystem::path& file, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_checkpoint_file(const std::filesystem::path& file);

/// FNV-1a 64-bit digest, printed as 16 hex digits.
std::string digest_hex(const std::vector<std::uint8_t>& bytes);

}  // namespace ssalab
