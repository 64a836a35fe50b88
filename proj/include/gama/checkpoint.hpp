#pragma once

// Named-tensor archive: "GAMACKPT" magic, u32 version, u32 count, then per
// tensor u32 name length, name bytes, u32 rows, u32 cols and rows*cols f32
// values. A checkpoint directory holds the archive, a manifest of shapes and
// the model config as JSON.

#include "gama/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gama {

struct NamedTensor {
  std::string name;
  Matrix value;
};

std::vector<std::uint8_t> encode_archive(const ParamStore& store);
std::vector<NamedTensor> decode_archive(std::span<const std::uint8_t> bytes);

// One "name rows cols" line per tensor.
std::string render_manifest(const ParamStore& store);

// Copies archive values into store. Throws ConfigError when a name is missing
// on either side or a shape differs.
void load_into(ParamStore& store, const std::vector<NamedTensor>& tensors);

inline constexpr const char* kArchiveFile = "params.bin";
inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kConfigFile = "config.json";

void save_checkpoint(const std::filesystem::path& dir, const GamaModel& model);
// Rebuilds the architecture from config.json and loads the archive.
GamaModel load_checkpoint(const std::filesystem::path& dir);
// Loads an archive into an existing model; mismatched architecture is a ConfigError.
void resume_checkpoint(const std::filesystem::path& dir, GamaModel& model);

}  // namespace gama
