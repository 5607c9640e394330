#pragma once

// Checkpoint container:
//   "RAMPCKPT" | u32 version | u32 n_meta | (key, value)* |
//   u32 n_tensors | (name, u32 rank, u64 dims[rank], f64 data[])* | u64 fnv1a
// Strings are u32-length-prefixed; all integers and doubles little-endian.
// The trailing checksum covers every preceding byte.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ramp/decoder.hpp"

namespace ramp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::map<std::string, std::string> metadata;
  std::vector<NamedParameter> tensors;

  const Tensor* find(const std::string& name) const;
};

std::string encode_checkpoint(const CheckpointData& data, std::uint32_t version = kCheckpointVersion);
CheckpointData decode_checkpoint(std::string_view bytes, const std::string& source = "<memory>");

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// DecoderConfig as "decoder.*" metadata entries and back.
void put_decoder_config(std::map<std::string, std::string>& meta, const DecoderConfig& cfg);
DecoderConfig get_decoder_config(const std::map<std::string, std::string>& meta);

/// Decoder config plus every parameter.
CheckpointData checkpoint_of(const Decoder& decoder);

/// Copies parameters into `decoder`. A missing tensor or a shape mismatch
/// raises a validation error naming both shapes; nothing is written unless
/// every tensor matches.
void load_parameters(Decoder& decoder, const CheckpointData& data);

/// Decoder built from the stored config and parameters.
Decoder restore_decoder(const CheckpointData& data);

}  // namespace ramp
