#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dprune/model.hpp"

namespace dprune {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   "DPRN" | u32 version | u32 n + n bytes config record (key=value lines)
//   | u32 tensor count | per tensor: u32 name length, name bytes, u32 rank,
//     u64 dims[rank], f64 payload (row-major) | u32 CRC-32 of all prior bytes
// The config record holds the model config, live-index bookkeeping, adapter
// rank/alpha and any caller metadata (keys prefixed "meta.").
using Metadata = std::map<std::string, std::string>;

std::vector<std::uint8_t> serialize_checkpoint(const TransformerModel& model,
                                               const Metadata& meta = {});
TransformerModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                        Metadata* meta = nullptr);

void save_checkpoint(const TransformerModel& model, const std::string& path,
                     const Metadata& meta = {});
TransformerModel load_checkpoint(const std::string& path, Metadata* meta = nullptr);

std::vector<std::uint8_t> read_file(const std::string& path);
// Writes to a temporary sibling and renames it into place.
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
void write_file(const std::string& path, const std::string& text);

}  // namespace dprune
