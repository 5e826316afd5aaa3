#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "forge/finalize.hpp"

namespace forge {

// File layout (little endian):
//   "AFCK" | u32 format version | sections | u32 CRC-32 of all preceding bytes
// Section: 4-byte tag | u64 payload length | payload.
//   "MANI" holds the JSON manifest, one "PARM" per parameter in network order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class PayloadEncoding { dense, sparse, quantized };

const char* to_string(PayloadEncoding e);

struct PayloadInfo {
  std::string parameter;
  PayloadEncoding encoding = PayloadEncoding::dense;
  std::size_t numel = 0;
  std::size_t stored = 0;  // entries carried by the payload (nonpruned)
  std::size_t bytes = 0;   // payload bytes on disk
  double conceptual_bits = 0.0;  // values at their own width plus index overhead
};

struct Footprint {
  std::vector<PayloadInfo> payloads;
  std::size_t dense_bytes = 0;    // every parameter as float32
  std::size_t payload_bytes = 0;  // sum of payload bytes
  std::size_t file_bytes = 0;
};

struct Checkpoint {
  Network net;
  CompressionState state;
  std::map<std::string, std::string> config;  // effective run configuration
  std::string stage;                          // e.g. "baseline" or "step 2"
  double accuracy = -1.0;                     // as reported when saved
  std::string config_hash;
  Footprint footprint;
};

/// FNV-1a 64 over "key=value\n" lines in key order, as 16 hex digits.
std::string config_hash(const std::map<std::string, std::string>& config);

/// Writes atomically (temp file, then rename). Weights with a pruned mask are
/// stored sparse, quantized layers as level indices, everything else dense.
Footprint save_checkpoint(const std::filesystem::path& path, const Network& net, const CompressionState& state,
                          const std::map<std::string, std::string>& config = {}, const std::string& stage = "",
                          double accuracy = -1.0);

std::vector<unsigned char> encode_checkpoint(const Network& net, const CompressionState& state,
                                             const std::map<std::string, std::string>& config,
                                             const std::string& stage, double accuracy, Footprint* footprint = nullptr);

/// Throws FormatError (bad magic or layout), VersionError, or CorruptionError
/// (CRC mismatch).
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);

}  // namespace forge
