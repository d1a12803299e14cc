#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "qvit/model.hpp"

namespace qvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// On disk (little-endian): "QVIT", u32 version, u64 manifest length, the
/// UTF-8 JSON manifest, then the tensor blobs back to back. The manifest
/// lists every tensor with shape, dtype, offset and length relative to the
/// blob section, and an FNV-1a 64 checksum.
struct Checkpoint {
  ModelConfig config;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, QuantizerState>> quantizers;
  std::vector<NamedTensor> tensors;
};

Checkpoint snapshot(QViT& model, std::int64_t step = 0);
std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws FormatError (bad magic or manifest), UnsupportedVersionError and
// IntegrityError (truncation, checksum mismatch).
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(QViT& model, const std::string& path, std::int64_t step = 0);
Checkpoint load_checkpoint(const std::string& path);

// Overwrites parameters and quantizer states. The checkpoint must come from
// a model with an identical configuration.
void apply_checkpoint(QViT& model, const Checkpoint& ckpt);
std::unique_ptr<QViT> model_from_checkpoint(const Checkpoint& ckpt);

std::uint64_t fnv1a64(const void* data, std::size_t size);

}  // namespace qvit
