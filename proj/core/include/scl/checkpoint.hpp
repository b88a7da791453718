#pragma once

#include <string>

#include "scl/net.hpp"
#include "scl/train.hpp"

namespace scl {

// Checkpoint header fields. dtype is the tensor dtype code (0 = f32,
// 1 = f64); fused records that the file came out of kernel fusion.
struct CheckpointInfo {
  ModelSpec spec;
  std::uint64_t seed = 0;
  bool fused = false;
  std::uint32_t dtype = 0;
  bool has_optimizer = false;
};

// Binary format (little endian, documented in docs/formats.md):
//   magic "SCKP", u32 version, u64 metadata length + metadata JSON,
//   u64 tensor count, tensor records (name, dtype, rank, extents, values).
// Parameter tensors come in layer order, optimizer buffers afterwards with
// an "opt." name prefix. Identical models serialize to identical bytes.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path,
                     const SgdState<std::type_identity_t<T>>* optimizer = nullptr,
                     bool fused = false);

// Rebuilds the model (and optimizer state, when present and requested).
// Truncated or inconsistent files raise a corrupt-checkpoint error; a dtype
// mismatch against T is an error as well.
template <typename T>
Model<T> load_checkpoint(const std::string& path,
                         SgdState<std::type_identity_t<T>>* optimizer = nullptr,
                         CheckpointInfo* info = nullptr);

}  // namespace scl
