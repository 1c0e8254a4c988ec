#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d2p/optim.hpp"
#include "d2p/tensor.hpp"

namespace d2p {

struct StoredTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::kF32;
  std::vector<double> values;  // exact copies of the stored values
};

// Named parameters plus the configuration text that rebuilds the model,
// optionally with optimizer state and the data cursor for resuming.
//
// Binary layout, little-endian:
//   "D2PC", u32 version, u64 epoch, u64 cursor, u64 manifest bytes, manifest
//   u32 tensor count, then per tensor:
//     u32 name bytes, name, u32 dtype (1 f32, 2 f64), u32 rank, u64 dims[rank],
//     values in the tensor dtype
//   u8 has optimizer; if set: u64 step, u32 count, then per moment pair
//     u64 n, f64 m[n], f64 v[n]
struct Checkpoint {
  std::string manifest;
  std::vector<StoredTensor> tensors;
  std::optional<AdamState> optimizer;
  std::uint64_t epoch = 0;   // next epoch to run
  std::uint64_t cursor = 0;  // next batch within that epoch
};

Checkpoint capture(const ParameterList& params, std::string manifest);
// Copies stored values into `params`; names, order, shapes and dtypes must
// match exactly (DataError otherwise).
void restore(const Checkpoint& checkpoint, const ParameterList& params);

std::vector<unsigned char> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

// Element-wise mean of the parameters. Manifests, names and shapes must
// agree; optimizer state and cursors are dropped.
Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints);

}  // namespace d2p
