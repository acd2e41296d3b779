#pragma once

#include <string>

#include "gnlab/param_tree.hpp"

namespace gnlab {

/// Binary checkpoint:
///   "GNLAB1"
///   params section: u32 count, then per tensor
///     u32 name length, name bytes, u8 dtype (2 = f64), u32 rank,
///     rank x u64 extents, raw little-endian data
///   state section: same layout
struct Checkpoint {
    NamedTensors params;
    NamedTensors state;
};

inline constexpr std::uint8_t kDtypeF64 = 2;

/// Writes to a temporary file and renames it into place.
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

NamedTensors named(const ParamTree& tree, const std::string& prefix = {});
/// Copies values into `layout` by name; every entry must be present with a
/// matching shape.
void assign_named(ParamTree& layout, const NamedTensors& values, const std::string& prefix = {});

/// Entries whose name starts with `prefix`, with the prefix removed.
NamedTensors with_prefix(const NamedTensors& values, const std::string& prefix);
const Tensor* find_named(const NamedTensors& values, const std::string& name);

/// Integers up to 2^53 stored exactly in a rank-0 tensor.
Tensor counter_tensor(std::uint64_t value);
std::uint64_t counter_value(const Tensor& t);

}  // namespace gnlab
