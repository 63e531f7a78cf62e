#pragma once

#include "alter/numerics/adam.hpp"
#include "alter/numerics/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace alter {

/// On-disk layout (text manifest, then binary payload):
///
///     ALTER-CHECKPOINT 1
///     meta <key> <value>              (zero or more)
///     tensor <name> <rows> <cols> <byte offset>
///     payload <byte count>
///     <row-major little-endian float64 payload>
struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Matrix>> tensors;

    const Matrix* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

/// Parameter values in store order.
Checkpoint snapshot(const ParamStore& store);
/// Copies matching tensors into the store; every store parameter must be
/// present with its shape unless `allow_missing`.
void restore(ParamStore& store, const Checkpoint& ckpt, bool allow_missing = false);

void append_adam_state(Checkpoint& ckpt, const AdamState& state);
void restore_adam_state(const Checkpoint& ckpt, AdamState& state);

/// Stable digest of the raw bytes of the given parameters.
std::uint64_t parameter_digest(const std::vector<const Parameter*>& params);

}  // namespace alter
