// Binary model-set checkpoints.
//
// Layout (all integers little-endian):
//   magic "ADSJ" | u32 version | model config | u8 provenance | u32 members |
//   per member: u32 tensor count; per tensor: u16 name len + name,
//     u8 ndim + i64 dims, float32 values |
//   u64 training-config hash | u64 seed
#pragma once

#include "disjoint/nn.hpp"

#include <string>

namespace disjoint {

struct CheckpointMeta {
  uint64_t train_config_hash = 0;
  uint64_t seed = 0;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelSet<float>& set, const CheckpointMeta& meta,
                     const std::string& path);
ModelSet<float> load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

// Values are stored in float32; a double set is narrowed on save.
template <typename S>
void save_checkpoint_as(const ModelSet<S>& set, const CheckpointMeta& meta,
                        const std::string& path) {
  if constexpr (std::is_same_v<S, float>) {
    save_checkpoint(set, meta, path);
  } else {
    ModelSet<float> narrowed;
    narrowed.config = set.config;
    narrowed.provenance = set.provenance;
    for (const auto& m : set.members) narrowed.members.push_back(m.template cast<float>());
    save_checkpoint(narrowed, meta, path);
  }
}

template <typename S>
ModelSet<S> load_checkpoint_as(const std::string& path, CheckpointMeta* meta = nullptr) {
  ModelSet<float> set = load_checkpoint(path, meta);
  if constexpr (std::is_same_v<S, float>) {
    return set;
  } else {
    ModelSet<S> widened;
    widened.config = set.config;
    widened.provenance = set.provenance;
    for (const auto& m : set.members) widened.members.push_back(m.template cast<S>());
    return widened;
  }
}

}  // namespace disjoint
