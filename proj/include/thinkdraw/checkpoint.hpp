#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "thinkdraw/numerics/params.hpp"

// Named-tensor container on disk:
//   8 bytes  magic "TDCKPT\0\n"
//   4 bytes  format version (little-endian u32)
//   8 bytes  header length H (little-endian u64)
//   H bytes  JSON header {"meta": {...}, "tensors": [{name, dtype, shape, offset, bytes}], "payload_bytes",
//            "payload_fnv1a"}
//   payload  raw little-endian f32 values, tensors back to back at their offsets
namespace thinkdraw::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::map<std::string, Tensor<float>> tensors;
};

// Serialized bytes of a checkpoint (deterministic for equal inputs).
std::string serialize(const Checkpoint& c);
// Throws CheckpointError on a bad magic, version, header or payload.
Checkpoint deserialize(const std::string& bytes);

// Writes to a temporary sibling and renames it over `path`.
void save(const Checkpoint& c, const std::string& path);
Checkpoint load(const std::string& path);

// Stores every tensor of `params` as "<component>/<name>".
void put(Checkpoint& c, const std::string& component, const ParamStore<float>& params);
// Copies "<component>/<name>" into each live tensor. Every live tensor must be
// present with the same shape and the checkpoint may not carry extra tensors
// under the component; violations throw CheckpointError naming the tensor.
void restore(const Checkpoint& c, const std::string& component, ParamStore<float>& params);

// Optimizer moments as "<component>.adam_m/<name>" and "<component>.adam_v/<name>",
// step count in meta["optimizers"][component].
void put_optimizer(Checkpoint& c, const std::string& component, const Adam<float>& opt);
void restore_optimizer(const Checkpoint& c, const std::string& component, const ParamStore<float>& params,
                       Adam<float>& opt);

bool has_component(const Checkpoint& c, const std::string& component);

}  // namespace thinkdraw::ckpt
