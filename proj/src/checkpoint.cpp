#include "thinkdraw/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace thinkdraw::ckpt {

namespace {

constexpr char kMagic[8] = {'T', 'D', 'C', 'K', 'P', 'T', '\0', '\n'};

static_assert(sizeof(float) == 4);

// Byte-order independent little-endian encoding of unsigned integers.
template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::uint64_t fnv1a(const char* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string shape_text(const Shape& s) { return shape_str(s); }

}  // namespace

std::string serialize(const Checkpoint& c) {
  std::string payload;
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const auto& [name, t] : c.tensors) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["dtype"] = "f32";
    e["shape"] = t.shape();
    e["offset"] = payload.size();
    e["bytes"] = t.size() * sizeof(float);
    entries.push_back(std::move(e));
    for (float v : t.data()) put_le(payload, std::bit_cast<std::uint32_t>(v));
  }
  nlohmann::ordered_json header;
  header["meta"] = c.meta;
  header["tensors"] = std::move(entries);
  header["payload_bytes"] = payload.size();
  header["payload_fnv1a"] = fnv1a(payload.data(), payload.size());
  const std::string h = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le(out, kFormatVersion);
  put_le(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += payload;
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  constexpr std::size_t fixed = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < fixed) throw CheckpointError("corrupt header: file is shorter than the fixed preamble");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw CheckpointError("corrupt header: bad magic");
  const auto version = get_le<std::uint32_t>(bytes.data() + sizeof(kMagic));
  if (version != kFormatVersion) {
    throw CheckpointError("version mismatch: file has format " + std::to_string(version) + ", expected " +
                          std::to_string(kFormatVersion));
  }
  const auto hlen = get_le<std::uint64_t>(bytes.data() + sizeof(kMagic) + 4);
  if (hlen > bytes.size() - fixed) throw CheckpointError("corrupt header: header runs past the end of the file");

  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(fixed),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(fixed + hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt header: ") + e.what());
  }

  Checkpoint c;
  try {
    const std::size_t base = fixed + hlen;
    const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (bytes.size() - base != payload_bytes) {
      throw CheckpointError("corrupt header: payload has " + std::to_string(bytes.size() - base) +
                            " bytes, header declares " + std::to_string(payload_bytes));
    }
    if (fnv1a(bytes.data() + base, payload_bytes) != header.at("payload_fnv1a").get<std::uint64_t>()) {
      throw CheckpointError("corrupt payload: checksum mismatch");
    }
    c.meta = header.at("meta");
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      if (e.at("dtype").get<std::string>() != "f32") {
        throw CheckpointError("corrupt header: tensor '" + name + "' has unsupported dtype");
      }
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto nbytes = e.at("bytes").get<std::uint64_t>();
      if (nbytes != shape_numel(shape) * sizeof(float) || offset > payload_bytes || nbytes > payload_bytes - offset) {
        throw CheckpointError("corrupt header: tensor '" + name + "' does not fit the payload");
      }
      Tensor<float> t(shape);
      const char* p = bytes.data() + base + offset;
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
      if (!c.tensors.emplace(name, std::move(t)).second) {
        throw CheckpointError("corrupt header: duplicate tensor '" + name + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt header: ") + e.what());
  }
  return c;
}

void save(const Checkpoint& c, const std::string& path) {
  const std::string bytes = serialize(c);
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, target);
}

Checkpoint load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

void put(Checkpoint& c, const std::string& component, const ParamStore<float>& params) {
  for (const auto& [name, t] : params.all()) c.tensors.insert_or_assign(component + "/" + name, t);
}

void restore(const Checkpoint& c, const std::string& component, ParamStore<float>& params) {
  const std::string prefix = component + "/";
  for (auto& [name, live] : params.all()) {
    const std::string key = prefix + name;
    auto it = c.tensors.find(key);
    if (it == c.tensors.end()) throw CheckpointError("checkpoint is missing tensor '" + key + "'");
    if (it->second.shape() != live.shape()) {
      throw CheckpointError("shape mismatch for tensor '" + key + "': checkpoint " + shape_text(it->second.shape()) +
                            ", model " + shape_text(live.shape()));
    }
  }
  for (auto it = c.tensors.lower_bound(prefix); it != c.tensors.end() && it->first.starts_with(prefix); ++it) {
    if (!params.contains(it->first.substr(prefix.size()))) {
      throw CheckpointError("checkpoint tensor '" + it->first + "' has no counterpart in the model");
    }
  }
  for (auto& [name, live] : params.all()) live = c.tensors.at(prefix + name);
}

void put_optimizer(Checkpoint& c, const std::string& component, const Adam<float>& opt) {
  for (const auto& [name, t] : opt.first_moments()) c.tensors.insert_or_assign(component + ".adam_m/" + name, t);
  for (const auto& [name, t] : opt.second_moments()) c.tensors.insert_or_assign(component + ".adam_v/" + name, t);
  c.meta["optimizers"][component] = opt.steps();
}

void restore_optimizer(const Checkpoint& c, const std::string& component, const ParamStore<float>& params,
                       Adam<float>& opt) {
  if (!c.meta.contains("optimizers") || !c.meta["optimizers"].contains(component)) {
    throw CheckpointError("checkpoint has no optimizer state for '" + component + "'");
  }
  opt.set_steps(c.meta["optimizers"][component].get<long>());
  opt.first_moments().clear();
  opt.second_moments().clear();
  for (const char* kind : {".adam_m/", ".adam_v/"}) {
    const std::string prefix = component + kind;
    auto& dst = std::string(kind) == ".adam_m/" ? opt.first_moments() : opt.second_moments();
    for (auto it = c.tensors.lower_bound(prefix); it != c.tensors.end() && it->first.starts_with(prefix); ++it) {
      const std::string name = it->first.substr(prefix.size());
      if (!params.contains(name)) {
        throw CheckpointError("optimizer tensor '" + it->first + "' has no counterpart in the model");
      }
      if (params.at(name).shape() != it->second.shape()) {
        throw CheckpointError("shape mismatch for tensor '" + it->first + "': checkpoint " +
                              shape_text(it->second.shape()) + ", model " + shape_text(params.at(name).shape()));
      }
      dst.emplace(name, it->second);
    }
  }
}

bool has_component(const Checkpoint& c, const std::string& component) {
  const std::string prefix = component + "/";
  auto it = c.tensors.lower_bound(prefix);
  return it != c.tensors.end() && it->first.starts_with(prefix);
}

}  // namespace thinkdraw::ckpt
