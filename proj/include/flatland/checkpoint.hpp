#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "flatland/model.hpp"
#include "flatland/tensor.hpp"

namespace flatland {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

  std::uint16_t u16() {
    const char* p = take(2);
    return static_cast<std::uint16_t>(static_cast<unsigned char>(p[0]) |
                                      (static_cast<unsigned char>(p[1]) << 8));
  }

  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
  }

  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n) {
    const char* p = take(n);
    return std::string(p, n);
  }

  bool done() const { return pos_ == size_; }

 private:
  const char* take(std::size_t n) {
    if (pos_ + n > size_) throw CheckpointError("checkpoint file is truncated");
    const char* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline nlohmann::json spec_to_json(const PyramidSpec& s) {
  return {{"input_resolution", s.input_resolution},
          {"stem_downsample_factor", s.stem_downsample_factor},
          {"base_channels", s.base_channels},
          {"total_channel_add", s.total_channel_add},
          {"num_stages", s.num_stages},
          {"blocks_per_stage", s.blocks_per_stage},
          {"bottleneck_ratio", s.bottleneck_ratio},
          {"widen_factor", s.widen_factor}};
}

inline PyramidSpec spec_from_json(const nlohmann::json& j) {
  PyramidSpec s;
  s.input_resolution = j.at("input_resolution").get<int>();
  s.stem_downsample_factor = j.at("stem_downsample_factor").get<int>();
  s.base_channels = j.at("base_channels").get<int>();
  s.total_channel_add = j.at("total_channel_add").get<int>();
  s.num_stages = j.at("num_stages").get<int>();
  s.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  s.bottleneck_ratio = j.at("bottleneck_ratio").get<int>();
  s.widen_factor = j.at("widen_factor").get<double>();
  return s;
}

inline nlohmann::json shakedrop_to_json(const ShakeDropConfig& c) {
  return {{"gate_prob", c.gate_prob},
          {"alpha_range", {c.alpha_range[0], c.alpha_range[1]}},
          {"gamma_range", {c.gamma_range[0], c.gamma_range[1]}},
          {"literal_coupled_backward", c.literal_coupled_backward},
          {"per_example", c.per_example},
          {"depth_decay", c.depth_decay}};
}

inline ShakeDropConfig shakedrop_from_json(const nlohmann::json& j) {
  ShakeDropConfig c;
  c.gate_prob = j.at("gate_prob").get<double>();
  c.alpha_range = {j.at("alpha_range")[0].get<double>(), j.at("alpha_range")[1].get<double>()};
  c.gamma_range = {j.at("gamma_range")[0].get<double>(), j.at("gamma_range")[1].get<double>()};
  c.literal_coupled_backward = j.at("literal_coupled_backward").get<bool>();
  c.per_example = j.at("per_example").get<bool>();
  c.depth_decay = j.at("depth_decay").get<bool>();
  return c;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'F', 'L', 'C', 'P'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

/// Serialize model architecture plus every parameter and running buffer.
/// Values are stored as raw little-endian f32 payloads, so a save/load
/// cycle reproduces the model bit for bit.
inline void save_checkpoint(const std::string& path, WidePyramidNet& model) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u8(out, kCheckpointVersion);

  nlohmann::json arch = {{"spec", detail::spec_to_json(model.spec())},
                         {"num_classes", model.num_classes()},
                         {"shakedrop", detail::shakedrop_to_json(model.shakedrop())},
                         {"init_seed", model.init_seed()},
                         {"folded", model.is_folded()}};
  const std::string arch_str = arch.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(arch_str.size()));
  out += arch_str;

  std::vector<std::pair<std::string, const Tensor*>> entries;
  for (auto* p : model.parameters()) entries.emplace_back(p->id, &p->value);
  for (auto& [id, buf] : model.buffers()) entries.emplace_back(id, buf);

  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (auto& [id, tensor] : entries) {
    if (id.size() > 0xffff) throw CheckpointError("checkpoint entry id too long: " + id);
    detail::put_u16(out, static_cast<std::uint16_t>(id.size()));
    out += id;
    detail::put_u8(out, static_cast<std::uint8_t>(tensor->ndim()));
    for (int d = 0; d < tensor->ndim(); ++d) detail::put_i32(out, tensor->dim(d));
    for (float v : tensor->data) detail::put_f32(out, v);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open checkpoint file for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing checkpoint file: " + path);
}

/// Rebuild a model from a checkpoint file. The architecture header drives
/// construction; every stored entry must match a parameter or buffer of
/// the rebuilt model in name and shape.
inline WidePyramidNet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint file: " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::ByteReader r(blob.data(), blob.size());

  const std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic): " + path);
  }
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }

  PyramidSpec spec;
  int num_classes = 0;
  ShakeDropConfig shakedrop;
  std::uint64_t init_seed = 0;
  bool folded = false;
  try {
    const nlohmann::json arch = nlohmann::json::parse(r.bytes(r.u32()));
    spec = detail::spec_from_json(arch.at("spec"));
    num_classes = arch.at("num_classes").get<int>();
    shakedrop = detail::shakedrop_from_json(arch.at("shakedrop"));
    init_seed = arch.at("init_seed").get<std::uint64_t>();
    folded = arch.at("folded").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint architecture header: ") + e.what());
  }

  WidePyramidNet model(spec, num_classes, shakedrop, init_seed);
  model.set_train(false);
  if (folded) model = fold_batchnorm(model);

  std::unordered_map<std::string, Tensor*> slots;
  for (auto* p : model.parameters()) slots[p->id] = &p->value;
  for (auto& [id, buf] : model.buffers()) slots[id] = buf;

  const std::uint32_t count = r.u32();
  std::size_t filled = 0;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::string id = r.bytes(r.u16());
    const int nd = r.u8();
    std::vector<int> shape(static_cast<std::size_t>(nd));
    for (auto& d : shape) d = r.i32();
    const std::int64_t numel = shape_numel(shape);
    auto it = slots.find(id);
    if (it == slots.end()) {
      throw CheckpointError("checkpoint entry '" + id + "' has no matching tensor in the model");
    }
    if (it->second->shape != shape) {
      throw CheckpointError("checkpoint entry '" + id + "' has shape " + shape_str(shape) +
                            ", model expects " + shape_str(it->second->shape));
    }
    for (std::int64_t i = 0; i < numel; ++i) it->second->data[static_cast<std::size_t>(i)] = r.f32();
    ++filled;
  }
  if (filled != slots.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(filled) + " tensors, model needs " +
                          std::to_string(slots.size()));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload: " + path);
  return model;
}

}  // namespace flatland
