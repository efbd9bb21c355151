#pragma once

#include <map>
#include <string>

#include "delg/common.hpp"
#include "delg/model.hpp"
#include "delg/tensor.hpp"

namespace delg {

// Checkpoint container: magic "DELGCKPT", version u32, tensor count u32,
// then per tensor {name_len u32, name, rank u32, dims u32..., f64 data},
// all little-endian, closed by a crc32 of everything before it. The model
// configuration rides along as reserved "meta.*" tensors so a checkpoint
// alone is enough to rebuild the network.

inline constexpr char kCheckpointMagic[] = "DELGCKPT";
inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_tensor_map(const std::string& path,
                            const std::map<std::string, Tensor>& tensors) {
  ByteWriter w;
  w.str(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(uint32_t(name.size()));
    w.str(name);
    w.u32(uint32_t(t.rank()));
    for (int d : t.shape) w.u32(uint32_t(d));
    for (double v : t.data) w.f64(v);
  }
  w.write_file_with_crc(path);
}

inline std::map<std::string, Tensor> load_tensor_map(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.check_crc("checkpoint");
  if (r.remaining() < 8 || r.str(8) != kCheckpointMagic)
    fail(ErrorKind::format, "checkpoint: bad magic in " + path);
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    fail(ErrorKind::format,
         "checkpoint: unsupported version " + std::to_string(version));
  const uint32_t count = r.u32();
  std::map<std::string, Tensor> out;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32();
    if (name_len > r.remaining())
      fail(ErrorKind::format, "checkpoint: truncated tensor name");
    const std::string name = r.str(name_len);
    const uint32_t rank = r.u32();
    if (rank > 8) fail(ErrorKind::format, "checkpoint: implausible rank");
    std::vector<int> dims;
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const uint32_t dim = r.u32();
      if (dim == 0 || dim > (1u << 28))
        fail(ErrorKind::format, "checkpoint: implausible dimension");
      dims.push_back(int(dim));
      numel *= dim;
    }
    if (uint64_t(numel) * 8 > r.remaining())
      fail(ErrorKind::format, "checkpoint: truncated tensor data");
    Tensor t(dims.empty() ? std::vector<int>{} : dims);
    for (int64_t k = 0; k < t.numel(); ++k) t[k] = r.f64();
    out.emplace(name, std::move(t));
  }
  return out;
}

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  Tensor attention_sample;  // sorted train-split attention scores, may be empty
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::map<std::string, Tensor> all = ckpt.params;
  const ModelConfig& c = ckpt.config;
  Tensor blocks({int(c.backbone.blocks.size()), 4});
  for (size_t i = 0; i < c.backbone.blocks.size(); ++i) {
    const LayerSpec& b = c.backbone.blocks[i];
    blocks.at(int(i), 0) = b.kernel;
    blocks.at(int(i), 1) = b.channels;
    blocks.at(int(i), 2) = b.stride;
    blocks.at(int(i), 3) = b.residual ? 1.0 : 0.0;
  }
  all["meta.blocks"] = std::move(blocks);
  all["meta.taps"] = Tensor::from(
      {2}, {double(c.backbone.tap_shallow), double(c.backbone.tap_deep)});
  all["meta.dims"] = Tensor::from(
      {5}, {double(c.backbone.input_size), double(c.descriptor_dim),
            double(c.code_dim), double(c.attention_hidden),
            double(c.num_classes)});
  all["meta.gem_power"] = Tensor::from({1}, {c.gem_power});
  all["meta.arcface_margin"] = Tensor::from({1}, {c.arcface_margin});
  if (ckpt.attention_sample.numel() > 0)
    all["meta.attention_sample"] = ckpt.attention_sample;
  save_tensor_map(path, all);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::map<std::string, Tensor> all = load_tensor_map(path);
  auto need = [&](const char* name) -> Tensor {
    auto it = all.find(name);
    if (it == all.end())
      fail(ErrorKind::format, std::string("checkpoint: missing ") + name);
    Tensor t = std::move(it->second);
    all.erase(it);
    return t;
  };
  Checkpoint ckpt;
  Tensor blocks = need("meta.blocks");
  ckpt.config.backbone.blocks.clear();
  for (int i = 0; i < blocks.dim(0); ++i)
    ckpt.config.backbone.blocks.push_back(
        {int(blocks.at(i, 0)), int(blocks.at(i, 1)), int(blocks.at(i, 2)),
         blocks.at(i, 3) != 0.0});
  Tensor taps = need("meta.taps");
  ckpt.config.backbone.tap_shallow = int(taps[0]);
  ckpt.config.backbone.tap_deep = int(taps[1]);
  Tensor dims = need("meta.dims");
  ckpt.config.backbone.input_size = int(dims[0]);
  ckpt.config.descriptor_dim = int(dims[1]);
  ckpt.config.code_dim = int(dims[2]);
  ckpt.config.attention_hidden = int(dims[3]);
  ckpt.config.num_classes = int(dims[4]);
  ckpt.config.gem_power = need("meta.gem_power")[0];
  ckpt.config.arcface_margin = need("meta.arcface_margin")[0];
  if (auto it = all.find("meta.attention_sample"); it != all.end()) {
    ckpt.attention_sample = std::move(it->second);
    all.erase(it);
  }
  ckpt.config.validate();
  ckpt.params = std::move(all);
  return ckpt;
}

}  // namespace delg
