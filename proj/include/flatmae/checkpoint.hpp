// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flatmae/common.hpp"
#include "flatmae/io.hpp"
#include "flatmae/mae.hpp"

namespace flatmae {

// FMCKPT1: magic "FMCKPT1\0", u64 JSON length + config echo, u32 tensor
// count, then per tensor: length-prefixed name, u32 rank, u32 dims, f32
// data. Little-endian; round-trips are bit-exact.
struct Checkpoint {
  nlohmann::json config;

  struct Tensor {
    std::string name;
    std::vector<std::uint32_t> shape;
    std::vector<float> data;
  };
  std::vector<Tensor> tensors;

  void add_tensor(std::string name, std::vector<std::uint32_t> shape, std::vector<float> data) {
    tensors.push_back({std::move(name), std::move(shape), std::move(data)});
  }

  const Tensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("checkpoint is missing tensor: " + name);
  }

  void save(const std::string& path) const {
    ByteWriter w;
    w.magic("FMCKPT1", 8);
    std::string json_text = config.dump();
    w.u64(json_text.size());
    w.raw(json_text.data(), json_text.size());
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      w.str(t.name);
      w.u32(static_cast<std::uint32_t>(t.shape.size()));
      for (auto d : t.shape) w.u32(d);
      w.span(t.data.data(), t.data.size());
    }
    w.to_file(path);
  }

  static Checkpoint load(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    Checkpoint ckpt;
    r.magic("FMCKPT1", 8);
    std::uint64_t json_len = r.u64();
    std::string json_text(json_len, '\0');
    r.span(json_text.data(), json_len);
    try {
      ckpt.config = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad checkpoint config JSON: ") + e.what());
    }
    std::uint32_t n = r.u32();
    ckpt.tensors.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      Tensor t;
      t.name = r.str();
      std::uint32_t rank = r.u32();
      t.shape.resize(rank);
      std::size_t count = 1;
      for (auto& d : t.shape) {
        d = r.u32();
        count *= d;
      }
      t.data.resize(count);
      r.span(t.data.data(), count);
      ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
  }
};

// Serializes model parameters plus optimizer state under "param/",
// "adam_m/", "adam_v/" prefixes.
inline Checkpoint make_checkpoint(const MaeModel<float>& model, const AdamW<float>& opt,
                                  nlohmann::json config) {
  Checkpoint ckpt;
  config["step"] = opt.step;
  ckpt.config = std::move(config);
  const auto& layout = model.tensors();
  auto slice = [&](const std::vector<float>& flat, const TensorLayout::Entry& e) {
    return std::vector<float>(flat.begin() + std::ptrdiff_t(e.offset),
                              flat.begin() + std::ptrdiff_t(e.offset + e.size));
  };
  for (const auto& e : layout.entries)
    ckpt.add_tensor("param/" + e.name, e.shape, slice(model.params().flat, e));
  if (!opt.m.empty()) {
    for (const auto& e : layout.entries) {
      ckpt.add_tensor("adam_m/" + e.name, e.shape, slice(opt.m, e));
      ckpt.add_tensor("adam_v/" + e.name, e.shape, slice(opt.v, e));
    }
  }
  return ckpt;
}

inline void restore_checkpoint(const Checkpoint& ckpt, MaeModel<float>& model,
                               AdamW<float>* opt = nullptr) {
  const auto& layout = model.tensors();
  auto place = [&](std::vector<float>& flat, const TensorLayout::Entry& e, const std::string& n) {
    const auto& t = ckpt.tensor(n);
    if (t.data.size() != e.size)
      throw FormatError("checkpoint tensor " + n + " has wrong size");
    std::copy(t.data.begin(), t.data.end(), flat.begin() + std::ptrdiff_t(e.offset));
  };
  for (const auto& e : layout.entries) place(model.params().flat, e, "param/" + e.name);
  if (opt) {
    opt->step = ckpt.config.value("step", std::uint64_t(0));
    bool has_moments = false;
    for (const auto& t : ckpt.tensors)
      if (t.name.rfind("adam_m/", 0) == 0) {
        has_moments = true;
        break;
      }
    if (has_moments) {
      opt->m.assign(layout.total, 0.0f);
      opt->v.assign(layout.total, 0.0f);
      for (const auto& e : layout.entries) {
        place(opt->m, e, "adam_m/" + e.name);
        place(opt->v, e, "adam_v/" + e.name);
      }
    } else {
      opt->m.clear();
      opt->v.clear();
    }
  }
}

}  // namespace flatmae
