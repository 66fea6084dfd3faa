// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flatmae/common.hpp"
#include "flatmae/mae.hpp"
#include "flatmae/prep.hpp"
#include "flatmae/rng.hpp"
#include "flatmae/token.hpp"

namespace flatmae {

struct PretrainConfig {
  MaeConfig model;
  double mask_ratio = 0.9;
  std::int64_t num_visible_override = -1;
  std::uint64_t steps = 1000;
  std::uint64_t warmup = 100;
  std::uint64_t schedule_total = 0;  // 0 -> steps
  double base_lr = 1e-3;             // peak = base_lr * batch / 256
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.95;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  unsigned replicas = 1;  // data-parallel gradient averaging

  double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }
  std::uint64_t total() const { return schedule_total ? schedule_total : steps; }

  nlohmann::json echo(const PatchLayout& layout, const std::string& grid_hash_hex) const {
    nlohmann::json j;
    j["model"] = {{"enc_dim", model.enc_dim},   {"enc_depth", model.enc_depth},
                  {"enc_heads", model.enc_heads}, {"dec_dim", model.dec_dim},
                  {"dec_depth", model.dec_depth}, {"dec_heads", model.dec_heads},
                  {"p_t", model.p_t},             {"p", model.p},
                  {"mlp_ratio", model.mlp_ratio},
                  {"norm_pix_per_patch", model.norm_pix_per_patch}};
    j["mask_ratio"] = mask_ratio;
    j["num_visible_override"] = num_visible_override;
    j["steps"] = steps;
    j["warmup"] = warmup;
    j["schedule_total"] = total();
    j["base_lr"] = base_lr;
    j["peak_lr"] = peak_lr();
    j["weight_decay"] = weight_decay;
    j["betas"] = {beta1, beta2};
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["replicas"] = replicas;
    j["rng"] = CounterRng::kName;
    j["std_convention"] = "population";
    j["clip_len"] = layout.clip_t;
    j["grid_hash"] = grid_hash_hex;
    j["nonempty_spatial"] = layout.num_spatial();
    return j;
  }
};

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
};

// One optimization step over a batch of clips. Mask plans derive from
// (seed, step, sample index), so the step is a pure function of its inputs.
// With replicas > 1, per-replica gradient sums combine in fixed replica
// order before averaging (deterministic for a given replica count).
inline StepResult pretrain_step(MaeModel<float>& model, AdamW<float>& opt,
                                const PatchLayout& layout, const std::vector<FlatClip>& batch,
                                std::uint64_t step, const PretrainConfig& cfg) {
  if (batch.empty()) throw ConfigError("empty batch");
  const std::size_t n = batch.size();
  unsigned replicas = cfg.replicas < 1 ? 1 : cfg.replicas;
  if (replicas > n) replicas = static_cast<unsigned>(n);

  std::vector<TensorStore<float>> grad_shards;
  std::vector<double> loss_shards(replicas, 0.0);
  grad_shards.reserve(replicas);
  for (unsigned r = 0; r < replicas; ++r) grad_shards.emplace_back(&model.tensors());

  auto work = [&](unsigned r) {
    std::size_t lo = r * n / replicas, hi = (r + 1) * n / replicas;
    for (std::size_t i = lo; i < hi; ++i) {
      auto tokens = patchify<float>(batch[i], layout);
      auto plan = make_mask(layout, cfg.mask_ratio, CounterRng::mix_seed(cfg.seed, step, i),
                            cfg.num_visible_override);
      MaeCache<float> cache;
      try {
        loss_shards[r] += model.forward(tokens, plan, cache).loss;
        model.backward(plan, tokens, cache, grad_shards[r], 1.0);
      } catch (const NumericFault& e) {
        throw NumericFault("step " + std::to_string(step) + ", sample " + std::to_string(i) +
                           ": " + e.what());
      }
    }
  };
  if (replicas == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned r = 0; r < replicas; ++r) pool.emplace_back(work, r);
    for (auto& t : pool) t.join();
  }

  // sum-then-divide in replica order
  TensorStore<float>& grads = grad_shards[0];
  for (unsigned r = 1; r < replicas; ++r)
    for (std::size_t i = 0; i < grads.flat.size(); ++i) grads.flat[i] += grad_shards[r].flat[i];
  float inv_n = 1.0f / static_cast<float>(n);
  for (auto& g : grads.flat) g *= inv_n;
  double loss = 0.0;
  for (double l : loss_shards) loss += l;
  loss /= static_cast<double>(n);

  StepResult result;
  result.loss = loss;
  result.lr = lr_at(step, cfg.peak_lr(), cfg.warmup, cfg.total());
  AdamWConfig ocfg;
  ocfg.lr = result.lr;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.beta1 = cfg.beta1;
  ocfg.beta2 = cfg.beta2;
  opt.apply(model.params().flat, grads.flat, ocfg);
  return result;
}

struct PretrainResult {
  std::vector<double> loss_trace;  // one entry per step
  std::uint64_t final_step = 0;
};

// Runs steps [start_step, cfg.steps). source(step) must yield the batch for
// that step; with a seeded single-worker loader the whole trace is
// byte-deterministic.
template <typename BatchSource>
PretrainResult pretrain(MaeModel<float>& model, AdamW<float>& opt, const PatchLayout& layout,
                        BatchSource&& source, const PretrainConfig& cfg,
                        std::uint64_t start_step = 0,
                        const std::function<void(std::uint64_t, const StepResult&)>& on_step = {}) {
  PretrainResult result;
  result.loss_trace.reserve(cfg.steps - start_step);
  for (std::uint64_t step = start_step; step < cfg.steps; ++step) {
    std::vector<FlatClip> batch = source(step);
    auto sr = pretrain_step(model, opt, layout, batch, step, cfg);
    result.loss_trace.push_back(sr.loss);
    if (on_step) on_step(step, sr);
    result.final_step = step + 1;
  }
  return result;
}

}  // namespace flatmae
