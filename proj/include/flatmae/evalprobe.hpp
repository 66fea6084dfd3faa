// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <numeric>
#include <string>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/mae.hpp"
#include "flatmae/nn.hpp"
#include "flatmae/prep.hpp"
#include "flatmae/rng.hpp"
#include "flatmae/token.hpp"

namespace flatmae {

// Probe hyperparameters and the sweep grids.
struct ProbeConfig {
  std::uint32_t query_dim = 64;
  std::uint32_t heads = 1;
  std::uint32_t classes = 2;
  std::uint32_t epochs = 20;
  std::uint32_t batch = 128;
  double base_lr = 5e-4;
  double beta1 = 0.9, beta2 = 0.95;
  std::vector<double> lr_scales = {0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0};
  std::vector<double> weight_decays = {3e-4, 0.001, 0.01, 0.03, 0.1, 0.3, 1.0};

  void validate() const {
    if (lr_scales.empty() || weight_decays.empty()) throw ConfigError("sweep grids must be non-empty");
    if (query_dim % heads != 0) throw ConfigError("query_dim must divide into heads");
    if (classes < 2) throw ConfigError("need >= 2 classes");
  }
};

// Cross-attention pooling with a single learned query plus a linear
// classifier. The encoder under evaluation stays frozen; only these
// parameters train.
template <typename T>
class AttentiveProbe {
 public:
  AttentiveProbe(std::uint32_t feat_dim, const ProbeConfig& cfg)
      : feat_dim_(feat_dim), query_dim_(cfg.query_dim), heads_(cfg.heads), classes_(cfg.classes) {
    layout_.add("q", {heads_, query_dim_ / heads_});
    layout_.add("w_k", {query_dim_, feat_dim_});
    layout_.add("b_k", {query_dim_});
    layout_.add("w_v", {query_dim_, feat_dim_});
    layout_.add("b_v", {query_dim_});
    layout_.add("w_c", {classes_, query_dim_});
    layout_.add("b_c", {classes_});
    params_ = TensorStore<T>(&layout_);
  }

  void init(std::uint64_t seed) {
    CounterRng rng(seed);
    for (const auto& e : layout_.entries) {
      T* p = params_.flat.data() + e.offset;
      // classifier weights start at zero for determinism
      bool zero = e.name == "w_c" || e.name == "b_c" || e.name == "b_k" || e.name == "b_v";
      for (std::size_t i = 0; i < e.size; ++i)
        p[i] = zero ? T(0) : static_cast<T>(0.02 * rng.next_gauss());
    }
  }

  struct Cache {
    std::vector<T> x;       // n x feat_dim
    std::vector<T> keys;    // n x query_dim
    std::vector<T> vals;    // n x query_dim
    std::vector<T> attn;    // heads x n
    std::vector<T> pooled;  // query_dim
    std::vector<T> logits;  // classes
    std::size_t n = 0;
  };

  // Pools n token features into one vector and classifies it.
  void forward(const T* x, std::size_t n, Cache& cache) const {
    if (n < 1) throw DimensionError("attentive pool needs >= 1 token");
    std::size_t dq = query_dim_, dh = dq / heads_;
    cache.n = n;
    cache.x.assign(x, x + n * feat_dim_);
    cache.keys.resize(n * dq);
    cache.vals.resize(n * dq);
    nn::linear_fwd(x, params_.ptr("w_k"), params_.ptr("b_k"), cache.keys.data(), n, feat_dim_, dq);
    nn::linear_fwd(x, params_.ptr("w_v"), params_.ptr("b_v"), cache.vals.data(), n, feat_dim_, dq);
    cache.attn.assign(heads_ * n, T(0));
    cache.pooled.assign(dq, T(0));
    const T* q = params_.ptr("q");
    T scale = T(1) / std::sqrt(T(dh));
    for (std::size_t h = 0; h < heads_; ++h) {
      T* attn = cache.attn.data() + h * n;
      for (std::size_t j = 0; j < n; ++j) {
        T s = T(0);
        for (std::size_t l = 0; l < dh; ++l) s += q[h * dh + l] * cache.keys[j * dq + h * dh + l];
        attn[j] = s * scale;
      }
      nn::softmax_rows(attn, 1, n);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t l = 0; l < dh; ++l)
          cache.pooled[h * dh + l] += attn[j] * cache.vals[j * dq + h * dh + l];
    }
    cache.logits.resize(classes_);
    nn::linear_fwd(cache.pooled.data(), params_.ptr("w_c"), params_.ptr("b_c"),
                   cache.logits.data(), 1, dq, classes_);
  }

  // Returns cross-entropy loss; accumulates parameter gradients and, when
  // dx is non-null, gradients w.r.t. the input features.
  T backward(const Cache& cache, std::size_t label, TensorStore<T>& grads, T* dx = nullptr,
             double scale_loss = 1.0) const {
    std::size_t n = cache.n, dq = query_dim_, dh = dq / heads_;
    std::vector<T> dlogits(classes_);
    T loss = nn::cross_entropy(cache.logits.data(), classes_, label, dlogits.data());
    for (auto& g : dlogits) g *= static_cast<T>(scale_loss);

    std::vector<T> d_pooled(dq, T(0));
    nn::linear_bwd(cache.pooled.data(), params_.ptr("w_c"), dlogits.data(), d_pooled.data(),
                   grads.ptr("w_c"), grads.ptr("b_c"), 1, dq, classes_);

    std::vector<T> d_keys(n * dq, T(0)), d_vals(n * dq, T(0));
    const T* q = params_.ptr("q");
    T* dq_grad = grads.ptr("q");
    T scale = T(1) / std::sqrt(T(dh));
    std::vector<T> d_attn(n), d_scores(n);
    for (std::size_t h = 0; h < heads_; ++h) {
      const T* attn = cache.attn.data() + h * n;
      for (std::size_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (std::size_t l = 0; l < dh; ++l) {
          acc += d_pooled[h * dh + l] * cache.vals[j * dq + h * dh + l];
          d_vals[j * dq + h * dh + l] += attn[j] * d_pooled[h * dh + l];
        }
        d_attn[j] = acc;
      }
      std::fill(d_scores.begin(), d_scores.end(), T(0));
      nn::softmax_bwd_rows(attn, d_attn.data(), d_scores.data(), 1, n);
      for (std::size_t j = 0; j < n; ++j) {
        T g = d_scores[j] * scale;
        for (std::size_t l = 0; l < dh; ++l) {
          dq_grad[h * dh + l] += g * cache.keys[j * dq + h * dh + l];
          d_keys[j * dq + h * dh + l] += g * q[h * dh + l];
        }
      }
    }
    nn::linear_bwd(cache.x.data(), params_.ptr("w_k"), d_keys.data(), dx, grads.ptr("w_k"),
                   grads.ptr("b_k"), n, feat_dim_, dq);
    nn::linear_bwd(cache.x.data(), params_.ptr("w_v"), d_vals.data(), dx, grads.ptr("w_v"),
                   grads.ptr("b_v"), n, feat_dim_, dq);
    return loss;
  }

  std::size_t predict(const T* x, std::size_t n) const {
    Cache cache;
    forward(x, n, cache);
    return static_cast<std::size_t>(
        std::max_element(cache.logits.begin(), cache.logits.end()) - cache.logits.begin());
  }

  const TensorLayout& tensors() const { return layout_; }
  TensorStore<T>& params() { return params_; }
  const TensorStore<T>& params() const { return params_; }
  std::uint32_t feat_dim() const { return feat_dim_; }
  std::uint32_t classes() const { return classes_; }

 private:
  std::uint32_t feat_dim_, query_dim_, heads_, classes_;
  TensorLayout layout_;
  TensorStore<T> params_;
};

// Token features per sample, all samples sharing n_tokens x feat_dim.
struct FeatureDataset {
  std::size_t n_tokens = 0;
  std::size_t feat_dim = 0;
  std::vector<std::vector<float>> features;
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return features.size(); }
  void validate() const {
    if (features.size() != labels.size()) throw DimensionError("features/labels size mismatch");
    for (const auto& f : features)
      if (f.size() != n_tokens * feat_dim) throw DimensionError("feature row has wrong size");
  }
};

// AdamW training of one probe on one hyperparameter point: 2-epoch warmup
// then cosine decay, batches shuffled per epoch, deterministic per seed.
inline double train_probe(AttentiveProbe<float>& probe, const FeatureDataset& train,
                          const ProbeConfig& cfg, double lr_scale, double weight_decay,
                          std::uint64_t seed) {
  if (train.size() == 0) throw ConfigError("empty training split");
  AdamW<float> opt;
  AdamWConfig ocfg;
  ocfg.beta1 = cfg.beta1;
  ocfg.beta2 = cfg.beta2;
  ocfg.weight_decay = weight_decay;
  double peak = cfg.base_lr * lr_scale;
  std::size_t steps_per_epoch = (train.size() + cfg.batch - 1) / cfg.batch;
  std::uint64_t total = std::uint64_t(cfg.epochs) * steps_per_epoch;
  std::uint64_t warmup = std::min<std::uint64_t>(2 * steps_per_epoch, total - 1);

  std::vector<std::uint32_t> order(train.size());
  std::iota(order.begin(), order.end(), 0u);
  std::uint64_t step = 0;
  double last_loss = 0.0;
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    CounterRng shuffle_rng(CounterRng::mix_seed(seed, epoch, 0x73687566));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      TensorStore<float> grads(&probe.tensors());
      double loss = 0.0;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& row = train.features[order[i]];
        typename AttentiveProbe<float>::Cache cache;
        probe.forward(row.data(), train.n_tokens, cache);
        loss += probe.backward(cache, train.labels[order[i]], grads, nullptr,
                               1.0 / double(b1 - b0));
      }
      last_loss = loss / double(b1 - b0);
      ocfg.lr = lr_at(step, peak, warmup, total);
      opt.apply(probe.params().flat, grads.flat, ocfg);
      ++step;
    }
  }
  return last_loss;
}

inline double probe_accuracy(const AttentiveProbe<float>& probe, const FeatureDataset& data) {
  if (data.size() == 0) throw ConfigError("empty evaluation split");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (probe.predict(data.features[i].data(), data.n_tokens) == data.labels[i]) ++correct;
  return double(correct) / double(data.size());
}

// One sweep point result.
struct SweepPoint {
  double lr_scale = 0.0;
  double weight_decay = 0.0;
  double val_accuracy = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> points;   // enumeration order: lr scale outer, wd inner
  std::size_t best_index = 0;
  double best_val_accuracy = 0.0;
  double test_accuracy = 0.0;  // computed once, on the selected config only
};

// Appendix-style protocol: train one probe per grid point, select on
// validation accuracy (ties -> earliest point), then touch the test split
// exactly once. Points run in parallel; results are deterministic per seed.
inline SweepResult run_sweep(const FeatureDataset& train, const FeatureDataset& val,
                             const FeatureDataset& test, const ProbeConfig& cfg,
                             std::uint64_t seed) {
  cfg.validate();
  train.validate();
  val.validate();
  test.validate();
  if (train.size() == 0 || val.size() == 0 || test.size() == 0)
    throw ConfigError("all splits must be non-empty");

  SweepResult result;
  for (double scale : cfg.lr_scales)
    for (double wd : cfg.weight_decays) result.points.push_back({scale, wd, 0.0});

  std::vector<std::vector<float>> trained(result.points.size());
  parallel_for(result.points.size(), [&](std::size_t i) {
    AttentiveProbe<float> probe(static_cast<std::uint32_t>(train.feat_dim), cfg);
    probe.init(CounterRng::mix_seed(seed, 0x70726f62));
    train_probe(probe, train, cfg, result.points[i].lr_scale, result.points[i].weight_decay,
                CounterRng::mix_seed(seed, i));
    result.points[i].val_accuracy = probe_accuracy(probe, val);
    trained[i] = probe.params().flat;
  });

  result.best_index = 0;
  for (std::size_t i = 1; i < result.points.size(); ++i)
    if (result.points[i].val_accuracy > result.points[result.best_index].val_accuracy)
      result.best_index = i;
  result.best_val_accuracy = result.points[result.best_index].val_accuracy;

  AttentiveProbe<float> best(static_cast<std::uint32_t>(train.feat_dim), cfg);
  best.params().flat = trained[result.best_index];
  result.test_accuracy = probe_accuracy(best, test);
  return result;
}

// ---- connectome baseline ----

// Pixel -> parcel labels in {0 = none, 1..P}.
struct ParcelMap {
  std::uint32_t parcels = 0;
  std::vector<std::uint32_t> label;  // per pixel

  void validate(const ResampleGrid& grid) const {
    if (label.size() != grid.pixel_count()) throw DimensionError("parcel map size mismatch");
    std::vector<std::size_t> count(parcels + 1, 0);
    for (std::size_t px = 0; px < label.size(); ++px) {
      if (label[px] > parcels) throw ValidationError("parcel id out of range");
      if (label[px] != 0 && !grid.valid_pixel[px])
        throw ValidationError("parcel assigned to background pixel");
      ++count[label[px]];
    }
    for (std::uint32_t p = 1; p <= parcels; ++p)
      if (count[p] == 0) throw ValidationError("parcel " + std::to_string(p) + " has no pixels");
  }
};

// Deterministic stand-in parcellation: valid pixels in row-major order are
// chunked into P nearly equal contiguous groups.
inline ParcelMap make_tiled_parcels(const ResampleGrid& grid, std::uint32_t parcels) {
  std::size_t n_valid = grid.valid_count();
  if (parcels < 1 || parcels > n_valid) throw ConfigError("parcel count out of range");
  ParcelMap map;
  map.parcels = parcels;
  map.label.assign(grid.pixel_count(), 0);
  std::size_t slot = 0;
  for (std::size_t px = 0; px < grid.pixel_count(); ++px) {
    if (!grid.valid_pixel[px]) continue;
    map.label[px] = static_cast<std::uint32_t>(slot * parcels / n_valid) + 1;
    ++slot;
  }
  return map;
}

// Parcel-mean time series -> Pearson correlation -> strict upper triangle
// (row-major i < j), length P(P-1)/2. Zero-variance parcels correlate as 0.
template <typename T = float>
std::vector<T> connectome_features(const FlatClip& clip, const ParcelMap& parcels) {
  if (clip.t < 2) throw ConfigError("connectome features need >= 2 time points");
  std::uint32_t p_count = parcels.parcels;
  if (p_count < 2) throw ConfigError("need >= 2 parcels");
  std::size_t frame_size = clip.frame_size();
  if (parcels.label.size() != frame_size) throw DimensionError("parcel map does not match clip");

  // parcel means per frame
  std::vector<double> series(std::size_t(p_count) * clip.t, 0.0);
  std::vector<double> pix_count(p_count, 0.0);
  for (std::size_t px = 0; px < frame_size; ++px)
    if (parcels.label[px] != 0) pix_count[parcels.label[px] - 1] += 1.0;
  for (std::uint32_t f = 0; f < clip.t; ++f) {
    const float* frame = clip.data.data() + std::size_t(f) * frame_size;
    for (std::size_t px = 0; px < frame_size; ++px)
      if (parcels.label[px] != 0)
        series[std::size_t(parcels.label[px] - 1) * clip.t + f] += frame[px];
  }
  for (std::uint32_t p = 0; p < p_count; ++p)
    for (std::uint32_t f = 0; f < clip.t; ++f) series[std::size_t(p) * clip.t + f] /= pix_count[p];

  // standardize each parcel series; zero-variance rows flagged
  std::vector<std::uint8_t> degenerate(p_count, 0);
  for (std::uint32_t p = 0; p < p_count; ++p) {
    double* row = series.data() + std::size_t(p) * clip.t;
    double mean = 0.0;
    for (std::uint32_t f = 0; f < clip.t; ++f) mean += row[f];
    mean /= double(clip.t);
    double var = 0.0;
    for (std::uint32_t f = 0; f < clip.t; ++f) {
      double d = row[f] - mean;
      var += d * d;
    }
    var /= double(clip.t);
    double sd = std::sqrt(var);
    if (sd <= kStdFloor * std::max(1.0, std::abs(mean))) {
      degenerate[p] = 1;
      continue;
    }
    for (std::uint32_t f = 0; f < clip.t; ++f) row[f] = (row[f] - mean) / sd;
  }

  std::vector<T> feat;
  feat.reserve(std::size_t(p_count) * (p_count - 1) / 2);
  for (std::uint32_t i = 0; i < p_count; ++i)
    for (std::uint32_t j = i + 1; j < p_count; ++j) {
      if (degenerate[i] || degenerate[j]) {
        feat.push_back(T(0));
        continue;
      }
      double corr = 0.0;
      const double* a = series.data() + std::size_t(i) * clip.t;
      const double* b = series.data() + std::size_t(j) * clip.t;
      for (std::uint32_t f = 0; f < clip.t; ++f) corr += a[f] * b[f];
      feat.push_back(static_cast<T>(corr / double(clip.t)));
    }
  return feat;
}

// ---- patch embedding baseline ----

// The MAE's tokenization with an independently learned patch + position
// embedding and no transformer blocks; output feeds the attentive probe.
template <typename T>
class PatchEmbedBaseline {
 public:
  PatchEmbedBaseline(const PatchLayout& layout, std::uint32_t feat_dim)
      : layout_(&layout), feat_dim_(feat_dim) {
    tlayout_.add("embed/w", {feat_dim_, layout.token_dim()});
    tlayout_.add("embed/b", {feat_dim_});
    tlayout_.add("pos_t", {layout.grid_t, feat_dim_});
    tlayout_.add("pos_s", {static_cast<std::uint32_t>(layout.num_spatial()), feat_dim_});
    params_ = TensorStore<T>(&tlayout_);
  }

  void init(std::uint64_t seed) {
    CounterRng rng(seed);
    for (auto& v : params_.flat) v = static_cast<T>(0.02 * rng.next_gauss());
    std::fill_n(params_.ptr("embed/b"), feat_dim_, T(0));
  }

  std::vector<T> embed(const PatchTensor<T>& tokens) const {
    std::size_t n = layout_->num_tokens();
    std::vector<T> out(n * feat_dim_);
    nn::linear_fwd(tokens.values.data(), params_.ptr("embed/w"), params_.ptr("embed/b"),
                   out.data(), n, layout_->token_dim(), feat_dim_);
    const T* pos_t = params_.ptr("pos_t");
    const T* pos_s = params_.ptr("pos_s");
    for (std::size_t tok = 0; tok < n; ++tok) {
      T* row = out.data() + tok * feat_dim_;
      const T* pt = pos_t + std::size_t(layout_->t_of(std::uint32_t(tok))) * feat_dim_;
      const T* ps = pos_s + std::size_t(layout_->s_of(std::uint32_t(tok))) * feat_dim_;
      for (std::size_t j = 0; j < feat_dim_; ++j) row[j] += pt[j] + ps[j];
    }
    return out;
  }

  // d_features -> embedding gradients.
  void embed_bwd(const PatchTensor<T>& tokens, const T* d_out, TensorStore<T>& grads) const {
    std::size_t n = layout_->num_tokens();
    nn::linear_bwd(tokens.values.data(), params_.ptr("embed/w"), d_out, static_cast<T*>(nullptr),
                   grads.ptr("embed/w"), grads.ptr("embed/b"), n, layout_->token_dim(), feat_dim_);
    T* dpt = grads.ptr("pos_t");
    T* dps = grads.ptr("pos_s");
    for (std::size_t tok = 0; tok < n; ++tok) {
      const T* row = d_out + tok * feat_dim_;
      T* pt = dpt + std::size_t(layout_->t_of(std::uint32_t(tok))) * feat_dim_;
      T* ps = dps + std::size_t(layout_->s_of(std::uint32_t(tok))) * feat_dim_;
      for (std::size_t j = 0; j < feat_dim_; ++j) {
        pt[j] += row[j];
        ps[j] += row[j];
      }
    }
  }

  const PatchLayout& patch_layout() const { return *layout_; }
  const TensorLayout& tensors() const { return tlayout_; }
  TensorStore<T>& params() { return params_; }
  const TensorStore<T>& params() const { return params_; }
  std::uint32_t feat_dim() const { return feat_dim_; }

 private:
  const PatchLayout* layout_;
  std::uint32_t feat_dim_;
  TensorLayout tlayout_;
  TensorStore<T> params_;
};

// Joint training of the patch embedding and its probe on raw clips.
// Returns final train accuracy.
inline double train_patch_embed_probe(PatchEmbedBaseline<float>& baseline,
                                      AttentiveProbe<float>& probe,
                                      const std::vector<PatchTensor<float>>& clips,
                                      const std::vector<std::uint32_t>& labels,
                                      const ProbeConfig& cfg, double lr_scale, double weight_decay,
                                      std::uint64_t seed) {
  if (clips.size() != labels.size() || clips.empty())
    throw ConfigError("clips/labels must be non-empty and matched");
  const PatchLayout& layout = baseline.patch_layout();
  std::size_t n_tok = layout.num_tokens();

  AdamW<float> opt_b, opt_p;
  AdamWConfig ocfg;
  ocfg.beta1 = cfg.beta1;
  ocfg.beta2 = cfg.beta2;
  ocfg.weight_decay = weight_decay;
  double peak = cfg.base_lr * lr_scale;
  std::size_t steps_per_epoch = (clips.size() + cfg.batch - 1) / cfg.batch;
  std::uint64_t total = std::uint64_t(cfg.epochs) * steps_per_epoch;
  std::uint64_t warmup = std::min<std::uint64_t>(2 * steps_per_epoch, total - 1);

  std::vector<std::uint32_t> order(clips.size());
  std::iota(order.begin(), order.end(), 0u);
  std::uint64_t step = 0;
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    CounterRng shuffle_rng(CounterRng::mix_seed(seed, epoch, 0x73687566));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      TensorStore<float> g_base(&baseline.tensors());
      TensorStore<float> g_probe(&probe.tensors());
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& tokens = clips[order[i]];
        auto feats = baseline.embed(tokens);
        typename AttentiveProbe<float>::Cache cache;
        probe.forward(feats.data(), n_tok, cache);
        std::vector<float> d_feats(n_tok * baseline.feat_dim(), 0.0f);
        probe.backward(cache, labels[order[i]], g_probe, d_feats.data(), 1.0 / double(b1 - b0));
        baseline.embed_bwd(tokens, d_feats.data(), g_base);
      }
      ocfg.lr = lr_at(step, peak, warmup, total);
      opt_b.apply(baseline.params().flat, g_base.flat, ocfg);
      opt_p.apply(probe.params().flat, g_probe.flat, ocfg);
      ++step;
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    auto feats = baseline.embed(clips[i]);
    if (probe.predict(feats.data(), n_tok) == labels[i]) ++correct;
  }
  return double(correct) / double(clips.size());
}

}  // namespace flatmae
