// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/nn.hpp"
#include "flatmae/rng.hpp"
#include "flatmae/token.hpp"

namespace flatmae {

// ---- named flat tensor storage ----

struct TensorLayout {
  struct Entry {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::uint32_t> shape;
    std::size_t size = 0;
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, std::size_t> index;
  std::size_t total = 0;

  std::size_t add(const std::string& name, std::vector<std::uint32_t> shape) {
    Entry e;
    e.name = name;
    e.offset = total;
    e.size = 1;
    for (auto d : shape) e.size *= d;
    e.shape = std::move(shape);
    total += e.size;
    index.emplace(name, entries.size());
    entries.push_back(std::move(e));
    return entries.size() - 1;
  }
  const Entry& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw Error("unknown tensor: " + name);
    return entries[it->second];
  }
  bool has(const std::string& name) const { return index.count(name) != 0; }
};

template <typename T>
struct TensorStore {
  const TensorLayout* layout = nullptr;
  std::vector<T> flat;

  explicit TensorStore(const TensorLayout* l = nullptr) : layout(l) {
    if (l) flat.assign(l->total, T(0));
  }
  T* ptr(const std::string& name) { return flat.data() + layout->at(name).offset; }
  const T* ptr(const std::string& name) const { return flat.data() + layout->at(name).offset; }
  void zero() { std::fill(flat.begin(), flat.end(), T(0)); }
};

// ---- config ----

struct MaeConfig {
  std::uint32_t enc_dim = 192, enc_depth = 4, enc_heads = 4;
  std::uint32_t dec_dim = 96, dec_depth = 2, dec_heads = 4;
  std::uint32_t p_t = 16, p = 16;
  double mlp_ratio = 4.0;
  bool norm_pix_per_patch = false;

  std::uint32_t enc_mlp_dim() const {
    return static_cast<std::uint32_t>(mlp_ratio * enc_dim);
  }
  std::uint32_t dec_mlp_dim() const {
    return static_cast<std::uint32_t>(mlp_ratio * dec_dim);
  }

  void validate() const {
    if (enc_depth < 1 || dec_depth < 1) throw ConfigError("depths must be >= 1");
    if (enc_dim % enc_heads != 0 || dec_dim % dec_heads != 0)
      throw ConfigError("model dims must be divisible by head counts");
    if (enc_mlp_dim() < 1 || dec_mlp_dim() < 1) throw ConfigError("mlp_ratio too small");
  }

  // Standard configurations from the ViT/MAE lineage.
  static MaeConfig vit_b(std::uint32_t p_t = 2, std::uint32_t p = 16) {
    MaeConfig c;
    c.enc_dim = 768; c.enc_depth = 12; c.enc_heads = 12;
    c.dec_dim = 512; c.dec_depth = 8; c.dec_heads = 16;
    c.p_t = p_t; c.p = p;
    return c;
  }
};

// ---- transformer block ----

namespace detail {

template <typename T>
struct BlockCache {
  std::vector<T> ln1_xhat, ln1_rstd, ln1_out;
  nn::AttentionCache<T> attn;
  std::vector<T> x_mid;  // residual after attention
  std::vector<T> ln2_xhat, ln2_rstd, ln2_out;
  std::vector<T> fc1, act;
};

// Parameter names for block i under a prefix ("enc" / "dec").
inline std::string bname(const std::string& stack, std::size_t i, const char* leaf) {
  return stack + "/block" + std::to_string(i) + "/" + leaf;
}

template <typename T, typename Store>
void block_fwd(Store& params, const std::string& stack, std::size_t bi, const T* x, T* y,
               BlockCache<T>& c, std::size_t n_tok, std::size_t d, std::size_t heads,
               std::size_t mlp) {
  c.ln1_xhat.resize(n_tok * d);
  c.ln1_rstd.resize(n_tok);
  c.ln1_out.resize(n_tok * d);
  nn::layernorm_fwd(x, params.ptr(bname(stack, bi, "ln1/g")), params.ptr(bname(stack, bi, "ln1/b")),
                    c.ln1_out.data(), c.ln1_xhat.data(), c.ln1_rstd.data(), n_tok, d);
  std::vector<T> attn_out(n_tok * d);
  nn::attention_fwd(c.ln1_out.data(), params.ptr(bname(stack, bi, "attn/w_qkv")),
                    params.ptr(bname(stack, bi, "attn/b_qkv")),
                    params.ptr(bname(stack, bi, "attn/w_proj")),
                    params.ptr(bname(stack, bi, "attn/b_proj")), attn_out.data(), c.attn, n_tok, d,
                    heads);
  c.x_mid.resize(n_tok * d);
  for (std::size_t i = 0; i < n_tok * d; ++i) c.x_mid[i] = x[i] + attn_out[i];

  c.ln2_xhat.resize(n_tok * d);
  c.ln2_rstd.resize(n_tok);
  c.ln2_out.resize(n_tok * d);
  nn::layernorm_fwd(c.x_mid.data(), params.ptr(bname(stack, bi, "ln2/g")),
                    params.ptr(bname(stack, bi, "ln2/b")), c.ln2_out.data(), c.ln2_xhat.data(),
                    c.ln2_rstd.data(), n_tok, d);
  c.fc1.resize(n_tok * mlp);
  nn::linear_fwd(c.ln2_out.data(), params.ptr(bname(stack, bi, "mlp/w_fc1")),
                 params.ptr(bname(stack, bi, "mlp/b_fc1")), c.fc1.data(), n_tok, d, mlp);
  c.act.resize(n_tok * mlp);
  for (std::size_t i = 0; i < n_tok * mlp; ++i) c.act[i] = nn::gelu(c.fc1[i]);
  std::vector<T> mlp_out(n_tok * d);
  nn::linear_fwd(c.act.data(), params.ptr(bname(stack, bi, "mlp/w_fc2")),
                 params.ptr(bname(stack, bi, "mlp/b_fc2")), mlp_out.data(), n_tok, mlp, d);
  for (std::size_t i = 0; i < n_tok * d; ++i) y[i] = c.x_mid[i] + mlp_out[i];
}

template <typename T, typename Store, typename GradStore>
void block_bwd(Store& params, GradStore& grads, const std::string& stack, std::size_t bi,
               const T* dy, T* dx, const BlockCache<T>& c, std::size_t n_tok, std::size_t d,
               std::size_t heads, std::size_t mlp) {
  // MLP branch
  std::vector<T> d_act(n_tok * mlp, T(0));
  nn::linear_bwd(c.act.data(), params.ptr(bname(stack, bi, "mlp/w_fc2")), dy, d_act.data(),
                 grads.ptr(bname(stack, bi, "mlp/w_fc2")), grads.ptr(bname(stack, bi, "mlp/b_fc2")),
                 n_tok, mlp, d);
  std::vector<T> d_fc1(n_tok * mlp);
  for (std::size_t i = 0; i < n_tok * mlp; ++i) d_fc1[i] = d_act[i] * nn::gelu_grad(c.fc1[i]);
  std::vector<T> d_ln2_out(n_tok * d, T(0));
  nn::linear_bwd(c.ln2_out.data(), params.ptr(bname(stack, bi, "mlp/w_fc1")), d_fc1.data(),
                 d_ln2_out.data(), grads.ptr(bname(stack, bi, "mlp/w_fc1")),
                 grads.ptr(bname(stack, bi, "mlp/b_fc1")), n_tok, d, mlp);
  std::vector<T> d_mid(n_tok * d);
  for (std::size_t i = 0; i < n_tok * d; ++i) d_mid[i] = dy[i];  // residual skip
  nn::layernorm_bwd(c.ln2_xhat.data(), c.ln2_rstd.data(), params.ptr(bname(stack, bi, "ln2/g")),
                    d_ln2_out.data(), d_mid.data(), grads.ptr(bname(stack, bi, "ln2/g")),
                    grads.ptr(bname(stack, bi, "ln2/b")), n_tok, d);
  // attention branch
  std::vector<T> d_ln1_out(n_tok * d, T(0));
  nn::attention_bwd(c.ln1_out.data(), params.ptr(bname(stack, bi, "attn/w_qkv")),
                    params.ptr(bname(stack, bi, "attn/w_proj")), d_mid.data(), c.attn,
                    d_ln1_out.data(), grads.ptr(bname(stack, bi, "attn/w_qkv")),
                    grads.ptr(bname(stack, bi, "attn/b_qkv")),
                    grads.ptr(bname(stack, bi, "attn/w_proj")),
                    grads.ptr(bname(stack, bi, "attn/b_proj")), n_tok, d, heads);
  for (std::size_t i = 0; i < n_tok * d; ++i) dx[i] += d_mid[i];  // residual skip
  nn::layernorm_bwd(c.ln1_xhat.data(), c.ln1_rstd.data(), params.ptr(bname(stack, bi, "ln1/g")),
                    d_ln1_out.data(), dx, grads.ptr(bname(stack, bi, "ln1/g")),
                    grads.ptr(bname(stack, bi, "ln1/b")), n_tok, d);
}

}  // namespace detail

// ---- the masked autoencoder ----

template <typename T>
struct MaeCache {
  std::size_t n_vis = 0, n_all = 0, n_masked = 0;
  std::vector<T> vis_input;  // gathered visible token values [n_vis x dim]
  std::vector<detail::BlockCache<T>> enc_blocks;
  std::vector<T> enc_norm_xhat, enc_norm_rstd, enc_out;
  std::vector<detail::BlockCache<T>> dec_blocks;
  std::vector<T> dec_norm_xhat, dec_norm_rstd, dec_out;
  std::vector<T> preds;          // [n_masked x dim], plan.masked order
  std::vector<T> target_masked;  // same shape (after optional per-patch norm)
  double denom = 0.0;            // count of (masked token, valid pixel) pairs
};

template <typename T>
class MaeModel {
 public:
  MaeModel(MaeConfig config, const PatchLayout& layout)
      : config_(config), layout_(&layout), params_(nullptr) {
    config_.validate();
    if (layout.p_t != config_.p_t || layout.p != config_.p)
      throw ConfigError("layout patch sizes do not match model config");
    build_layout_();
    params_ = TensorStore<T>(&tlayout_);
  }

  const MaeConfig& config() const { return config_; }
  const PatchLayout& patch_layout() const { return *layout_; }
  const TensorLayout& tensors() const { return tlayout_; }
  TensorStore<T>& params() { return params_; }
  const TensorStore<T>& params() const { return params_; }

  // Learned position vectors are factorized: one temporal table plus one
  // spatial table per stack, grid_t + |nonempty_spatial| rows each.
  void init(std::uint64_t seed) {
    CounterRng rng(seed);
    for (const auto& e : tlayout_.entries) {
      T* p = params_.flat.data() + e.offset;
      bool is_gain = e.name.ends_with("ln1/g") || e.name.ends_with("ln2/g") ||
                     e.name.ends_with("norm/g");
      bool is_bias = e.name.ends_with("/b") || e.name.ends_with("mask_token");
      if (is_gain) {
        for (std::size_t i = 0; i < e.size; ++i) p[i] = T(1);
      } else if (is_bias) {
        for (std::size_t i = 0; i < e.size; ++i) p[i] = T(0);
      } else {
        for (std::size_t i = 0; i < e.size; ++i)
          p[i] = static_cast<T>(0.02 * rng.next_gauss());
      }
    }
  }

  struct ForwardResult {
    double loss = 0.0;
  };

  // Encoder sees only visible tokens (in plan.visible order); the decoder
  // sees projected visible embeddings plus mask tokens, all with factorized
  // position embeddings. Loss is the mean squared error over
  // {masked tokens} x {their valid pixels}; target defaults to the input.
  ForwardResult forward(const PatchTensor<T>& input, const MaskPlan& plan, MaeCache<T>& cache,
                        const PatchTensor<T>* target = nullptr) const {
    const PatchTensor<T>& tgt = target ? *target : input;
    const PatchLayout& L = *layout_;
    const std::size_t dim = L.token_dim();
    const std::size_t de = config_.enc_dim, dd = config_.dec_dim;
    const std::size_t n_vis = plan.visible.size();
    const std::size_t n_all = L.num_tokens();
    const std::size_t n_masked = plan.masked.size();
    if (input.num_tokens() != n_all) throw DimensionError("token tensor does not match layout");
    if (n_vis == 0) throw ValidationError("mask plan leaves no visible tokens");

    cache.n_vis = n_vis;
    cache.n_all = n_all;
    cache.n_masked = n_masked;

    // embed visible tokens
    cache.vis_input.resize(n_vis * dim);
    for (std::size_t i = 0; i < n_vis; ++i)
      std::copy_n(input.token(plan.visible[i]), dim, cache.vis_input.data() + i * dim);
    std::vector<T> x(n_vis * de);
    nn::linear_fwd(cache.vis_input.data(), params_.ptr("enc/embed/w"), params_.ptr("enc/embed/b"),
                   x.data(), n_vis, dim, de);
    add_pos_(x.data(), plan.visible, "enc", de);

    // encoder blocks
    cache.enc_blocks.resize(config_.enc_depth);
    for (std::size_t b = 0; b < config_.enc_depth; ++b) {
      std::vector<T> y(n_vis * de);
      detail::block_fwd(params_, "enc", b, x.data(), y.data(), cache.enc_blocks[b], n_vis, de,
                        config_.enc_heads, config_.enc_mlp_dim());
      x = std::move(y);
    }
    cache.enc_norm_xhat.resize(n_vis * de);
    cache.enc_norm_rstd.resize(n_vis);
    cache.enc_out.resize(n_vis * de);
    nn::layernorm_fwd(x.data(), params_.ptr("enc/norm/g"), params_.ptr("enc/norm/b"),
                      cache.enc_out.data(), cache.enc_norm_xhat.data(),
                      cache.enc_norm_rstd.data(), n_vis, de);

    // decoder input: projected visible tokens scattered to their canonical
    // slots, mask tokens elsewhere, plus decoder position embeddings.
    std::vector<T> vis_proj(n_vis * dd);
    nn::linear_fwd(cache.enc_out.data(), params_.ptr("dec/proj/w"), params_.ptr("dec/proj/b"),
                   vis_proj.data(), n_vis, de, dd);
    std::vector<T> dx(n_all * dd, T(0));
    const T* mask_tok = params_.ptr("dec/mask_token");
    for (std::size_t t = 0; t < n_all; ++t)
      std::copy_n(mask_tok, dd, dx.data() + t * dd);
    for (std::size_t i = 0; i < n_vis; ++i)
      std::copy_n(vis_proj.data() + i * dd, dd, dx.data() + std::size_t(plan.visible[i]) * dd);
    std::vector<std::uint32_t> all_tokens(n_all);
    for (std::size_t t = 0; t < n_all; ++t) all_tokens[t] = static_cast<std::uint32_t>(t);
    add_pos_(dx.data(), all_tokens, "dec", dd);

    cache.dec_blocks.resize(config_.dec_depth);
    for (std::size_t b = 0; b < config_.dec_depth; ++b) {
      std::vector<T> y(n_all * dd);
      detail::block_fwd(params_, "dec", b, dx.data(), y.data(), cache.dec_blocks[b], n_all, dd,
                        config_.dec_heads, config_.dec_mlp_dim());
      dx = std::move(y);
    }
    cache.dec_norm_xhat.resize(n_all * dd);
    cache.dec_norm_rstd.resize(n_all);
    cache.dec_out.resize(n_all * dd);
    nn::layernorm_fwd(dx.data(), params_.ptr("dec/norm/g"), params_.ptr("dec/norm/b"),
                      cache.dec_out.data(), cache.dec_norm_xhat.data(),
                      cache.dec_norm_rstd.data(), n_all, dd);

    // head on masked tokens only
    cache.preds.resize(n_masked * dim);
    std::vector<T> masked_emb(n_masked * dd);
    for (std::size_t i = 0; i < n_masked; ++i)
      std::copy_n(cache.dec_out.data() + std::size_t(plan.masked[i]) * dd, dd,
                  masked_emb.data() + i * dd);
    nn::linear_fwd(masked_emb.data(), params_.ptr("dec/head/w"), params_.ptr("dec/head/b"),
                   cache.preds.data(), n_masked, dd, dim);

    // targets (optionally normalized per patch over valid pixels)
    cache.target_masked.resize(n_masked * dim);
    for (std::size_t i = 0; i < n_masked; ++i) {
      const T* src = tgt.token(plan.masked[i]);
      T* dst = cache.target_masked.data() + i * dim;
      std::copy_n(src, dim, dst);
      if (config_.norm_pix_per_patch) {
        const std::uint8_t* vmask = tgt.token_valid(plan.masked[i]);
        double mean = 0.0, n = 0.0;
        for (std::size_t j = 0; j < dim; ++j)
          if (vmask[j]) {
            mean += dst[j];
            n += 1.0;
          }
        if (n > 0) mean /= n;
        double var = 0.0;
        for (std::size_t j = 0; j < dim; ++j)
          if (vmask[j]) {
            double d = dst[j] - mean;
            var += d * d;
          }
        if (n > 0) var /= n;
        double sd = std::sqrt(var);
        if (sd <= 1e-12) sd = 1.0;
        for (std::size_t j = 0; j < dim; ++j)
          if (vmask[j]) dst[j] = static_cast<T>((dst[j] - mean) / sd);
      }
    }

    double denom = 0.0;
    double loss = 0.0;
    for (std::size_t i = 0; i < n_masked; ++i) {
      const std::uint8_t* vmask = input.token_valid(plan.masked[i]);
      for (std::size_t j = 0; j < dim; ++j) {
        if (!vmask[j]) continue;
        double d = static_cast<double>(cache.preds[i * dim + j]) -
                   static_cast<double>(cache.target_masked[i * dim + j]);
        loss += d * d;
        denom += 1.0;
      }
    }
    if (denom > 0) loss /= denom;
    cache.denom = denom;
    if (!std::isfinite(loss)) throw NumericFault("non-finite loss in forward pass");
    return {loss};
  }

  // Analytic gradients of forward()'s loss. scale multiplies the loss
  // (batch averaging). Gradients accumulate into grads.
  void backward(const MaskPlan& plan, const PatchTensor<T>& input, const MaeCache<T>& cache,
                TensorStore<T>& grads, double scale = 1.0) const {
    const PatchLayout& L = *layout_;
    const std::size_t dim = L.token_dim();
    const std::size_t de = config_.enc_dim, dd = config_.dec_dim;
    const std::size_t n_vis = cache.n_vis, n_all = cache.n_all, n_masked = cache.n_masked;

    // dL/dpred
    std::vector<T> d_preds(n_masked * dim, T(0));
    if (cache.denom > 0) {
      T c = static_cast<T>(2.0 * scale / cache.denom);
      for (std::size_t i = 0; i < n_masked; ++i) {
        const std::uint8_t* vmask = input.token_valid(plan.masked[i]);
        for (std::size_t j = 0; j < dim; ++j)
          if (vmask[j])
            d_preds[i * dim + j] =
                c * (cache.preds[i * dim + j] - cache.target_masked[i * dim + j]);
      }
    }

    // head
    std::vector<T> masked_emb(n_masked * dd);
    for (std::size_t i = 0; i < n_masked; ++i)
      std::copy_n(cache.dec_out.data() + std::size_t(plan.masked[i]) * dd, dd,
                  masked_emb.data() + i * dd);
    std::vector<T> d_masked_emb(n_masked * dd, T(0));
    nn::linear_bwd(masked_emb.data(), params_.ptr("dec/head/w"), d_preds.data(),
                   d_masked_emb.data(), grads.ptr("dec/head/w"), grads.ptr("dec/head/b"), n_masked,
                   dd, dim);
    std::vector<T> d_dec_out(n_all * dd, T(0));
    for (std::size_t i = 0; i < n_masked; ++i) {
      T* dst = d_dec_out.data() + std::size_t(plan.masked[i]) * dd;
      const T* src = d_masked_emb.data() + i * dd;
      for (std::size_t j = 0; j < dd; ++j) dst[j] += src[j];
    }

    // decoder final norm + blocks
    std::vector<T> d_dec(n_all * dd, T(0));
    nn::layernorm_bwd(cache.dec_norm_xhat.data(), cache.dec_norm_rstd.data(),
                      params_.ptr("dec/norm/g"), d_dec_out.data(), d_dec.data(),
                      grads.ptr("dec/norm/g"), grads.ptr("dec/norm/b"), n_all, dd);
    for (std::size_t b = config_.dec_depth; b-- > 0;) {
      std::vector<T> d_in(n_all * dd, T(0));
      detail::block_bwd(params_, grads, "dec", b, d_dec.data(), d_in.data(), cache.dec_blocks[b],
                        n_all, dd, config_.dec_heads, config_.dec_mlp_dim());
      d_dec = std::move(d_in);
    }

    // decoder input assembly: position tables, mask token, visible proj
    std::vector<std::uint32_t> all_tokens(n_all);
    for (std::size_t t = 0; t < n_all; ++t) all_tokens[t] = static_cast<std::uint32_t>(t);
    add_pos_grad_(d_dec.data(), all_tokens, "dec", dd, grads);
    std::vector<std::uint8_t> is_visible(n_all, 0);
    for (std::size_t i = 0; i < n_vis; ++i) is_visible[plan.visible[i]] = 1;
    T* d_mask_tok = grads.ptr("dec/mask_token");
    for (std::size_t t = 0; t < n_all; ++t) {
      if (is_visible[t]) continue;
      const T* src = d_dec.data() + t * dd;
      for (std::size_t j = 0; j < dd; ++j) d_mask_tok[j] += src[j];
    }
    std::vector<T> d_vis_proj(n_vis * dd);
    for (std::size_t i = 0; i < n_vis; ++i)
      std::copy_n(d_dec.data() + std::size_t(plan.visible[i]) * dd, dd,
                  d_vis_proj.data() + i * dd);
    std::vector<T> d_enc_out(n_vis * de, T(0));
    nn::linear_bwd(cache.enc_out.data(), params_.ptr("dec/proj/w"), d_vis_proj.data(),
                   d_enc_out.data(), grads.ptr("dec/proj/w"), grads.ptr("dec/proj/b"), n_vis, de,
                   dd);

    // encoder final norm + blocks
    std::vector<T> d_enc(n_vis * de, T(0));
    nn::layernorm_bwd(cache.enc_norm_xhat.data(), cache.enc_norm_rstd.data(),
                      params_.ptr("enc/norm/g"), d_enc_out.data(), d_enc.data(),
                      grads.ptr("enc/norm/g"), grads.ptr("enc/norm/b"), n_vis, de);
    for (std::size_t b = config_.enc_depth; b-- > 0;) {
      std::vector<T> d_in(n_vis * de, T(0));
      detail::block_bwd(params_, grads, "enc", b, d_enc.data(), d_in.data(), cache.enc_blocks[b],
                        n_vis, de, config_.enc_heads, config_.enc_mlp_dim());
      d_enc = std::move(d_in);
    }

    // embed + encoder position tables
    add_pos_grad_(d_enc.data(), plan.visible, "enc", de, grads);
    nn::linear_bwd(cache.vis_input.data(), params_.ptr("enc/embed/w"), d_enc.data(),
                   static_cast<T*>(nullptr), grads.ptr("enc/embed/w"), grads.ptr("enc/embed/b"),
                   n_vis, dim, de);
  }

  // Full clip prediction: visible positions pass the target through, masked
  // positions take decoder predictions (un-normalized if per-patch target
  // norm is enabled). Returns a T x H x W buffer; background stays 0.
  std::vector<T> reconstruct(const PatchTensor<T>& input, const MaskPlan& plan) const {
    MaeCache<T> cache;
    forward(input, plan, cache);
    const PatchLayout& L = *layout_;
    const std::size_t dim = L.token_dim();
    PatchTensor<T> merged = input;
    for (std::size_t i = 0; i < plan.masked.size(); ++i) {
      T* dst = merged.token(plan.masked[i]);
      const std::uint8_t* vmask = input.token_valid(plan.masked[i]);
      for (std::size_t j = 0; j < dim; ++j) dst[j] = vmask[j] ? cache.preds[i * dim + j] : T(0);
      if (config_.norm_pix_per_patch) {
        // map normalized predictions back through the target patch stats
        const T* tgt = input.token(plan.masked[i]);
        double mean = 0.0, n = 0.0;
        for (std::size_t j = 0; j < dim; ++j)
          if (vmask[j]) {
            mean += tgt[j];
            n += 1.0;
          }
        if (n > 0) mean /= n;
        double var = 0.0;
        for (std::size_t j = 0; j < dim; ++j)
          if (vmask[j]) {
            double d = tgt[j] - mean;
            var += d * d;
          }
        if (n > 0) var /= n;
        double sd = std::sqrt(var);
        if (sd <= 1e-12) sd = 1.0;
        for (std::size_t j = 0; j < dim; ++j)
          if (vmask[j]) dst[j] = static_cast<T>(dst[j] * sd + mean);
      }
    }
    return unpatchify(merged);
  }

  // Apply the frozen encoder to a fully observed clip: every nonempty token
  // is embedded and encoded; no masking, no decoder. Output is
  // [num_tokens x enc_dim] in canonical token order.
  std::vector<T> encode_full(const PatchTensor<T>& input) const {
    const PatchLayout& L = *layout_;
    const std::size_t dim = L.token_dim();
    const std::size_t de = config_.enc_dim;
    const std::size_t n = L.num_tokens();
    std::vector<T> x(n * de);
    nn::linear_fwd(input.values.data(), params_.ptr("enc/embed/w"), params_.ptr("enc/embed/b"),
                   x.data(), n, dim, de);
    std::vector<std::uint32_t> all_tokens(n);
    for (std::size_t t = 0; t < n; ++t) all_tokens[t] = static_cast<std::uint32_t>(t);
    add_pos_(x.data(), all_tokens, "enc", de);
    detail::BlockCache<T> scratch;
    std::vector<T> y(n * de);
    for (std::size_t b = 0; b < config_.enc_depth; ++b) {
      detail::block_fwd(params_, "enc", b, x.data(), y.data(), scratch, n, de, config_.enc_heads,
                        config_.enc_mlp_dim());
      std::swap(x, y);
    }
    std::vector<T> xhat(n * de), rstd(n), out(n * de);
    nn::layernorm_fwd(x.data(), params_.ptr("enc/norm/g"), params_.ptr("enc/norm/b"), out.data(),
                      xhat.data(), rstd.data(), n, de);
    return out;
  }

  // Parameter accounting by stack. Encoder covers embed, encoder position
  // tables, blocks and final norm; decoder covers the rest.
  struct ParamCounts {
    std::size_t encoder = 0, decoder = 0, total = 0;
  };
  ParamCounts param_counts() const {
    ParamCounts c;
    for (const auto& e : tlayout_.entries) {
      if (e.name.starts_with("enc/"))
        c.encoder += e.size;
      else
        c.decoder += e.size;
      c.total += e.size;
    }
    return c;
  }

 private:
  void build_layout_() {
    const std::size_t dim = layout_->token_dim();
    const std::uint32_t s_count = static_cast<std::uint32_t>(layout_->num_spatial());
    auto add_stack = [&](const std::string& stack, std::uint32_t d, std::uint32_t depth,
                         std::uint32_t mlp) {
      tlayout_.add(stack + "/pos_t", {layout_->grid_t, d});
      tlayout_.add(stack + "/pos_s", {s_count, d});
      for (std::uint32_t b = 0; b < depth; ++b) {
        tlayout_.add(detail::bname(stack, b, "ln1/g"), {d});
        tlayout_.add(detail::bname(stack, b, "ln1/b"), {d});
        tlayout_.add(detail::bname(stack, b, "attn/w_qkv"), {3 * d, d});
        tlayout_.add(detail::bname(stack, b, "attn/b_qkv"), {3 * d});
        tlayout_.add(detail::bname(stack, b, "attn/w_proj"), {d, d});
        tlayout_.add(detail::bname(stack, b, "attn/b_proj"), {d});
        tlayout_.add(detail::bname(stack, b, "ln2/g"), {d});
        tlayout_.add(detail::bname(stack, b, "ln2/b"), {d});
        tlayout_.add(detail::bname(stack, b, "mlp/w_fc1"), {mlp, d});
        tlayout_.add(detail::bname(stack, b, "mlp/b_fc1"), {mlp});
        tlayout_.add(detail::bname(stack, b, "mlp/w_fc2"), {d, mlp});
        tlayout_.add(detail::bname(stack, b, "mlp/b_fc2"), {d});
      }
      tlayout_.add(stack + "/norm/g", {d});
      tlayout_.add(stack + "/norm/b", {d});
    };
    tlayout_.add("enc/embed/w", {config_.enc_dim, static_cast<std::uint32_t>(dim)});
    tlayout_.add("enc/embed/b", {config_.enc_dim});
    add_stack("enc", config_.enc_dim, config_.enc_depth, config_.enc_mlp_dim());
    tlayout_.add("dec/proj/w", {config_.dec_dim, config_.enc_dim});
    tlayout_.add("dec/proj/b", {config_.dec_dim});
    tlayout_.add("dec/mask_token", {config_.dec_dim});
    add_stack("dec", config_.dec_dim, config_.dec_depth, config_.dec_mlp_dim());
    tlayout_.add("dec/head/w", {static_cast<std::uint32_t>(dim), config_.dec_dim});
    tlayout_.add("dec/head/b", {static_cast<std::uint32_t>(dim)});
  }

  // pos(token) = temporal[t_of] + spatial[s_of]
  void add_pos_(T* x, const std::vector<std::uint32_t>& tokens, const std::string& stack,
                std::size_t d) const {
    const T* pos_t = params_.ptr(stack + "/pos_t");
    const T* pos_s = params_.ptr(stack + "/pos_s");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      std::uint32_t ti = layout_->t_of(tokens[i]);
      std::uint32_t si = layout_->s_of(tokens[i]);
      T* row = x + i * d;
      const T* pt = pos_t + std::size_t(ti) * d;
      const T* ps = pos_s + std::size_t(si) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += pt[j] + ps[j];
    }
  }

  void add_pos_grad_(const T* dx, const std::vector<std::uint32_t>& tokens,
                     const std::string& stack, std::size_t d, TensorStore<T>& grads) const {
    T* dpos_t = grads.ptr(stack + "/pos_t");
    T* dpos_s = grads.ptr(stack + "/pos_s");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      std::uint32_t ti = layout_->t_of(tokens[i]);
      std::uint32_t si = layout_->s_of(tokens[i]);
      const T* row = dx + i * d;
      T* pt = dpos_t + std::size_t(ti) * d;
      T* ps = dpos_s + std::size_t(si) * d;
      for (std::size_t j = 0; j < d; ++j) {
        pt[j] += row[j];
        ps[j] += row[j];
      }
    }
  }

  MaeConfig config_;
  const PatchLayout* layout_;
  TensorLayout tlayout_;
  TensorStore<T> params_;
};

// ---- optimizer and schedule ----

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

// Decoupled AdamW. The decay term lr*wd*param is applied independently of
// the moment update; bias correction counts steps from 1.
template <typename T>
struct AdamW {
  std::uint64_t step = 0;
  std::vector<T> m, v;

  void apply(std::vector<T>& params, const std::vector<T>& grads, const AdamWConfig& cfg) {
    if (params.size() != grads.size()) throw DimensionError("param/grad size mismatch");
    if (m.empty()) {
      m.assign(params.size(), T(0));
      v.assign(params.size(), T(0));
    }
    ++step;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      double g = static_cast<double>(grads[i]);
      if (!std::isfinite(g)) throw NumericFault("non-finite gradient at index " + std::to_string(i));
      double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double mhat = static_cast<double>(m[i]) / bc1;
      double vhat = static_cast<double>(v[i]) / bc2;
      double p = static_cast<double>(params[i]);
      params[i] = static_cast<T>(p - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps)) -
                                 cfg.lr * cfg.weight_decay * p);
    }
  }
};

// Linear warmup to peak over [0, warmup), then cosine decay to 0 at total.
inline double lr_at(std::uint64_t step, double peak, std::uint64_t warmup, std::uint64_t total) {
  if (step > total) throw ConfigError("step beyond schedule total");
  if (warmup >= total && warmup != 0) throw ConfigError("warmup must be < total");
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (step == total) return 0.0;  // exact cos(pi) endpoint
  double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace flatmae
