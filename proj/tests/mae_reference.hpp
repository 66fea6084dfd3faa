// SPDX-License-Identifier: Apache-2.0
#pragma once

// Straight-line reimplementation of the masked-autoencoder forward pass,
// written independently of the library kernels (nested vectors, naive
// loops). It reads parameters by name from a trained model's store and is
// used only as a dual-implementation oracle in tests.

#include <cmath>
#include <string>
#include <vector>

#include "flatmae/mae.hpp"
#include "flatmae/token.hpp"

namespace refimpl {

using Mat = std::vector<std::vector<double>>;

inline Mat get_mat(const flatmae::TensorStore<double>& store, const std::string& name,
                   std::size_t rows, std::size_t cols) {
  const double* p = store.ptr(name);
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = p[i * cols + j];
  return m;
}

inline std::vector<double> get_vec(const flatmae::TensorStore<double>& store,
                                   const std::string& name, std::size_t n) {
  const double* p = store.ptr(name);
  return std::vector<double>(p, p + n);
}

// y = W x + b with W[out][in]
inline std::vector<double> affine(const Mat& w, const std::vector<double>& b,
                                  const std::vector<double>& x) {
  std::vector<double> y(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    double acc = b.empty() ? 0.0 : b[i];
    for (std::size_t j = 0; j < x.size(); ++j) acc += w[i][j] * x[j];
    y[i] = acc;
  }
  return y;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& g,
                                      const std::vector<double>& b) {
  std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= double(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= double(d);
  double rstd = 1.0 / std::sqrt(var + 1e-6);
  std::vector<double> y(d);
  for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * rstd * g[i] + b[i];
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

struct StackParams {
  std::vector<Mat> w_qkv, w_proj, w_fc1, w_fc2;
  std::vector<std::vector<double>> b_qkv, b_proj, b_fc1, b_fc2;
  std::vector<std::vector<double>> ln1_g, ln1_b, ln2_g, ln2_b;
  std::vector<double> norm_g, norm_b;
  Mat pos_t, pos_s;
};

inline StackParams load_stack(const flatmae::TensorStore<double>& store, const std::string& stack,
                              std::size_t d, std::size_t depth, std::size_t mlp, std::size_t n_t,
                              std::size_t n_s) {
  StackParams sp;
  for (std::size_t i = 0; i < depth; ++i) {
    auto base = stack + "/block" + std::to_string(i) + "/";
    sp.ln1_g.push_back(get_vec(store, base + "ln1/g", d));
    sp.ln1_b.push_back(get_vec(store, base + "ln1/b", d));
    sp.w_qkv.push_back(get_mat(store, base + "attn/w_qkv", 3 * d, d));
    sp.b_qkv.push_back(get_vec(store, base + "attn/b_qkv", 3 * d));
    sp.w_proj.push_back(get_mat(store, base + "attn/w_proj", d, d));
    sp.b_proj.push_back(get_vec(store, base + "attn/b_proj", d));
    sp.ln2_g.push_back(get_vec(store, base + "ln2/g", d));
    sp.ln2_b.push_back(get_vec(store, base + "ln2/b", d));
    sp.w_fc1.push_back(get_mat(store, base + "mlp/w_fc1", mlp, d));
    sp.b_fc1.push_back(get_vec(store, base + "mlp/b_fc1", mlp));
    sp.w_fc2.push_back(get_mat(store, base + "mlp/w_fc2", d, mlp));
    sp.b_fc2.push_back(get_vec(store, base + "mlp/b_fc2", d));
  }
  sp.norm_g = get_vec(store, stack + "/norm/g", d);
  sp.norm_b = get_vec(store, stack + "/norm/b", d);
  sp.pos_t = get_mat(store, stack + "/pos_t", n_t, d);
  sp.pos_s = get_mat(store, stack + "/pos_s", n_s, d);
  return sp;
}

// Full pre-norm transformer over a token list (rows of x).
inline void run_blocks(Mat& x, const StackParams& sp, std::size_t heads) {
  std::size_t n = x.size();
  std::size_t d = x[0].size();
  std::size_t dh = d / heads;
  for (std::size_t blk = 0; blk < sp.w_qkv.size(); ++blk) {
    // attention
    Mat normed(n);
    for (std::size_t i = 0; i < n; ++i)
      normed[i] = layer_norm(x[i], sp.ln1_g[blk], sp.ln1_b[blk]);
    Mat qkv(n);
    for (std::size_t i = 0; i < n; ++i) qkv[i] = affine(sp.w_qkv[blk], sp.b_qkv[blk], normed[i]);
    Mat ctx(n, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> scores(n);
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t l = 0; l < dh; ++l)
            s += qkv[i][h * dh + l] * qkv[j][d + h * dh + l];
          scores[j] = s / std::sqrt(double(dh));
        }
        double mx = scores[0];
        for (double v : scores) mx = std::max(mx, v);
        double z = 0.0;
        for (auto& v : scores) {
          v = std::exp(v - mx);
          z += v;
        }
        for (auto& v : scores) v /= z;
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t l = 0; l < dh; ++l)
            ctx[i][h * dh + l] += scores[j] * qkv[j][2 * d + h * dh + l];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto proj = affine(sp.w_proj[blk], sp.b_proj[blk], ctx[i]);
      for (std::size_t j = 0; j < d; ++j) x[i][j] += proj[j];
    }
    // mlp
    for (std::size_t i = 0; i < n; ++i) {
      auto h1 = affine(sp.w_fc1[blk], sp.b_fc1[blk], layer_norm(x[i], sp.ln2_g[blk], sp.ln2_b[blk]));
      for (auto& v : h1) v = gelu(v);
      auto h2 = affine(sp.w_fc2[blk], sp.b_fc2[blk], h1);
      for (std::size_t j = 0; j < d; ++j) x[i][j] += h2[j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) x[i] = layer_norm(x[i], sp.norm_g, sp.norm_b);
}

inline double forward_loss(const flatmae::MaeModel<double>& model,
                           const flatmae::PatchTensor<double>& input,
                           const flatmae::MaskPlan& plan) {
  const auto& cfg = model.config();
  const auto& layout = model.patch_layout();
  const auto& store = model.params();
  std::size_t dim = layout.token_dim();
  std::size_t de = cfg.enc_dim, dd = cfg.dec_dim;
  std::size_t n_s = layout.num_spatial();

  auto enc = load_stack(store, "enc", de, cfg.enc_depth, cfg.enc_mlp_dim(), layout.grid_t, n_s);
  auto dec = load_stack(store, "dec", dd, cfg.dec_depth, cfg.dec_mlp_dim(), layout.grid_t, n_s);
  auto embed_w = get_mat(store, "enc/embed/w", de, dim);
  auto embed_b = get_vec(store, "enc/embed/b", de);
  auto proj_w = get_mat(store, "dec/proj/w", dd, de);
  auto proj_b = get_vec(store, "dec/proj/b", dd);
  auto mask_tok = get_vec(store, "dec/mask_token", dd);
  auto head_w = get_mat(store, "dec/head/w", dim, dd);
  auto head_b = get_vec(store, "dec/head/b", dim);

  // encoder over visible tokens
  Mat x(plan.visible.size());
  for (std::size_t i = 0; i < plan.visible.size(); ++i) {
    std::uint32_t tok = plan.visible[i];
    std::vector<double> vals(input.token(tok), input.token(tok) + dim);
    x[i] = affine(embed_w, embed_b, vals);
    for (std::size_t j = 0; j < de; ++j)
      x[i][j] += enc.pos_t[layout.t_of(tok)][j] + enc.pos_s[layout.s_of(tok)][j];
  }
  run_blocks(x, enc, cfg.enc_heads);

  // decoder over all tokens
  Mat y(layout.num_tokens());
  for (std::size_t t = 0; t < layout.num_tokens(); ++t) {
    y[t] = mask_tok;
    for (std::size_t j = 0; j < dd; ++j)
      y[t][j] += dec.pos_t[layout.t_of(std::uint32_t(t))][j] +
                 dec.pos_s[layout.s_of(std::uint32_t(t))][j];
  }
  for (std::size_t i = 0; i < plan.visible.size(); ++i) {
    auto proj = affine(proj_w, proj_b, x[i]);
    for (std::size_t j = 0; j < dd; ++j)
      y[plan.visible[i]][j] = proj[j] + dec.pos_t[layout.t_of(plan.visible[i])][j] +
                              dec.pos_s[layout.s_of(plan.visible[i])][j];
  }
  run_blocks(y, dec, cfg.dec_heads);

  double loss = 0.0, denom = 0.0;
  for (std::uint32_t tok : plan.masked) {
    auto pred = affine(head_w, head_b, y[tok]);
    const auto* valid = input.token_valid(tok);
    for (std::size_t j = 0; j < dim; ++j) {
      if (!valid[j]) continue;
      double d = pred[j] - input.token(tok)[j];
      loss += d * d;
      denom += 1.0;
    }
  }
  return denom > 0 ? loss / denom : 0.0;
}

}  // namespace refimpl
