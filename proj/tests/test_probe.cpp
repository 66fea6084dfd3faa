// SPDX-License-Identifier: Apache-2.0
#include "flatmae/evalprobe.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "flatmae/rng.hpp"
#include "flatmae/synth.hpp"
#include "test_util.hpp"

namespace fm = flatmae;

namespace {

fm::ProbeConfig small_cfg(std::uint32_t classes, std::uint32_t query_dim = 16) {
  fm::ProbeConfig cfg;
  cfg.query_dim = query_dim;
  cfg.classes = classes;
  return cfg;
}

// Linearly separable token features: class means +/-1 on alternating dims.
fm::FeatureDataset separable_features(std::size_t n_per_class, std::uint32_t classes,
                                      std::size_t n_tokens, std::size_t dim, double noise,
                                      std::uint64_t seed) {
  fm::FeatureDataset data;
  data.n_tokens = n_tokens;
  data.feat_dim = dim;
  fm::CounterRng rng(seed);
  for (std::uint32_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      std::vector<float> row(n_tokens * dim);
      for (std::size_t t = 0; t < n_tokens; ++t)
        for (std::size_t d = 0; d < dim; ++d) {
          double mean = (d % classes == c) ? 1.0 : -1.0;
          row[t * dim + d] = float(mean + noise * rng.next_gauss());
        }
      data.features.push_back(std::move(row));
      data.labels.push_back(c);
    }
  }
  return data;
}

}  // namespace

TEST(AttentivePool, SingleTokenIsItsValueProjection) {
  auto cfg = small_cfg(3, 8);
  fm::AttentiveProbe<double> probe(6, cfg);
  probe.init(4);
  std::vector<double> x(6);
  fm::CounterRng rng(1);
  for (auto& v : x) v = rng.next_gauss();
  typename fm::AttentiveProbe<double>::Cache cache;
  probe.forward(x.data(), 1, cache);
  // softmax over one item = 1, so pooled == value projection of the token
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(cache.pooled[j], cache.vals[j], 1e-12);
}

TEST(AttentivePool, IdenticalTokensPoolToSingleProjection) {
  auto cfg = small_cfg(2, 8);
  fm::AttentiveProbe<double> probe(5, cfg);
  probe.init(7);
  std::vector<double> one(5);
  fm::CounterRng rng(2);
  for (auto& v : one) v = rng.next_gauss();
  std::vector<double> many;
  for (int i = 0; i < 6; ++i) many.insert(many.end(), one.begin(), one.end());
  typename fm::AttentiveProbe<double>::Cache c1, c6;
  probe.forward(one.data(), 1, c1);
  probe.forward(many.data(), 6, c6);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(c6.pooled[j], c1.pooled[j], 1e-12);
}

TEST(AttentivePool, AttentionWeightsSumToOne) {
  auto cfg = small_cfg(2, 16);
  cfg.heads = 2;
  fm::AttentiveProbe<double> probe(7, cfg);
  probe.init(9);
  std::vector<double> x(7 * 9);
  fm::CounterRng rng(3);
  for (auto& v : x) v = rng.next_gauss();
  typename fm::AttentiveProbe<double>::Cache cache;
  probe.forward(x.data(), 9, cache);
  for (std::size_t h = 0; h < 2; ++h) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 9; ++j) sum += cache.attn[h * 9 + j];
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(AttentiveProbe, GradCheckAllParamsAndInput) {
  auto cfg = small_cfg(3, 8);
  cfg.heads = 2;
  const std::size_t n = 4, dim = 5;
  fm::AttentiveProbe<double> probe(dim, cfg);
  probe.init(11);
  // nonzero classifier so its gradients are informative
  fm::CounterRng crng(12);
  for (auto& v : probe.params().flat) v = 0.3 * crng.next_gauss();
  std::vector<double> x(n * dim);
  fm::CounterRng rng(13);
  for (auto& v : x) v = rng.next_gauss();
  const std::size_t label = 1;

  typename fm::AttentiveProbe<double>::Cache cache;
  probe.forward(x.data(), n, cache);
  fm::TensorStore<double> grads(&probe.tensors());
  std::vector<double> dx(n * dim, 0.0);
  probe.backward(cache, label, grads, dx.data());

  auto loss_now = [&] {
    typename fm::AttentiveProbe<double>::Cache c;
    probe.forward(x.data(), n, c);
    std::vector<double> dl(cfg.classes);
    return fm::nn::cross_entropy(c.logits.data(), cfg.classes, label, dl.data());
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < probe.params().flat.size(); ++i) {
    double keep = probe.params().flat[i];
    probe.params().flat[i] = keep + h;
    double fp = loss_now();
    probe.params().flat[i] = keep - h;
    double fmi = loss_now();
    probe.params().flat[i] = keep;
    double num = (fp - fmi) / (2 * h);
    EXPECT_NEAR(grads.flat[i], num, 1e-6 + 1e-5 * std::abs(num)) << "param " << i;
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + h;
    double fp = loss_now();
    x[i] = keep - h;
    double fmi = loss_now();
    x[i] = keep;
    double num = (fp - fmi) / (2 * h);
    EXPECT_NEAR(dx[i], num, 1e-6 + 1e-5 * std::abs(num)) << "x " << i;
  }
}

TEST(Sweep, SingleConfigGridReturnsIt) {
  auto train = separable_features(40, 2, 3, 8, 0.3, 1);
  auto val = separable_features(20, 2, 3, 8, 0.3, 2);
  auto test = separable_features(20, 2, 3, 8, 0.3, 3);
  auto cfg = small_cfg(2);
  cfg.lr_scales = {3.0};
  cfg.weight_decays = {0.01};
  cfg.epochs = 8;
  auto result = fm::run_sweep(train, val, test, cfg, 5);
  ASSERT_EQ(result.points.size(), 1u);
  EXPECT_EQ(result.best_index, 0u);
  EXPECT_EQ(result.points[0].lr_scale, 3.0);
  EXPECT_EQ(result.points[0].weight_decay, 0.01);
}

TEST(Sweep, PaperGridEnumerates49Configs) {
  fm::ProbeConfig cfg;  // paper defaults
  EXPECT_EQ(cfg.lr_scales.size() * cfg.weight_decays.size(), 49u);
  EXPECT_EQ(cfg.epochs, 20u);
  EXPECT_EQ(cfg.batch, 128u);
  EXPECT_EQ(cfg.base_lr, 5e-4);
}

TEST(Sweep, SeparableFeaturesReachHighAccuracy) {
  auto train = separable_features(100, 2, 4, 8, 0.4, 11);
  auto val = separable_features(40, 2, 4, 8, 0.4, 12);
  auto test = separable_features(40, 2, 4, 8, 0.4, 13);
  auto cfg = small_cfg(2);
  cfg.lr_scales = {1.0, 10.0};
  cfg.weight_decays = {3e-4, 0.01};
  auto result = fm::run_sweep(train, val, test, cfg, 7);
  EXPECT_GE(result.test_accuracy, 0.95);
}

TEST(Sweep, EmptySplitRejected) {
  fm::FeatureDataset empty;
  empty.n_tokens = 2;
  empty.feat_dim = 4;
  auto train = separable_features(10, 2, 2, 4, 0.3, 1);
  EXPECT_THROW(fm::run_sweep(train, empty, train, small_cfg(2), 1), fm::ConfigError);
}

TEST(Connectome, FeatureLengthFormula) {
  EXPECT_EQ(std::size_t(400) * 399 / 2, 79800u);
  auto grid = testutil::full_grid(8, 8);
  auto parcels = fm::make_tiled_parcels(grid, 10);
  parcels.validate(grid);
  auto clip = testutil::random_clip(grid, 16, 5);
  auto feat = fm::connectome_features(clip, parcels);
  EXPECT_EQ(feat.size(), 45u);
}

TEST(Connectome, IdenticalSeriesCorrelateAtOne) {
  // two parcels, both averaging identical pixels
  auto grid = testutil::full_grid(2, 2);
  fm::ParcelMap parcels;
  parcels.parcels = 2;
  parcels.label = {1, 1, 2, 2};
  fm::FlatClip clip;
  clip.t = 8;
  clip.height = 2;
  clip.width = 2;
  clip.data.resize(8 * 4);
  fm::CounterRng rng(4);
  for (std::uint32_t f = 0; f < 8; ++f) {
    float v = float(rng.next_gauss());
    for (std::uint32_t px = 0; px < 4; ++px) clip.data[f * 4 + px] = v;
  }
  auto feat = fm::connectome_features(clip, parcels);
  ASSERT_EQ(feat.size(), 1u);
  EXPECT_NEAR(feat[0], 1.0f, 1e-6);
}

TEST(Connectome, MatchesBruteForcePearson) {
  auto grid = testutil::full_grid(8, 8);
  auto parcels = fm::make_tiled_parcels(grid, 7);
  auto clip = testutil::random_clip(grid, 12, 9);
  auto feat = fm::connectome_features(clip, parcels);

  // independent oracle: recompute parcel means and Pearson directly
  std::size_t p_count = parcels.parcels;
  std::vector<std::vector<double>> series(p_count, std::vector<double>(clip.t, 0.0));
  std::vector<double> npix(p_count, 0.0);
  for (std::uint32_t f = 0; f < clip.t; ++f)
    for (std::size_t px = 0; px < 64; ++px)
      if (parcels.label[px]) {
        series[parcels.label[px] - 1][f] += clip.data[f * 64 + px];
        if (f == 0) npix[parcels.label[px] - 1] += 1.0;
      }
  for (std::size_t p = 0; p < p_count; ++p)
    for (std::uint32_t f = 0; f < clip.t; ++f) series[p][f] /= npix[p];
  std::size_t k = 0;
  for (std::size_t i = 0; i < p_count; ++i)
    for (std::size_t j = i + 1; j < p_count; ++j, ++k) {
      double mi = 0, mj = 0;
      for (std::uint32_t f = 0; f < clip.t; ++f) {
        mi += series[i][f];
        mj += series[j][f];
      }
      mi /= clip.t;
      mj /= clip.t;
      double sij = 0, sii = 0, sjj = 0;
      for (std::uint32_t f = 0; f < clip.t; ++f) {
        sij += (series[i][f] - mi) * (series[j][f] - mj);
        sii += (series[i][f] - mi) * (series[i][f] - mi);
        sjj += (series[j][f] - mj) * (series[j][f] - mj);
      }
      double expected = sij / std::sqrt(sii * sjj);
      EXPECT_NEAR(feat[k], expected, 1e-6) << "pair " << i << "," << j;
    }
}

TEST(Connectome, AffineRescaleInvariance) {
  auto grid = testutil::full_grid(8, 8);
  auto parcels = fm::make_tiled_parcels(grid, 5);
  auto clip = testutil::random_clip(grid, 10, 21);
  auto base = fm::connectome_features<double>(clip, parcels);
  // rescale every pixel of parcel 2 affinely (positive scale)
  auto scaled = clip;
  for (std::uint32_t f = 0; f < clip.t; ++f)
    for (std::size_t px = 0; px < 64; ++px)
      if (parcels.label[px] == 2)
        scaled.data[f * 64 + px] = 3.7f * scaled.data[f * 64 + px] + 1.25f;
  auto after = fm::connectome_features<double>(scaled, parcels);
  ASSERT_EQ(base.size(), after.size());
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], after[i], 1e-6);
}

TEST(Connectome, ZeroVarianceParcelGuardedToZero) {
  auto grid = testutil::full_grid(2, 2);
  fm::ParcelMap parcels;
  parcels.parcels = 2;
  parcels.label = {1, 1, 2, 2};
  fm::FlatClip clip;
  clip.t = 6;
  clip.height = 2;
  clip.width = 2;
  clip.data.assign(6 * 4, 0.0f);
  fm::CounterRng rng(5);
  for (std::uint32_t f = 0; f < 6; ++f) {
    clip.data[f * 4 + 0] = float(rng.next_gauss());
    clip.data[f * 4 + 1] = float(rng.next_gauss());
    clip.data[f * 4 + 2] = 4.0f;  // constant parcel
    clip.data[f * 4 + 3] = 4.0f;
  }
  auto feat = fm::connectome_features(clip, parcels);
  ASSERT_EQ(feat.size(), 1u);
  EXPECT_EQ(feat[0], 0.0f);
}

TEST(PatchEmbed, TokenCountMatchesMae) {
  auto grid = testutil::full_grid(8, 8);
  auto layout = fm::build_layout(grid, 2, 4, 8);
  fm::PatchEmbedBaseline<float> baseline(layout, 12);
  auto clip = testutil::random_clip(grid, 8, 3);
  auto tokens = fm::patchify<float>(clip, layout);
  auto feats = baseline.embed(tokens);
  EXPECT_EQ(feats.size(), layout.num_tokens() * 12);
}

TEST(PatchEmbed, ZeroClipGivesPositionPlusBias) {
  auto grid = testutil::full_grid(8, 8);
  auto layout = fm::build_layout(grid, 2, 4, 8);
  fm::PatchEmbedBaseline<float> baseline(layout, 6);
  baseline.init(8);
  fm::FlatClip zero;
  zero.t = 8;
  zero.height = 8;
  zero.width = 8;
  zero.data.assign(8 * 64, 0.0f);
  auto tokens = fm::patchify<float>(zero, layout);
  auto feats = baseline.embed(tokens);
  const float* pos_t = baseline.params().ptr("pos_t");
  const float* pos_s = baseline.params().ptr("pos_s");
  const float* bias = baseline.params().ptr("embed/b");
  for (std::size_t tok = 0; tok < layout.num_tokens(); ++tok)
    for (std::size_t j = 0; j < 6; ++j) {
      float expected = bias[j] + pos_t[layout.t_of(std::uint32_t(tok)) * 6 + j] +
                       pos_s[layout.s_of(std::uint32_t(tok)) * 6 + j];
      EXPECT_NEAR(feats[tok * 6 + j], expected, 1e-6);
    }
}

TEST(PatchEmbed, EndToEndSeparableAccuracy) {
  // class signal: sign of a fixed spatial pattern, plus noise
  auto grid = testutil::full_grid(8, 8);
  auto layout = fm::build_layout(grid, 4, 4, 8);
  fm::CounterRng pattern_rng(31);
  std::vector<float> pattern(64);
  for (auto& v : pattern) v = float(pattern_rng.next_gauss());

  auto make_clip = [&](std::uint32_t cls, std::uint64_t seed) {
    fm::FlatClip clip;
    clip.t = 8;
    clip.height = 8;
    clip.width = 8;
    clip.data.resize(8 * 64);
    fm::CounterRng rng(seed);
    double sign = cls == 0 ? 1.0 : -1.0;
    for (std::uint32_t f = 0; f < 8; ++f)
      for (std::size_t px = 0; px < 64; ++px)
        clip.data[f * 64 + px] = float(sign * pattern[px] + 0.5 * rng.next_gauss());
    return clip;
  };

  std::vector<fm::PatchTensor<float>> train_clips;
  std::vector<std::uint32_t> train_labels;
  std::vector<fm::PatchTensor<float>> test_clips;
  std::vector<std::uint32_t> test_labels;
  for (std::uint32_t cls = 0; cls < 2; ++cls) {
    for (std::size_t i = 0; i < 100; ++i) {
      train_clips.push_back(fm::patchify<float>(make_clip(cls, 1000 + cls * 500 + i), layout));
      train_labels.push_back(cls);
    }
    for (std::size_t i = 0; i < 30; ++i) {
      test_clips.push_back(fm::patchify<float>(make_clip(cls, 7000 + cls * 500 + i), layout));
      test_labels.push_back(cls);
    }
  }

  auto cfg = small_cfg(2, 16);
  cfg.epochs = 20;
  fm::PatchEmbedBaseline<float> baseline(layout, 16);
  baseline.init(17);
  fm::AttentiveProbe<float> probe(16, cfg);
  probe.init(18);
  double train_acc = fm::train_patch_embed_probe(baseline, probe, train_clips, train_labels, cfg,
                                                 3.0, 1e-3, 19);
  EXPECT_GT(train_acc, 0.95);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_clips.size(); ++i) {
    auto feats = baseline.embed(test_clips[i]);
    if (probe.predict(feats.data(), layout.num_tokens()) == test_labels[i]) ++correct;
  }
  EXPECT_GT(double(correct) / double(test_clips.size()), 0.95);
}
