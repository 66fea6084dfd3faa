// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface for the flat-map masked-autoencoder pipeline.
// Every command resolves its configuration (JSON file + flag overrides),
// echoes it next to its outputs, and exits nonzero on any error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flatmae/checkpoint.hpp"
#include "flatmae/evalprobe.hpp"
#include "flatmae/flatgeo.hpp"
#include "flatmae/loader.hpp"
#include "flatmae/mae.hpp"
#include "flatmae/prep.hpp"
#include "flatmae/render.hpp"
#include "flatmae/scalefit.hpp"
#include "flatmae/shard.hpp"
#include "flatmae/synth.hpp"
#include "flatmae/token.hpp"
#include "flatmae/train.hpp"

namespace fm = flatmae;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// JSON config file whose keys prefill any flag not given on the command
// line (flags win).
struct JsonDefaults {
  json data;

  static JsonDefaults load(const std::string& path) {
    JsonDefaults d;
    if (path.empty()) return d;
    std::ifstream in(path);
    if (!in) throw fm::ConfigError("cannot open config file: " + path);
    try {
      in >> d.data;
    } catch (const json::exception& e) {
      throw fm::ConfigError("bad JSON config: " + std::string(e.what()));
    }
    return d;
  }

  template <typename T>
  void apply(const CLI::App& app, const std::string& flag, T& var) const {
    if (data.is_null() || !data.contains(flag)) return;
    const CLI::Option* opt = app.get_option("--" + flag);
    if (opt && opt->count() > 0) return;  // flag override wins
    var = data.at(flag).get<T>();
  }
};

void write_echo(const json& j, const fs::path& out_dir, const std::string& name = "config.json") {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / name);
  out << j.dump(2) << "\n";
}

std::vector<std::string> list_shards(const std::string& dir) {
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".fmshrd") paths.push_back(entry.path().string());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw fm::ConfigError("no .fmshrd files in " + dir);
  return paths;
}

// Pixel pitch that makes the grid span the valid-vertex bounding box.
double auto_pixel_mm(const fm::FlatMesh& mesh, std::uint32_t height, std::uint32_t width) {
  double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
  for (std::size_t i = 0; i < mesh.vertex_count(); ++i) {
    if (!mesh.valid_vertex[i]) continue;
    min_x = std::min(min_x, double(mesh.vertex_xyz[i][0]));
    max_x = std::max(max_x, double(mesh.vertex_xyz[i][0]));
    min_y = std::min(min_y, double(mesh.vertex_xyz[i][1]));
    max_y = std::max(max_y, double(mesh.vertex_xyz[i][1]));
  }
  return 1.001 * std::max((max_x - min_x) / width, (max_y - min_y) / height);
}

std::string hash_hex(const std::array<std::uint8_t, 32>& h) { return fm::hex(h.data(), h.size()); }

fm::MaeConfig model_config_from_json(const json& j) {
  fm::MaeConfig mc;
  const json& m = j.at("model");
  mc.enc_dim = m.at("enc_dim");
  mc.enc_depth = m.at("enc_depth");
  mc.enc_heads = m.at("enc_heads");
  mc.dec_dim = m.at("dec_dim");
  mc.dec_depth = m.at("dec_depth");
  mc.dec_heads = m.at("dec_heads");
  mc.p_t = m.at("p_t");
  mc.p = m.at("p");
  mc.mlp_ratio = m.at("mlp_ratio");
  mc.norm_pix_per_patch = m.at("norm_pix_per_patch");
  return mc;
}

// ---- build-grid ----

int cmd_build_grid(const std::string& config_path, std::string mesh_path, std::string out_path,
                   std::uint32_t height, std::uint32_t width, double pixel_mm,
                   const CLI::App& app) {
  auto defaults = JsonDefaults::load(config_path);
  defaults.apply(app, "mesh", mesh_path);
  defaults.apply(app, "out", out_path);
  defaults.apply(app, "height", height);
  defaults.apply(app, "width", width);
  defaults.apply(app, "pixel-mm", pixel_mm);

  auto mesh = fm::load_mesh(mesh_path);
  std::cout << "mesh: " << mesh.vertex_count() << " vertices (" << mesh.valid_count()
            << " valid), " << mesh.triangle_count() << " triangles\n";
  if (pixel_mm <= 0.0) pixel_mm = auto_pixel_mm(mesh, height, width);
  auto grid = fm::build_grid(mesh, height, width, pixel_mm);
  grid.save(out_path);
  std::cout << "grid: " << grid.height << "x" << grid.width << " @ " << grid.pixel_mm << "mm, "
            << grid.valid_count() << " valid pixels ("
            << 100.0 * (1.0 - double(grid.valid_count()) / double(grid.pixel_count()))
            << "% background)\n";
  std::cout << "hash: " << hash_hex(grid.content_hash()) << "\n";

  json echo = {{"command", "build-grid"}, {"mesh", mesh_path},  {"out", out_path},
               {"height", height},        {"width", width},     {"pixel_mm", pixel_mm},
               {"valid_pixels", grid.valid_count()},
               {"grid_hash", hash_hex(grid.content_hash())}};
  fs::path parent = fs::path(out_path).parent_path();
  write_echo(echo, parent.empty() ? fs::path(".") : parent,
             fs::path(out_path).stem().string() + ".config.json");
  return 0;
}

// ---- make-synth ----

int cmd_make_synth(const std::string& config_path, std::string out_dir, std::uint64_t vertices,
                   std::uint32_t classes, std::uint32_t components, std::uint32_t runs_per_class,
                   std::uint32_t frames, double snr, double tr, std::uint64_t seed,
                   std::uint32_t height, std::uint32_t width, const CLI::App& app) {
  auto defaults = JsonDefaults::load(config_path);
  defaults.apply(app, "out", out_dir);
  defaults.apply(app, "vertices", vertices);
  defaults.apply(app, "classes", classes);
  defaults.apply(app, "components", components);
  defaults.apply(app, "runs-per-class", runs_per_class);
  defaults.apply(app, "frames", frames);
  defaults.apply(app, "snr", snr);
  defaults.apply(app, "tr", tr);
  defaults.apply(app, "seed", seed);
  defaults.apply(app, "height", height);
  defaults.apply(app, "width", width);

  fs::create_directories(fs::path(out_dir) / "runs");
  fs::create_directories(fs::path(out_dir) / "shards");

  auto mesh = fm::make_synth_mesh(vertices, seed);
  fm::save_mesh(mesh, (fs::path(out_dir) / "mesh.fmesh").string());
  double pixel_mm = auto_pixel_mm(mesh, height, width);
  auto grid = fm::build_grid(mesh, height, width, pixel_mm);
  grid.save((fs::path(out_dir) / "grid.fgrid").string());
  std::cout << "mesh: " << mesh.valid_count() << "/" << mesh.vertex_count()
            << " valid vertices; grid: " << grid.valid_count() << " valid pixels\n";

  fm::SynthSpec spec;
  spec.mesh_vertices = static_cast<std::uint32_t>(vertices);
  spec.components = components;
  spec.classes = classes;
  spec.run_length = frames;
  spec.snr = snr;
  spec.tr = tr;
  spec.seed = seed;

  std::vector<fm::LabelRow> labels;
  std::uint64_t total_frames = 0;
  for (std::uint32_t c = 0; c < classes; ++c) {
    for (std::uint32_t r = 0; r < runs_per_class; ++r) {
      auto sr = fm::make_run(mesh, spec, c, std::uint64_t(c) * 100000 + r);
      sr.run.subject_id = "synth" + std::to_string(c) + "_" + std::to_string(r);
      sr.run.run_id = "r" + std::to_string(r);
      std::string base = "cls" + std::to_string(c) + "_run" + std::to_string(r);
      auto run_path = (fs::path(out_dir) / "runs" / (base + ".fmrun")).string();
      fm::save_run(sr.run, run_path);
      // shards derive from the saved (f32) run so `resample` reproduces them
      auto shard = fm::run_to_shard(fm::load_run(run_path), grid);
      shard.save((fs::path(out_dir) / "shards" / (base + ".fmshrd")).string());
      labels.push_back({sr.run.subject_id, sr.run.run_id, c});
      total_frames += shard.t;
    }
  }
  fm::save_labels(labels, (fs::path(out_dir) / "labels.csv").string());
  std::cout << "wrote " << labels.size() << " runs, " << total_frames << " shard frames\n";

  json echo = {{"command", "make-synth"},
               {"out", out_dir},
               {"vertices", vertices},
               {"classes", classes},
               {"components", components},
               {"runs_per_class", runs_per_class},
               {"frames", frames},
               {"snr", snr},
               {"tr", tr},
               {"seed", seed},
               {"height", height},
               {"width", width},
               {"pixel_mm", pixel_mm},
               {"rng", fm::CounterRng::kName},
               {"grid_hash", hash_hex(grid.content_hash())},
               {"total_shard_frames", total_frames}};
  write_echo(echo, out_dir);
  return 0;
}

// ---- resample ----

int cmd_resample(const std::string& config_path, std::string grid_path, std::string out_dir,
                 std::vector<std::string> run_paths, const CLI::App& app) {
  auto defaults = JsonDefaults::load(config_path);
  defaults.apply(app, "grid", grid_path);
  defaults.apply(app, "out", out_dir);

  auto grid = fm::ResampleGrid::load(grid_path);
  fs::create_directories(out_dir);
  std::size_t written = 0;
  for (const auto& path : run_paths) {
    auto run = fm::load_run(path);
    auto shard = fm::run_to_shard(run, grid);
    auto out = fs::path(out_dir) / (fs::path(path).stem().string() + ".fmshrd");
    shard.save(out.string());
    std::cout << path << " -> " << out.string() << " (" << shard.t << " frames)\n";
    ++written;
  }
  json echo = {{"command", "resample"},
               {"grid", grid_path},
               {"out", out_dir},
               {"runs", run_paths},
               {"grid_hash", hash_hex(grid.content_hash())},
               {"shards_written", written}};
  write_echo(echo, out_dir, "resample.config.json");
  return 0;
}

// ---- pretrain ----

struct PretrainFlags {
  std::string shards_dir, grid_path, out_dir, resume_path;
  fm::PretrainConfig cfg;
  std::size_t buffer_capacity = 2048;
  unsigned workers = 1;
  std::uint64_t checkpoint_every = 0;  // 0 -> only at the end
  std::uint32_t clip_len = 16;
};

int cmd_pretrain(PretrainFlags f) {
  auto grid = fm::ResampleGrid::load(f.grid_path);
  auto grid_hash = grid.content_hash();
  auto shard_paths = list_shards(f.shards_dir);
  std::uint64_t dataset_frames = 0;
  for (const auto& p : shard_paths) {
    auto header = fm::Shard::load_header(p);
    if (header.grid_hash != grid_hash)
      throw fm::ConfigError("shard " + p + " was built with a different grid");
    if (header.height != grid.height || header.width != grid.width)
      throw fm::ConfigError("shard " + p + " dims do not match grid");
    dataset_frames += header.t;
  }

  auto layout = fm::build_layout(grid, f.cfg.model.p_t, f.cfg.model.p, f.clip_len);
  std::cout << "layout: " << layout.num_spatial() << " nonempty spatial patches, "
            << layout.num_tokens() << " tokens per clip\n";

  fm::MaeModel<float> model(f.cfg.model, layout);
  fm::AdamW<float> opt;
  std::uint64_t start_step = 0;
  if (!f.resume_path.empty()) {
    auto ckpt = fm::Checkpoint::load(f.resume_path);
    if (ckpt.config.value("grid_hash", "") != hash_hex(grid_hash))
      throw fm::ConfigError("checkpoint was trained on a different grid");
    fm::restore_checkpoint(ckpt, model, &opt);
    start_step = opt.step;
    std::cout << "resumed from " << f.resume_path << " at step " << start_step << "\n";
  } else {
    model.init(f.cfg.seed);
  }

  auto counts = model.param_counts();
  std::cout << "params: encoder " << counts.encoder << ", decoder " << counts.decoder
            << ", total " << counts.total << "\n";

  fm::LoaderConfig lc;
  lc.shard_paths = shard_paths;
  lc.buffer_capacity = f.buffer_capacity;
  lc.batch_size = f.cfg.batch_size;
  lc.clip_len = f.clip_len;
  lc.workers = f.workers;
  lc.seed = f.cfg.seed;
  fm::Loader loader(lc);
  if (start_step > 0) loader.skip_batches(start_step);

  fs::create_directories(f.out_dir);
  json echo = f.cfg.echo(layout, hash_hex(grid_hash));
  echo["command"] = "pretrain";
  echo["shards"] = f.shards_dir;
  echo["grid"] = f.grid_path;
  echo["out"] = f.out_dir;
  echo["buffer_capacity"] = f.buffer_capacity;
  echo["workers"] = f.workers;
  echo["dataset_frames"] = dataset_frames;
  echo["params_total"] = counts.total;
  echo["params_encoder"] = counts.encoder;
  write_echo(echo, f.out_dir);

  std::ofstream trace(fs::path(f.out_dir) / "loss_trace.csv",
                      start_step ? std::ios::app : std::ios::trunc);
  if (start_step == 0) trace << "step,loss,lr\n";

  auto ckpt_path = (fs::path(f.out_dir) / "checkpoint.fmckpt").string();
  auto save_ckpt = [&] { fm::make_checkpoint(model, opt, echo).save(ckpt_path); };

  auto source = [&](std::uint64_t) { return loader.next_batch(); };
  auto on_step = [&](std::uint64_t step, const fm::StepResult& sr) {
    trace << step << "," << sr.loss << "," << sr.lr << "\n";
    if ((step + 1) % 50 == 0 || step + 1 == f.cfg.steps)
      std::cout << "step " << (step + 1) << "/" << f.cfg.steps << " loss " << sr.loss << " lr "
                << sr.lr << "\n";
    if (f.checkpoint_every && (step + 1) % f.checkpoint_every == 0) save_ckpt();
  };
  fm::pretrain(model, opt, layout, source, f.cfg, start_step, on_step);
  save_ckpt();
  trace.flush();

  double frames_seen = double(loader.stats().frames_yielded.load());
  std::cout << "frames seen: " << frames_seen << " (" << std::fixed << std::setprecision(1)
            << fm::effective_epochs(frames_seen, double(dataset_frames))
            << " effective epochs over " << dataset_frames << " frames)\n";
  std::cout << "checkpoint: " << ckpt_path << "\n";
  return 0;
}

// ---- probe ----

struct ProbeFlags {
  std::string checkpoint_path, grid_path, shards_dir, labels_path, out_dir;
  std::string mode = "mae";  // mae | patch-embed | connectome
  std::uint32_t parcels = 20;
  std::uint32_t query_dim = 64;
  std::uint32_t heads = 1;
  std::uint32_t epochs = 20;
  std::uint32_t batch = 128;
  double train_frac = 0.6, val_frac = 0.2;
  std::vector<double> lr_scales, weight_decays;
  std::uint64_t seed = 0;
};

int cmd_probe(ProbeFlags f) {
  auto grid = fm::ResampleGrid::load(f.grid_path);
  auto grid_hash = hash_hex(grid.content_hash());
  auto ckpt = fm::Checkpoint::load(f.checkpoint_path);
  if (ckpt.config.value("grid_hash", "") != grid_hash)
    throw fm::ConfigError("checkpoint grid hash does not match the given grid");
  auto mc = model_config_from_json(ckpt.config);
  std::uint32_t clip_len = ckpt.config.value("clip_len", 16u);
  auto layout = fm::build_layout(grid, mc.p_t, mc.p, clip_len);
  fm::MaeModel<float> model(mc, layout);
  fm::restore_checkpoint(ckpt, model);
  auto params_before = model.params().flat;

  // label lookup by (subject, run)
  auto label_rows = fm::load_labels(f.labels_path);
  std::map<std::pair<std::string, std::string>, std::uint32_t> label_of;
  std::uint32_t n_classes = 0;
  for (const auto& row : label_rows) {
    label_of[{row.subject_id, row.run_id}] = row.class_id;
    n_classes = std::max(n_classes, row.class_id + 1);
  }
  if (n_classes < 2) throw fm::ConfigError("labels define fewer than 2 classes");

  fm::ProbeConfig pc;
  pc.query_dim = f.query_dim;
  pc.heads = f.heads;
  pc.classes = n_classes;
  pc.epochs = f.epochs;
  pc.batch = f.batch;
  if (!f.lr_scales.empty()) pc.lr_scales = f.lr_scales;
  if (!f.weight_decays.empty()) pc.weight_decays = f.weight_decays;

  // Run-level splits so clips from one run never straddle splits: labeled
  // runs are shuffled deterministically, then cut by fraction quotas with
  // every split guaranteed at least one run.
  auto shard_paths = list_shards(f.shards_dir);
  std::vector<std::string> labeled_paths;
  for (const auto& path : shard_paths) {
    auto header = fm::Shard::load_header(path);
    if (hash_hex(header.grid_hash) != grid_hash)
      throw fm::ConfigError("shard " + path + " was built with a different grid");
    if (label_of.count({header.subject_id, header.run_id})) {
      labeled_paths.push_back(path);
    } else {
      std::cerr << "probe: no label for " << header.subject_id << "/" << header.run_id
                << ", skipping\n";
    }
  }
  if (labeled_paths.size() < 3)
    throw fm::ConfigError("need at least 3 labeled runs for train/val/test splits");
  {
    fm::CounterRng rng(fm::CounterRng::mix_seed(f.seed, 0x73706c69));
    for (std::size_t i = labeled_paths.size(); i > 1; --i)
      std::swap(labeled_paths[i - 1], labeled_paths[rng.next_below(i)]);
  }
  std::size_t n_runs = labeled_paths.size();
  std::size_t n_train = std::clamp<std::size_t>(
      std::size_t(f.train_frac * double(n_runs) + 0.5), 1, n_runs - 2);
  std::size_t n_val = std::clamp<std::size_t>(
      std::size_t(f.val_frac * double(n_runs) + 0.5), 1, n_runs - n_train - 1);

  struct Sample {
    fm::FlatClip clip;
    std::uint32_t label;
    int split;  // 0 train, 1 val, 2 test
  };
  std::vector<Sample> samples;
  for (std::size_t idx = 0; idx < labeled_paths.size(); ++idx) {
    auto shard = fm::Shard::load(labeled_paths[idx]);
    std::uint32_t label = label_of.at({shard.subject_id, shard.run_id});
    int split = idx < n_train ? 0 : (idx < n_train + n_val ? 1 : 2);
    std::vector<std::uint32_t> starts;
    for (std::uint32_t s = 0; s + clip_len <= shard.t; s += clip_len) starts.push_back(s);
    for (auto clip : fm::extract_clips(shard.frames, shard.t, shard.height, shard.width, starts,
                                       clip_len, shard.tr))
      samples.push_back({std::move(clip), label, split});
  }
  if (samples.empty()) throw fm::ConfigError("no labeled samples found");

  if (f.mode == "patch-embed") {
    // embedding trains jointly with the probe over the same sweep grids
    std::vector<fm::PatchTensor<float>> train_clips;
    std::vector<std::uint32_t> train_labels;
    std::vector<std::pair<fm::PatchTensor<float>, std::uint32_t>> val_set, test_set;
    for (auto& s : samples) {
      auto tokens = fm::patchify<float>(s.clip, layout);
      if (s.split == 0) {
        train_clips.push_back(std::move(tokens));
        train_labels.push_back(s.label);
      } else if (s.split == 1) {
        val_set.emplace_back(std::move(tokens), s.label);
      } else {
        test_set.emplace_back(std::move(tokens), s.label);
      }
    }
    if (train_clips.empty() || val_set.empty() || test_set.empty())
      throw fm::ConfigError("splits must all be non-empty");
    fs::create_directories(f.out_dir);
    std::ofstream csv(fs::path(f.out_dir) / "results.csv");
    csv << "lr_scale,weight_decay,val_accuracy,test_accuracy\n";
    double best_val = -1.0, best_scale = 0, best_wd = 0;
    std::vector<float> best_base, best_probe;
    for (double scale : pc.lr_scales)
      for (double wd : pc.weight_decays) {
        fm::PatchEmbedBaseline<float> b(layout, f.query_dim);
        b.init(fm::CounterRng::mix_seed(f.seed, 0x656d6264));
        fm::AttentiveProbe<float> probe(f.query_dim, pc);
        probe.init(fm::CounterRng::mix_seed(f.seed, 0x70726f62));
        fm::train_patch_embed_probe(
            b, probe, train_clips, train_labels, pc, scale, wd,
            fm::CounterRng::mix_seed(f.seed, std::uint64_t(scale * 1000),
                                     std::uint64_t(wd * 100000)));
        std::size_t correct = 0;
        for (auto& [tokens, label] : val_set) {
          auto feats = b.embed(tokens);
          if (probe.predict(feats.data(), layout.num_tokens()) == label) ++correct;
        }
        double val_acc = double(correct) / double(val_set.size());
        csv << scale << "," << wd << "," << val_acc << ",\n";
        if (val_acc > best_val) {
          best_val = val_acc;
          best_scale = scale;
          best_wd = wd;
          best_base = b.params().flat;
          best_probe = probe.params().flat;
        }
      }
    fm::PatchEmbedBaseline<float> bb(layout, f.query_dim);
    bb.params().flat = best_base;
    fm::AttentiveProbe<float> bp(f.query_dim, pc);
    bp.params().flat = best_probe;
    std::size_t correct = 0;
    for (auto& [tokens, label] : test_set) {
      auto feats = bb.embed(tokens);
      if (bp.predict(feats.data(), layout.num_tokens()) == label) ++correct;
    }
    double test_acc = double(correct) / double(test_set.size());
    csv << best_scale << "," << best_wd << "," << best_val << "," << test_acc << "\n";
    std::cout << "patch-embed best: lr_scale " << best_scale << " wd " << best_wd << " val "
              << best_val << " test " << test_acc << "\n";
    json echo = {{"command", "probe"},
                 {"mode", f.mode},
                 {"checkpoint", f.checkpoint_path},
                 {"grid", f.grid_path},
                 {"best_lr_scale", best_scale},
                 {"best_weight_decay", best_wd},
                 {"val_accuracy", best_val},
                 {"test_accuracy", test_acc},
                 {"seed", f.seed}};
    write_echo(echo, f.out_dir);
    return 0;
  }

  // feature-based modes share the sweep machinery
  fm::FeatureDataset splits[3];
  if (f.mode == "mae") {
    for (auto& d : splits) {
      d.n_tokens = layout.num_tokens();
      d.feat_dim = mc.enc_dim;
    }
    for (auto& s : samples) {
      auto tokens = fm::patchify<float>(s.clip, layout);
      splits[s.split].features.push_back(model.encode_full(tokens));
      splits[s.split].labels.push_back(s.label);
    }
  } else if (f.mode == "connectome") {
    auto parcels = fm::make_tiled_parcels(grid, f.parcels);
    for (auto& d : splits) {
      d.n_tokens = 1;
      d.feat_dim = std::size_t(f.parcels) * (f.parcels - 1) / 2;
    }
    for (auto& s : samples) {
      splits[s.split].features.push_back(fm::connectome_features(s.clip, parcels));
      splits[s.split].labels.push_back(s.label);
    }
  } else {
    throw fm::ConfigError("unknown probe mode: " + f.mode);
  }

  for (int s = 0; s < 3; ++s)
    if (splits[s].size() == 0)
      throw fm::ConfigError("split " + std::to_string(s) +
                            " is empty; adjust --train-frac/--val-frac or add runs");

  auto result = fm::run_sweep(splits[0], splits[1], splits[2], pc, f.seed);

  if (model.params().flat != params_before)
    throw fm::Error("encoder parameters changed during probe training");
  std::cout << "encoder frozen: parameters bit-identical through probe training\n";

  fs::create_directories(f.out_dir);
  std::ofstream csv(fs::path(f.out_dir) / "results.csv");
  csv << "lr_scale,weight_decay,val_accuracy,test_accuracy\n";
  for (std::size_t i = 0; i < result.points.size(); ++i) {
    const auto& p = result.points[i];
    csv << p.lr_scale << "," << p.weight_decay << "," << p.val_accuracy << ",";
    if (i == result.best_index) csv << result.test_accuracy;
    csv << "\n";
  }
  std::cout << "sweep: " << result.points.size() << " configs; best val "
            << result.best_val_accuracy << " (lr_scale "
            << result.points[result.best_index].lr_scale << ", wd "
            << result.points[result.best_index].weight_decay << "); test "
            << result.test_accuracy << "\n";

  json echo = {{"command", "probe"},
               {"mode", f.mode},
               {"checkpoint", f.checkpoint_path},
               {"grid", f.grid_path},
               {"shards", f.shards_dir},
               {"labels", f.labels_path},
               {"classes", n_classes},
               {"query_dim", f.query_dim},
               {"heads", f.heads},
               {"epochs", pc.epochs},
               {"batch", pc.batch},
               {"base_lr", pc.base_lr},
               {"lr_scales", pc.lr_scales},
               {"weight_decays", pc.weight_decays},
               {"configs", result.points.size()},
               {"best_lr_scale", result.points[result.best_index].lr_scale},
               {"best_weight_decay", result.points[result.best_index].weight_decay},
               {"val_accuracy", result.best_val_accuracy},
               {"test_accuracy", result.test_accuracy},
               {"train_samples", splits[0].size()},
               {"val_samples", splits[1].size()},
               {"test_samples", splits[2].size()},
               {"seed", f.seed}};
  write_echo(echo, f.out_dir);
  return 0;
}

// ---- fit-scaling ----

int cmd_fit_scaling(std::string csv_path, std::int64_t first_k, std::string out_path) {
  std::ifstream in(csv_path);
  if (!in) throw fm::ConfigError("cannot open: " + csv_path);
  // rows: size,epoch,test_loss (header optional); best epoch per size
  std::map<double, std::vector<double>> traces;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.rfind("size", 0) == 0) continue;
    std::istringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c))
      throw fm::FormatError("malformed row: " + line);
    double size = std::stod(a);
    std::size_t epoch = std::stoul(b);
    double loss = std::stod(c);
    auto& trace = traces[size];
    if (trace.size() <= epoch) trace.resize(epoch + 1, std::numeric_limits<double>::infinity());
    trace[epoch] = loss;
  }
  if (traces.size() < 2) throw fm::ConfigError("need >= 2 dataset sizes");

  std::vector<fm::ScalePoint> points;
  for (auto& [size, trace] : traces) {
    std::vector<double> clean;
    for (double v : trace)
      if (std::isfinite(v)) clean.push_back(v);
    points.push_back(fm::select_point(size, clean));
  }
  auto fit = fm::fit_power_law(points, first_k);

  json out;
  out["a"] = fit.a;
  out["b"] = fit.b;
  out["r2"] = fit.r2;
  out["first_k"] = first_k;
  out["points"] = json::array();
  for (const auto& p : points) {
    json jp = {{"n", p.n},
               {"loss", p.loss},
               {"epoch", p.epoch},
               {"predicted", fm::predict(fit, p.n)},
               {"relative_residual", fm::relative_residual(fit, p)}};
    out["points"].push_back(jp);
  }
  std::ofstream of(out_path);
  if (!of) throw fm::ConfigError("cannot write: " + out_path);
  of << out.dump(2) << "\n";
  std::cout << "fit: loss = " << fit.a << " * n^" << fit.b << " (r2 " << fit.r2 << ")\n";
  return 0;
}

// ---- render ----

int cmd_render(std::string ckpt_path, std::string grid_path, std::string shard_path,
               std::uint32_t sample, std::uint64_t seed, std::string out_path) {
  auto grid = fm::ResampleGrid::load(grid_path);
  auto grid_hash = hash_hex(grid.content_hash());
  auto ckpt = fm::Checkpoint::load(ckpt_path);
  if (ckpt.config.value("grid_hash", "") != grid_hash)
    throw fm::ConfigError("checkpoint grid hash does not match the given grid");
  auto shard = fm::Shard::load(shard_path);
  if (hash_hex(shard.grid_hash) != grid_hash)
    throw fm::ConfigError("shard grid hash does not match the given grid");

  auto mc = model_config_from_json(ckpt.config);
  std::uint32_t clip_len = ckpt.config.value("clip_len", 16u);
  auto layout = fm::build_layout(grid, mc.p_t, mc.p, clip_len);
  fm::MaeModel<float> model(mc, layout);
  fm::restore_checkpoint(ckpt, model);

  std::uint32_t start = sample * clip_len;
  if (start + clip_len > shard.t)
    throw fm::ConfigError("sample index beyond shard length (" + std::to_string(shard.t) +
                          " frames)");
  auto clips = fm::extract_clips(shard.frames, shard.t, shard.height, shard.width, {start},
                                 clip_len, shard.tr);
  auto tokens = fm::patchify<float>(clips[0], layout);
  double ratio = ckpt.config.value("mask_ratio", 0.9);
  std::int64_t override_nv = ckpt.config.value("num_visible_override", std::int64_t(-1));
  auto plan = fm::make_mask(layout, ratio, seed, override_nv);
  auto recon = model.reconstruct(tokens, plan);
  std::vector<float> target(clips[0].data.begin(), clips[0].data.end());
  auto img = fm::render_triptych(grid, layout, plan, target, recon, shard.tr);
  fm::save_png(img, out_path);
  std::cout << "wrote " << out_path << " (" << img.width << "x" << img.height << ")\n";
  return 0;
}

// ---- info ----

int cmd_info(const std::string& path) {
  auto r = fm::ByteReader::from_file(path);
  if (r.peek_magic("FMSHRD1", 8)) {
    auto s = fm::Shard::load_header(path);
    std::cout << "shard: " << s.t << "x" << s.height << "x" << s.width << " @ TR " << s.tr
              << "s\nsubject: " << s.subject_id << "\nrun: " << s.run_id
              << "\ngrid hash: " << hash_hex(s.grid_hash) << "\n";
  } else if (r.peek_magic("FMESH1", 7)) {
    auto m = fm::load_mesh(path);
    std::cout << "mesh: " << m.vertex_count() << " vertices (" << m.valid_count() << " valid), "
              << m.triangle_count() << " triangles\n";
  } else if (r.peek_magic("FGRID1", 7)) {
    auto g = fm::ResampleGrid::load(path);
    std::cout << "grid: " << g.height << "x" << g.width << " @ " << g.pixel_mm << "mm, "
              << g.valid_count() << " valid pixels\nhash: " << hash_hex(g.content_hash()) << "\n";
  } else if (r.peek_magic("FMRUN1", 7)) {
    auto run = fm::load_run(path);
    std::cout << "run: " << run.n_vertices << " vertices x " << run.n_timepoints
              << " timepoints @ TR " << run.tr << "s\nsubject: " << run.subject_id
              << "\nrun: " << run.run_id << "\n";
  } else if (r.peek_magic("FMCKPT1", 8)) {
    auto ckpt = fm::Checkpoint::load(path);
    std::size_t params = 0, enc = 0;
    for (const auto& t : ckpt.tensors)
      if (t.name.rfind("param/", 0) == 0) {
        params += t.data.size();
        if (t.name.rfind("param/enc/", 0) == 0) enc += t.data.size();
      }
    std::cout << "checkpoint: " << ckpt.tensors.size() << " tensors, " << params
              << " params (encoder " << enc << ", decoder " << (params - enc) << ")\n";
    fm::ByteWriter w;
    for (const auto& t : ckpt.tensors) {
      w.str(t.name);
      w.span(t.data.data(), t.data.size());
    }
    auto digest = fm::sha256(w.bytes().data(), w.bytes().size());
    std::cout << "tensor digest: " << fm::hex(digest.data(), digest.size()) << "\n";
    std::cout << "config: " << ckpt.config.dump(2) << "\n";
  } else {
    throw fm::FormatError("unrecognized file format: " + path);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flat-map fMRI masked-autoencoder pipeline"};
  app.require_subcommand(1);

  // build-grid
  auto* bg = app.add_subcommand("build-grid", "fit a pixel grid to a flat mesh");
  std::string bg_config, bg_mesh, bg_out;
  std::uint32_t bg_h = 32, bg_w = 64;
  double bg_mm = 0.0;
  bg->add_option("--config", bg_config, "JSON config file");
  bg->add_option("--mesh", bg_mesh, "FMESH1 input")->required();
  bg->add_option("--out", bg_out, "FGRID1 output")->required();
  bg->add_option("--height", bg_h, "grid rows");
  bg->add_option("--width", bg_w, "grid cols");
  bg->add_option("--pixel-mm", bg_mm, "pixel pitch (0 = auto-fit bbox)");

  // make-synth
  auto* ms = app.add_subcommand("make-synth", "generate a synthetic dataset");
  std::string ms_config, ms_out;
  std::uint64_t ms_vertices = 400, ms_seed = 0;
  std::uint32_t ms_classes = 2, ms_components = 4, ms_runs = 6, ms_frames = 64;
  std::uint32_t ms_h = 32, ms_w = 32;
  double ms_snr = 1.0, ms_tr = 1.0;
  ms->add_option("--config", ms_config, "JSON config file");
  ms->add_option("--out", ms_out, "output directory")->required();
  ms->add_option("--vertices", ms_vertices, "mesh vertex count");
  ms->add_option("--classes", ms_classes, "class count");
  ms->add_option("--components", ms_components, "latent components");
  ms->add_option("--runs-per-class", ms_runs, "runs per class");
  ms->add_option("--frames", ms_frames, "timepoints per run");
  ms->add_option("--snr", ms_snr, "signal-to-noise ratio");
  ms->add_option("--tr", ms_tr, "raw TR seconds");
  ms->add_option("--seed", ms_seed, "generator seed");
  ms->add_option("--height", ms_h, "grid rows");
  ms->add_option("--width", ms_w, "grid cols");

  // resample
  auto* rs = app.add_subcommand("resample", "preprocess raw runs into shards");
  std::string rs_config, rs_grid, rs_out;
  std::vector<std::string> rs_runs;
  rs->add_option("--config", rs_config, "JSON config file");
  rs->add_option("--grid", rs_grid, "FGRID1 grid")->required();
  rs->add_option("--out", rs_out, "output directory")->required();
  rs->add_option("runs", rs_runs, "FMRUN1 inputs")->required();

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "train the masked autoencoder");
  std::string pt_config;
  PretrainFlags pf;
  pt->add_option("--config", pt_config, "JSON config file");
  pt->add_option("--shards", pf.shards_dir, "shard directory")->required();
  pt->add_option("--grid", pf.grid_path, "FGRID1 grid")->required();
  pt->add_option("--out", pf.out_dir, "run directory")->required();
  pt->add_option("--resume", pf.resume_path, "checkpoint to resume from");
  pt->add_option("--steps", pf.cfg.steps, "optimization steps");
  pt->add_option("--warmup", pf.cfg.warmup, "warmup steps");
  pt->add_option("--schedule-total", pf.cfg.schedule_total, "cosine horizon (0 = steps)");
  pt->add_option("--batch", pf.cfg.batch_size, "batch size");
  pt->add_option("--base-lr", pf.cfg.base_lr, "base lr (peak = base*batch/256)");
  pt->add_option("--weight-decay", pf.cfg.weight_decay, "AdamW decoupled decay");
  pt->add_option("--ratio", pf.cfg.mask_ratio, "masking ratio");
  pt->add_option("--num-visible", pf.cfg.num_visible_override,
                 "override visible patch count (-1 = ratio rule)");
  pt->add_option("--seed", pf.cfg.seed, "training seed");
  pt->add_option("--replicas", pf.cfg.replicas, "data-parallel replicas");
  pt->add_option("--enc-dim", pf.cfg.model.enc_dim);
  pt->add_option("--enc-depth", pf.cfg.model.enc_depth);
  pt->add_option("--enc-heads", pf.cfg.model.enc_heads);
  pt->add_option("--dec-dim", pf.cfg.model.dec_dim);
  pt->add_option("--dec-depth", pf.cfg.model.dec_depth);
  pt->add_option("--dec-heads", pf.cfg.model.dec_heads);
  pt->add_option("--pt", pf.cfg.model.p_t, "temporal patch size");
  pt->add_option("--p", pf.cfg.model.p, "spatial patch size");
  pt->add_option("--mlp-ratio", pf.cfg.model.mlp_ratio);
  pt->add_flag("--norm-pix", pf.cfg.model.norm_pix_per_patch, "per-patch target norm");
  pt->add_option("--clip-len", pf.clip_len, "frames per clip");
  pt->add_option("--buffer-capacity", pf.buffer_capacity, "shuffle buffer clips");
  pt->add_option("--workers", pf.workers, "loader workers (1 = deterministic)");
  pt->add_option("--checkpoint-every", pf.checkpoint_every, "steps between checkpoints");

  // probe
  auto* pr = app.add_subcommand("probe", "frozen-encoder probe evaluation");
  std::string pr_config;
  ProbeFlags prf;
  pr->add_option("--config", pr_config, "JSON config file");
  pr->add_option("--checkpoint", prf.checkpoint_path, "FMCKPT1 checkpoint")->required();
  pr->add_option("--grid", prf.grid_path, "FGRID1 grid")->required();
  pr->add_option("--shards", prf.shards_dir, "shard directory")->required();
  pr->add_option("--labels", prf.labels_path, "labels.csv")->required();
  pr->add_option("--out", prf.out_dir, "output directory")->required();
  pr->add_option("--mode", prf.mode, "mae | patch-embed | connectome");
  pr->add_option("--parcels", prf.parcels, "parcel count (connectome mode)");
  pr->add_option("--query-dim", prf.query_dim, "probe query dimension");
  pr->add_option("--heads", prf.heads, "probe attention heads");
  pr->add_option("--epochs", prf.epochs);
  pr->add_option("--batch", prf.batch);
  pr->add_option("--train-frac", prf.train_frac);
  pr->add_option("--val-frac", prf.val_frac);
  pr->add_option("--lr-scales", prf.lr_scales, "sweep lr scales")->delimiter(',');
  pr->add_option("--weight-decays", prf.weight_decays, "sweep weight decays")->delimiter(',');
  pr->add_option("--seed", prf.seed);

  // fit-scaling
  auto* fsc = app.add_subcommand("fit-scaling", "fit a power-law scaling curve");
  std::string fs_csv, fs_out = "fit.json";
  std::int64_t fs_first_k = 0;
  fsc->add_option("csv", fs_csv, "CSV of size,epoch,test_loss")->required();
  fsc->add_option("--first-k", fs_first_k, "fit only the k smallest sizes");
  fsc->add_option("--out", fs_out, "output JSON");

  // render
  auto* rd = app.add_subcommand("render", "triptych PNG of masked/prediction/target");
  std::string rd_ckpt, rd_grid, rd_shard, rd_out;
  std::uint32_t rd_sample = 0;
  std::uint64_t rd_seed = 0;
  rd->add_option("--checkpoint", rd_ckpt)->required();
  rd->add_option("--grid", rd_grid)->required();
  rd->add_option("--shard", rd_shard)->required();
  rd->add_option("--sample", rd_sample, "clip index within the shard");
  rd->add_option("--seed", rd_seed, "mask plan seed");
  rd->add_option("--out", rd_out, "PNG path")->required();

  // info
  auto* inf = app.add_subcommand("info", "describe a pipeline file");
  std::string in_path;
  inf->add_option("file", in_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (bg->parsed()) return cmd_build_grid(bg_config, bg_mesh, bg_out, bg_h, bg_w, bg_mm, *bg);
    if (ms->parsed())
      return cmd_make_synth(ms_config, ms_out, ms_vertices, ms_classes, ms_components, ms_runs,
                            ms_frames, ms_snr, ms_tr, ms_seed, ms_h, ms_w, *ms);
    if (rs->parsed()) return cmd_resample(rs_config, rs_grid, rs_out, rs_runs, *rs);
    if (pt->parsed()) {
      auto defaults = JsonDefaults::load(pt_config);
      defaults.apply(*pt, "steps", pf.cfg.steps);
      defaults.apply(*pt, "warmup", pf.cfg.warmup);
      defaults.apply(*pt, "batch", pf.cfg.batch_size);
      defaults.apply(*pt, "base-lr", pf.cfg.base_lr);
      defaults.apply(*pt, "weight-decay", pf.cfg.weight_decay);
      defaults.apply(*pt, "ratio", pf.cfg.mask_ratio);
      defaults.apply(*pt, "seed", pf.cfg.seed);
      defaults.apply(*pt, "enc-dim", pf.cfg.model.enc_dim);
      defaults.apply(*pt, "enc-depth", pf.cfg.model.enc_depth);
      defaults.apply(*pt, "enc-heads", pf.cfg.model.enc_heads);
      defaults.apply(*pt, "dec-dim", pf.cfg.model.dec_dim);
      defaults.apply(*pt, "dec-depth", pf.cfg.model.dec_depth);
      defaults.apply(*pt, "dec-heads", pf.cfg.model.dec_heads);
      defaults.apply(*pt, "pt", pf.cfg.model.p_t);
      defaults.apply(*pt, "p", pf.cfg.model.p);
      defaults.apply(*pt, "clip-len", pf.clip_len);
      defaults.apply(*pt, "buffer-capacity", pf.buffer_capacity);
      defaults.apply(*pt, "workers", pf.workers);
      return cmd_pretrain(pf);
    }
    if (pr->parsed()) return cmd_probe(prf);
    if (fsc->parsed()) return cmd_fit_scaling(fs_csv, fs_first_k, fs_out);
    if (rd->parsed()) return cmd_render(rd_ckpt, rd_grid, rd_shard, rd_sample, rd_seed, rd_out);
    if (inf->parsed()) return cmd_info(in_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
