// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <iostream>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "flatmae/common.hpp"
#include "flatmae/prep.hpp"
#include "flatmae/rng.hpp"
#include "flatmae/shard.hpp"

namespace flatmae {

// Repeated sampling: every time a run is loaded, extract 4*N_t/clip_len
// random clip starts, uniform with replacement over valid offsets. Runs
// shorter than one clip contribute nothing.
inline std::vector<std::uint32_t> sample_run_clips(std::uint32_t run_length, CounterRng& rng,
                                                   std::uint32_t clip_len = 16) {
  std::vector<std::uint32_t> starts;
  if (run_length < clip_len) return starts;
  std::size_t count = std::size_t(4) * run_length / clip_len;
  std::uint32_t max_start = run_length - clip_len;
  starts.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    starts.push_back(static_cast<std::uint32_t>(rng.next_below(std::uint64_t(max_start) + 1)));
  return starts;
}

// Fixed-capacity shuffle buffer: push appends, draw removes a uniformly
// random element (swap-remove, so draws are O(1)).
template <typename Item>
class ShuffleBuffer {
 public:
  explicit ShuffleBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("shuffle buffer capacity must be >= 1");
  }

  bool full() const { return items_.size() >= capacity_; }
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }

  void push(Item item) {
    if (full()) throw Error("shuffle buffer overflow");
    items_.push_back(std::move(item));
  }

  Item draw(CounterRng& rng) {
    if (items_.empty()) throw Error("shuffle buffer underflow");
    std::size_t i = static_cast<std::size_t>(rng.next_below(items_.size()));
    std::swap(items_[i], items_.back());
    Item out = std::move(items_.back());
    items_.pop_back();
    return out;
  }

 private:
  std::size_t capacity_;
  std::vector<Item> items_;
};

// Effective epochs: frames seen during training over training-set frames.
inline double effective_epochs(double frames_seen, double train_set_frames) {
  if (!(train_set_frames > 0.0)) throw ConfigError("training set frame count must be > 0");
  return frames_seen / train_set_frames;
}

struct LoaderConfig {
  std::vector<std::string> shard_paths;
  std::size_t buffer_capacity = 2048;
  std::size_t batch_size = 32;
  std::uint32_t clip_len = 16;
  unsigned workers = 1;  // >1 enables a background producer thread
  std::uint64_t seed = 0;
  bool verbose = true;
};

struct LoaderStats {
  std::atomic<std::uint64_t> shards_read{0};
  std::atomic<std::uint64_t> shards_skipped{0};
  std::atomic<std::uint64_t> clips_produced{0};
  std::atomic<std::uint64_t> batches_yielded{0};
  std::atomic<std::uint64_t> frames_yielded{0};
};

// Streaming clip loader. Shard order reshuffles every pass; each loaded
// shard contributes repeated-sampling clips into the shuffle buffer, and
// batches draw uniformly from it. With workers == 1 the stream of batches
// is a pure function of (shard list, seed).
class Loader {
 public:
  explicit Loader(LoaderConfig config) : cfg_(std::move(config)), draw_rng_(mix("draw")) {
    if (cfg_.shard_paths.empty()) throw ConfigError("loader needs at least one shard");
    if (cfg_.buffer_capacity < cfg_.batch_size)
      throw ConfigError("buffer capacity must be >= batch size");
    if (cfg_.workers < 1) cfg_.workers = 1;
    unsigned cap = max_threads();
    if (cfg_.workers > cap) cfg_.workers = cap;
    buffer_ = std::make_unique<ShuffleBuffer<FlatClip>>(cfg_.buffer_capacity);
    if (cfg_.workers > 1) start_producer_();
  }

  ~Loader() { stop_producer_(); }

  const LoaderStats& stats() const { return stats_; }
  const LoaderConfig& config() const { return cfg_; }

  // Next batch of clips. Throws when no shard can produce data.
  std::vector<FlatClip> next_batch() {
    std::vector<FlatClip> batch;
    batch.reserve(cfg_.batch_size);
    if (cfg_.workers > 1) {
      std::unique_lock lock(mu_);
      for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
        cv_consumer_.wait(lock, [&] { return buffer_->size() > 0 || producer_dead_; });
        if (buffer_->size() == 0 && producer_dead_)
          throw Error("loader: no shard produced any clips");
        batch.push_back(buffer_->draw(draw_rng_));
        cv_producer_.notify_all();
      }
    } else {
      for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
        while (!buffer_->full() && !stream_dead_) refill_once_();
        if (buffer_->size() == 0) throw Error("loader: no shard produced any clips");
        batch.push_back(buffer_->draw(draw_rng_));
      }
    }
    stats_.batches_yielded.fetch_add(1, std::memory_order_relaxed);
    std::uint64_t frames = 0;
    for (const auto& c : batch) frames += c.t;
    stats_.frames_yielded.fetch_add(frames, std::memory_order_relaxed);
    return batch;
  }

  // Deterministic resume support: discard the next n batches.
  void skip_batches(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) next_batch();
  }

 private:
  std::uint64_t mix(const char* tag) const {
    std::uint64_t h = 1469598103934665603ull;
    for (const char* p = tag; *p; ++p) h = (h ^ std::uint64_t(*p)) * 1099511628211ull;
    return CounterRng::mix_seed(cfg_.seed, h);
  }

  // Moves pending/freshly-loaded clips into the buffer. Marks the stream
  // dead once a full pass over the shard list yields nothing.
  void refill_once_() {
    if (pending_.empty()) {
      auto clips = load_next_shard_clips_();
      if (clips.empty()) {
        stream_dead_ = true;
        return;
      }
      for (auto& c : clips) pending_.push_back(std::move(c));
    }
    while (!pending_.empty() && !buffer_->full()) {
      buffer_->push(std::move(pending_.front()));
      pending_.pop_front();
    }
  }

  // Reads shards (reshuffled order per pass) until one yields clips or a
  // whole pass comes up empty.
  std::vector<FlatClip> load_next_shard_clips_() {
    for (std::size_t attempts = 0; attempts < cfg_.shard_paths.size(); ++attempts) {
      if (order_pos_ >= order_.size()) reshuffle_order_();
      const std::string& path = cfg_.shard_paths[order_[order_pos_++]];
      Shard shard;
      try {
        shard = Shard::load(path);
      } catch (const Error& e) {
        stats_.shards_skipped.fetch_add(1, std::memory_order_relaxed);
        if (cfg_.verbose)
          std::cerr << "loader: skipping shard " << path << ": " << e.what() << "\n";
        continue;
      }
      std::uint64_t n_read = stats_.shards_read.fetch_add(1, std::memory_order_relaxed) + 1;
      CounterRng srng(CounterRng::mix_seed(mix("clips"), n_read));
      auto starts = sample_run_clips(shard.t, srng, cfg_.clip_len);
      if (starts.empty()) {
        if (cfg_.verbose)
          std::cerr << "loader: run shorter than clip length, skipping " << path << "\n";
        continue;
      }
      auto clips = extract_clips(shard.frames, shard.t, shard.height, shard.width, starts,
                                 cfg_.clip_len, shard.tr);
      stats_.clips_produced.fetch_add(clips.size(), std::memory_order_relaxed);
      return clips;
    }
    return {};
  }

  void reshuffle_order_() {
    if (order_.empty()) {
      order_.resize(cfg_.shard_paths.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    }
    ++pass_;
    CounterRng rng(CounterRng::mix_seed(mix("order"), pass_));
    for (std::size_t i = order_.size(); i > 1; --i)
      std::swap(order_[i - 1], order_[rng.next_below(i)]);
    order_pos_ = 0;
  }

  void start_producer_() {
    producer_running_ = true;
    producer_ = std::thread([this] {
      try {
        while (producer_running_) {
          auto clips = load_next_shard_clips_();
          if (clips.empty()) break;
          std::unique_lock lock(mu_);
          for (auto& c : clips) {
            cv_producer_.wait(lock, [&] { return !buffer_->full() || !producer_running_; });
            if (!producer_running_) return;
            buffer_->push(std::move(c));
            cv_consumer_.notify_one();
          }
        }
      } catch (...) {
      }
      std::lock_guard lock(mu_);
      producer_dead_ = true;
      cv_consumer_.notify_all();
    });
  }

  void stop_producer_() {
    if (producer_.joinable()) {
      {
        std::lock_guard lock(mu_);
        producer_running_ = false;
        cv_producer_.notify_all();
      }
      producer_.join();
    }
  }

  LoaderConfig cfg_;
  std::unique_ptr<ShuffleBuffer<FlatClip>> buffer_;
  std::deque<FlatClip> pending_;
  std::vector<std::size_t> order_;
  std::size_t order_pos_ = 0;
  std::uint64_t pass_ = 0;
  bool stream_dead_ = false;
  CounterRng draw_rng_;
  LoaderStats stats_;

  std::mutex mu_;
  std::condition_variable cv_consumer_, cv_producer_;
  std::thread producer_;
  std::atomic<bool> producer_running_{false};
  bool producer_dead_ = false;
};

}  // namespace flatmae
