#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cst/adam.hpp"
#include "cst/checkpoint.hpp"
#include "cst/dataset.hpp"
#include "cst/metrics.hpp"
#include "cst/model.hpp"
#include "cst/objective.hpp"
#include "cst/rng.hpp"

namespace cst {

struct TrainConfig {
  std::string mode = "XE";                    // XE | WXE | RL
  std::string baseline = "none";              // none | scb_gt | scb_sampled | greedy
  std::string reward_metric = "cider";        // cider | bleu4 | rougeL
  std::string reward_mode = "leave_one_out";  // leave_one_out | include_self
  int epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-4;
  uint64_t seed = 0;
  int max_len = 20;
  int d = 512;
  double dropout = 0.0;
  bool wxe_weights_div10 = false;  // map reward weights into [0,1]
  double grad_clip = 0.0;          // global-norm cap, 0 disables
  int val_beam = 1;                // decode width for per-epoch validation
  std::string warm_start;          // checkpoint path, empty = fresh init
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.mode != "XE" && cfg.mode != "WXE" && cfg.mode != "RL")
    throw std::runtime_error("mode must be XE, WXE, or RL");
  if (cfg.baseline != "none" && cfg.baseline != "scb_gt" && cfg.baseline != "scb_sampled" &&
      cfg.baseline != "greedy")
    throw std::runtime_error("baseline must be none, scb_gt, scb_sampled, or greedy");
  if (cfg.mode == "WXE" && cfg.baseline != "none")
    throw std::runtime_error("WXE trains with zero baseline; set baseline=none");
  parse_metric(cfg.reward_metric);
  if (cfg.reward_mode != "leave_one_out" && cfg.reward_mode != "include_self")
    throw std::runtime_error("reward_mode must be leave_one_out or include_self");
  if (cfg.epochs < 0) throw std::runtime_error("epochs must be >= 0");
  if (cfg.batch_size < 1) throw std::runtime_error("batch_size must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw std::runtime_error("learning_rate must be > 0");
  if (cfg.max_len < 1) throw std::runtime_error("max_len must be >= 1");
  if (cfg.d < 1) throw std::runtime_error("d must be >= 1");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw std::runtime_error("dropout must be in [0, 1)");
  if (cfg.grad_clip < 0.0) throw std::runtime_error("grad_clip must be >= 0");
  if (cfg.val_beam < 1) throw std::runtime_error("val_beam must be >= 1");
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  for (const auto& [key, unused] : j.items()) {
    if (key != "mode" && key != "baseline" && key != "reward_metric" && key != "reward_mode" &&
        key != "epochs" && key != "batch_size" && key != "learning_rate" && key != "seed" &&
        key != "max_len" && key != "d" && key != "dropout" && key != "wxe_weights_div10" &&
        key != "grad_clip" && key != "val_beam" && key != "warm_start")
      throw std::runtime_error("unknown config key: " + key);
  }
  try {
    if (j.contains("mode")) cfg.mode = j.at("mode").get<std::string>();
    if (j.contains("baseline")) cfg.baseline = j.at("baseline").get<std::string>();
    if (j.contains("reward_metric")) cfg.reward_metric = j.at("reward_metric").get<std::string>();
    if (j.contains("reward_mode")) cfg.reward_mode = j.at("reward_mode").get<std::string>();
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
    if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    if (j.contains("max_len")) cfg.max_len = j.at("max_len").get<int>();
    if (j.contains("d")) cfg.d = j.at("d").get<int>();
    if (j.contains("dropout")) cfg.dropout = j.at("dropout").get<double>();
    if (j.contains("wxe_weights_div10")) cfg.wxe_weights_div10 = j.at("wxe_weights_div10").get<bool>();
    if (j.contains("grad_clip")) cfg.grad_clip = j.at("grad_clip").get<double>();
    if (j.contains("val_beam")) cfg.val_beam = j.at("val_beam").get<int>();
    if (j.contains("warm_start")) cfg.warm_start = j.at("warm_start").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("bad config value: ") + e.what());
  }
  return cfg;
}

inline nlohmann::json train_config_json(const TrainConfig& cfg) {
  return {{"mode", cfg.mode},
          {"baseline", cfg.baseline},
          {"reward_metric", cfg.reward_metric},
          {"reward_mode", cfg.reward_mode},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"seed", cfg.seed},
          {"max_len", cfg.max_len},
          {"d", cfg.d},
          {"dropout", cfg.dropout},
          {"wxe_weights_div10", cfg.wxe_weights_div10},
          {"grad_clip", cfg.grad_clip},
          {"val_beam", cfg.val_beam},
          {"warm_start", cfg.warm_start}};
}

struct EpochLog {
  int epoch = 0;
  std::string phase = "train";
  std::string mode;
  double mean_loss = 0.0;
  double mean_reward = 0.0;  // mean reward of the captions/samples consumed
  double val_score = std::numeric_limits<double>::quiet_NaN();
  long long metric_calls = 0;      // training-scorer invocations this epoch
  long long val_metric_calls = 0;  // validation-scorer invocations this epoch
  double wall_clock_s = 0.0;       // in-memory only; never serialized
};

struct TrainLog {
  std::vector<EpochLog> epochs;
};

// One epoch per line. Wall-clock stays out so reruns are byte-identical.
inline void save_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write train log: " + path);
  for (const auto& e : log.epochs) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"phase", e.phase},
                        {"mode", e.mode},
                        {"mean_loss", e.mean_loss},
                        {"mean_reward", e.mean_reward},
                        {"val_score", e.val_score},
                        {"metric_calls", e.metric_calls},
                        {"val_metric_calls", e.val_metric_calls}};
    out << j.dump() << "\n";
  }
}

// Scores every ground-truth caption against its item's other captions
// (or all of them in include_self mode) and stores the per-item mean as the
// consensus baseline. Single-caption items fall back to include_self, since
// leave-one-out would leave nothing to score against.
inline RewardTable precompute_rewards(const Dataset& dataset, Metric metric,
                                      const std::string& reward_mode = "leave_one_out") {
  if (dataset.items.empty()) throw std::runtime_error("empty dataset");
  if (reward_mode != "leave_one_out" && reward_mode != "include_self")
    throw std::runtime_error("reward_mode must be leave_one_out or include_self");
  const bool loo = reward_mode == "leave_one_out";

  DocFreq df;
  if (metric == Metric::kCider) df = build_doc_freq(reference_sets(dataset));

  RewardTable table;
  bool warned = false;
  for (const auto& item : dataset.items) {
    RewardTable::Entry entry;
    const size_t n = item.captions.size();
    for (size_t j = 0; j < n; ++j) {
      std::vector<TokenSequence> refs;
      if (loo && n > 1) {
        for (size_t k = 0; k < n; ++k)
          if (k != j) refs.push_back(item.captions[k]);
      } else {
        refs = item.captions;
        if (loo && !warned) {
          std::cerr << "note: item " << item.id
                    << " has a single caption; scoring it against itself\n";
          warned = true;
        }
      }
      double r = 0.0;
      switch (metric) {
        case Metric::kCider: r = cider_d(item.captions[j], refs, df); break;
        case Metric::kBleu4: r = bleu(item.captions[j], refs); break;
        case Metric::kRougeL: r = rouge_l(item.captions[j], refs); break;
      }
      entry.rewards.push_back(r);
    }
    entry.baseline = scb_baseline(entry.rewards);
    table.items[item.id] = entry;
  }
  return table;
}

struct TrainResult {
  ModelParams params;       // after the last epoch
  ModelParams best_params;  // best validation score; equals params without a val split
  int best_epoch = 0;       // 0 when no validation happened
  TrainLog log;
};

// Items tagged "train", or the whole dataset when nothing carries that tag
// (small fixtures often go untagged). A dataset holding only validation
// items is rejected.
inline Dataset training_split(const Dataset& dataset) {
  Dataset train = dataset.subset("train");
  if (train.items.empty()) {
    if (!dataset.subset("val").items.empty())
      throw std::runtime_error("dataset has no training items");
    train = dataset;
    train.split_tag = "train";
  }
  return train;
}

namespace detail_trainer {

constexpr uint64_t kInitTag = 0x696e6974;     // parameter init stream
constexpr uint64_t kShuffleTag = 0x73686566;  // epoch shuffles
constexpr uint64_t kSampleTag = 0x73616d70;   // per-slot sampling
constexpr uint64_t kDropTag = 0x64726f70;     // dropout masks

inline double grad_global_norm(const ParamGrads& g) {
  double sum = 0.0;
  for (const auto& [ptr, n] : tensor_spans(g))
    for (size_t k = 0; k < n; ++k) sum += ptr[k] * ptr[k];
  return std::sqrt(sum);
}

inline void scale_grads(ParamGrads& g, double s) {
  for (const auto& [ptr, n] : tensor_spans(g))
    for (size_t k = 0; k < n; ++k) ptr[k] *= s;
}

inline double validation_score(const ModelParams& params, const Dataset& val, const Scorer& scorer,
                               int beam, int max_len) {
  double sum = 0.0;
  for (const auto& item : val.items)
    sum += scorer.score(beam_search(params, item.features, beam, max_len), item.captions);
  return sum / static_cast<double>(val.items.size());
}

}  // namespace detail_trainer

// Full training loop: reward-weighted teacher forcing in XE/WXE mode,
// sampled-sequence policy gradients in RL mode, one sequence per reference
// slot, Adam updates once per batch. Deterministic in (config, dataset,
// vocab); sampling streams are derived per (epoch, item, slot), so batch
// composition never perturbs them.
inline TrainResult train(const TrainConfig& cfg, const Dataset& dataset, int vocab_size,
                         const RewardTable* precomputed = nullptr, int epoch_offset = 0,
                         const std::string& phase = "train",
                         const ModelParams* warm_params = nullptr) {
  validate(cfg);
  if (vocab_size < 3) throw std::runtime_error("vocab must include the reserved tokens");

  Dataset train_split = training_split(dataset);
  Dataset val_split = dataset.subset("val");
  for (const auto& item : train_split.items) {
    if (item.captions.empty()) throw std::runtime_error("item without captions: " + item.id);
    for (const auto& cap : item.captions)
      for (int id : cap)
        if (id < 0 || id >= vocab_size)
          throw std::runtime_error("caption token outside the vocabulary in item: " + item.id);
  }

  const Metric metric = parse_metric(cfg.reward_metric);
  ModelParams params;
  if (warm_params != nullptr) {
    params = *warm_params;
  } else if (!cfg.warm_start.empty()) {
    params = load_checkpoint(cfg.warm_start);
  } else {
    params = init_params(cfg.d, vocab_size, dataset.feature_dim,
                         derive_seed({cfg.seed, detail_trainer::kInitTag}));
  }
  if (params.V != vocab_size || params.D_f != dataset.feature_dim)
    throw std::runtime_error("warm-start checkpoint shape does not match the dataset");

  const bool needs_table =
      cfg.mode == "WXE" || (cfg.mode == "RL" && cfg.baseline == "scb_gt");
  RewardTable table;
  if (needs_table) {
    table = precomputed != nullptr ? *precomputed
                                   : precompute_rewards(train_split, metric, cfg.reward_mode);
    for (const auto& item : train_split.items) {
      const auto& entry = table.at(item.id);
      if (cfg.mode == "WXE" && entry.rewards.size() != item.captions.size())
        throw std::runtime_error("reward table does not match captions of item: " + item.id);
    }
  }

  Scorer train_scorer = make_scorer(metric, train_split);
  std::optional<Scorer> val_scorer;
  if (!val_split.items.empty()) val_scorer.emplace(make_scorer(metric, val_split));

  OptimizerState opt = init_adam(params);
  TrainResult result;
  result.best_epoch = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  bool warned_single = false;

  const size_t n_items = train_split.items.size();
  std::vector<size_t> order(n_items);
  for (size_t i = 0; i < n_items; ++i) order[i] = i;

  for (int e = 0; e < cfg.epochs; ++e) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const long long calls_before = train_scorer.calls();
    Rng shuffle_rng(derive_seed({cfg.seed, detail_trainer::kShuffleTag, static_cast<uint64_t>(e)}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    double reward_sum = 0.0;
    long long reward_count = 0;

    for (size_t batch_start = 0; batch_start < n_items;
         batch_start += static_cast<size_t>(cfg.batch_size)) {
      const size_t batch_end =
          std::min(n_items, batch_start + static_cast<size_t>(cfg.batch_size));
      ParamGrads batch_grads = zeros_like(params);

      for (size_t bi = batch_start; bi < batch_end; ++bi) {
        const size_t idx = order[bi];
        const DatasetItem& item = train_split.items[idx];
        const size_t n_caps = item.captions.size();

        std::vector<ForwardCache> caches;
        std::vector<TokenSequence> seqs;
        std::vector<double> rewards, baselines;
        caches.reserve(n_caps);
        seqs.reserve(n_caps);

        if (cfg.mode == "RL") {
          for (size_t s = 0; s < n_caps; ++s) {
            Rng srng(derive_seed({cfg.seed, detail_trainer::kSampleTag, static_cast<uint64_t>(e),
                                  static_cast<uint64_t>(idx), static_cast<uint64_t>(s)}));
            caches.push_back(sample_sequence(params, item.features, cfg.max_len, srng));
            seqs.push_back(caches.back().tokens);
            rewards.push_back(train_scorer.score(seqs.back(), item.captions));
          }
          if (cfg.baseline == "none") {
            baselines.assign(n_caps, 0.0);
          } else if (cfg.baseline == "scb_gt") {
            if (n_caps == 1) {
              // Degenerate consensus: a lone caption is its own baseline,
              // so the item cannot contribute a gradient.
              if (!warned_single) {
                std::cerr << "note: item " << item.id
                          << " has a single caption; its advantage is zero under scb_gt\n";
                warned_single = true;
              }
              baselines = rewards;
            } else {
              baselines.assign(n_caps, table.at(item.id).baseline);
            }
          } else if (cfg.baseline == "scb_sampled") {
            baselines.assign(n_caps, sampled_scb_baseline(rewards));
          } else {  // greedy
            for (size_t s = 0; s < n_caps; ++s)
              baselines.push_back(greedy_baseline(
                  params, item.features, cfg.max_len,
                  [&](const TokenSequence& seq) { return train_scorer.score(seq, item.captions); }));
          }
        } else {
          for (size_t j = 0; j < n_caps; ++j) {
            Rng drng(derive_seed({cfg.seed, detail_trainer::kDropTag, static_cast<uint64_t>(e),
                                  static_cast<uint64_t>(idx), static_cast<uint64_t>(j)}));
            caches.push_back(forward_teacher(params, item.features, item.captions[j], cfg.dropout,
                                             cfg.dropout > 0.0 ? &drng : nullptr));
            seqs.push_back(item.captions[j]);
            if (cfg.mode == "XE") {
              rewards.push_back(1.0);
            } else {
              double r = table.at(item.id).rewards[j];
              if (cfg.wxe_weights_div10) r /= 10.0;
              rewards.push_back(r);
            }
          }
          baselines.assign(n_caps, 0.0);
        }

        const VideoLoss loss = wxe_video_loss(caches, seqs, rewards, baselines);
        if (!std::isfinite(loss.value))
          throw std::runtime_error("non-finite loss at epoch " +
                                   std::to_string(epoch_offset + e + 1) + ", item " + item.id);
        loss_sum += loss.value;
        for (double r : rewards) reward_sum += r;
        reward_count += static_cast<long long>(n_caps);

        ParamGrads item_grads = zeros_like(params);
        for (size_t j = 0; j < n_caps; ++j)
          add_scaled(item_grads, backward(params, caches[j], loss.logit_grads[j]), 1.0);
        if (!all_finite(item_grads))
          throw std::runtime_error("non-finite gradient at epoch " +
                                   std::to_string(epoch_offset + e + 1) + ", item " + item.id);
        add_scaled(batch_grads, item_grads, 1.0);
      }

      detail_trainer::scale_grads(batch_grads, 1.0 / static_cast<double>(batch_end - batch_start));
      if (cfg.grad_clip > 0.0) {
        const double norm = detail_trainer::grad_global_norm(batch_grads);
        if (norm > cfg.grad_clip) detail_trainer::scale_grads(batch_grads, cfg.grad_clip / norm);
      }
      adam_step(params, batch_grads, opt, cfg.learning_rate);
      if (!all_finite(params))
        throw std::runtime_error("non-finite parameters after epoch " +
                                 std::to_string(epoch_offset + e + 1) + " batch update");
    }

    EpochLog entry;
    entry.epoch = epoch_offset + e + 1;
    entry.phase = phase;
    entry.mode = cfg.mode;
    entry.mean_loss = loss_sum / static_cast<double>(n_items);
    entry.mean_reward = reward_count > 0 ? reward_sum / static_cast<double>(reward_count) : 0.0;
    entry.metric_calls = train_scorer.calls() - calls_before;

    if (val_scorer.has_value()) {
      const long long val_before = val_scorer->calls();
      entry.val_score = detail_trainer::validation_score(params, val_split, *val_scorer,
                                                         cfg.val_beam, cfg.max_len);
      entry.val_metric_calls = val_scorer->calls() - val_before;
      if (entry.val_score > best_val) {
        best_val = entry.val_score;
        result.best_params = params;
        result.best_epoch = entry.epoch;
      }
    }
    entry.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    result.log.epochs.push_back(entry);
  }

  result.params = params;
  if (result.best_epoch == 0) result.best_params = params;
  return result;
}

// Mean reward of one sampled sequence per reference slot, at fixed params.
// Mirrors the training-time sampling scheme; used to compare checkpoints.
inline double mean_sample_reward(const ModelParams& params, const Dataset& dataset,
                                 const Scorer& scorer, int max_len, uint64_t seed) {
  double sum = 0.0;
  long long count = 0;
  for (size_t idx = 0; idx < dataset.items.size(); ++idx) {
    const auto& item = dataset.items[idx];
    for (size_t s = 0; s < item.captions.size(); ++s) {
      Rng srng(derive_seed({seed, detail_trainer::kSampleTag, 0, static_cast<uint64_t>(idx),
                            static_cast<uint64_t>(s)}));
      const auto cache = sample_sequence(params, item.features, max_len, srng);
      sum += scorer.score(cache.tokens, item.captions);
      ++count;
    }
  }
  if (count == 0) throw std::runtime_error("empty dataset");
  return sum / static_cast<double>(count);
}

struct PipelineResult {
  ModelParams pretrain_params;  // checkpoint the fine-tuning started from
  TrainResult finetune;
  TrainLog log;  // both phases, epochs numbered consecutively
};

// Pre-train with (weighted) cross entropy, then fine-tune with policy
// gradients warm-started from the best pre-training checkpoint.
inline PipelineResult cst_pipeline(const TrainConfig& pretrain_cfg, const TrainConfig& finetune_cfg,
                                   const Dataset& dataset, int vocab_size) {
  if (pretrain_cfg.mode != "XE" && pretrain_cfg.mode != "WXE")
    throw std::runtime_error("pipeline pre-training mode must be XE or WXE");
  if (finetune_cfg.mode != "RL") throw std::runtime_error("pipeline fine-tuning mode must be RL");

  PipelineResult out;
  TrainResult pre = train(pretrain_cfg, dataset, vocab_size, nullptr, 0, "pretrain");
  out.pretrain_params = pre.best_params;
  out.finetune = train(finetune_cfg, dataset, vocab_size, nullptr,
                       static_cast<int>(pre.log.epochs.size()), "finetune", &pre.best_params);
  out.log = pre.log;
  out.log.epochs.insert(out.log.epochs.end(), out.finetune.log.epochs.begin(),
                        out.finetune.log.epochs.end());
  return out;
}

}  // namespace cst
