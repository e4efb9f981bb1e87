#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cst/model.hpp"
#include "cst/tensor.hpp"
#include "cst/vocab.hpp"

namespace cst {

// d(loss)/d(logits) for one cross-entropy step: softmax minus one-hot.
inline Vec xe_logit_grad(const Vec& p_t, int target_id) {
  if (target_id < 0 || target_id >= static_cast<int>(p_t.size()))
    throw std::runtime_error("target id out of range: " + std::to_string(target_id));
  Vec g = p_t;
  g[target_id] -= 1.0;
  return g;
}

// Same structure scaled by the advantage; reduces to xe_logit_grad when
// reward - baseline = 1.
inline Vec rl_logit_grad(const Vec& p_t, int sampled_id, double reward, double baseline) {
  if (!std::isfinite(reward) || !std::isfinite(baseline))
    throw std::runtime_error("reward and baseline must be finite");
  Vec g = xe_logit_grad(p_t, sampled_id);
  const double adv = reward - baseline;
  for (auto& v : g) v *= adv;
  return g;
}

struct SentenceLoss {
  double value = 0.0;
  std::vector<Vec> logit_grads;  // one vector per predicted step
};

namespace detail_objective {

inline void check_alignment(const ForwardCache& cache, const TokenSequence& seq) {
  if (cache.tokens != seq) throw std::runtime_error("cache does not match the given sequence");
  if (static_cast<int>(cache.probs.size()) != cache.T)
    throw std::runtime_error("cache is missing per-step distributions");
}

}  // namespace detail_objective

// Negative log-likelihood of the target under the cached forward pass.
inline SentenceLoss xe_sentence_loss(const ForwardCache& cache, const TokenSequence& target) {
  detail_objective::check_alignment(cache, target);
  SentenceLoss out;
  out.value = -cache.log_prob;
  out.logit_grads.reserve(cache.T);
  for (int t = 0; t < cache.T; ++t)
    out.logit_grads.push_back(xe_logit_grad(cache.probs[t], target[t]));
  return out;
}

// REINFORCE surrogate for one sampled sequence: gradients are
// (reward - baseline) times the cross-entropy gradients at the sampled
// tokens; steps where the token was forced (length cap) carry no gradient.
inline SentenceLoss rl_sentence_loss(const ForwardCache& cache, const TokenSequence& sample,
                                     double reward, double baseline) {
  detail_objective::check_alignment(cache, sample);
  SentenceLoss out;
  out.value = (reward - baseline) * -cache.log_prob;
  out.logit_grads.reserve(cache.T);
  for (int t = 0; t < cache.T; ++t) {
    if (!cache.forced.empty() && cache.forced[t]) {
      out.logit_grads.emplace_back(cache.probs[t].size(), 0.0);
    } else {
      out.logit_grads.push_back(rl_logit_grad(cache.probs[t], sample[t], reward, baseline));
    }
  }
  return out;
}

struct VideoLoss {
  double value = 0.0;
  std::vector<std::vector<Vec>> logit_grads;  // per caption, per step
};

// Reward-weighted cross entropy over one item's captions:
//   value = -(1/N) * sum_i (r_i - b_i) * log p(caption_i),
// with matching per-step logit gradients. With unit advantages and a single
// caption this reduces exactly to xe_sentence_loss. Also serves the
// fine-tuning path, where the captions are sampled sequences.
inline VideoLoss wxe_video_loss(const std::vector<ForwardCache>& caches,
                                const std::vector<TokenSequence>& targets,
                                const std::vector<double>& rewards,
                                const std::vector<double>& baselines) {
  const size_t n = caches.size();
  if (n == 0) throw std::runtime_error("no captions in loss");
  if (targets.size() != n || rewards.size() != n || baselines.size() != n)
    throw std::runtime_error("caption/reward/baseline list length mismatch");

  VideoLoss out;
  out.logit_grads.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    detail_objective::check_alignment(caches[i], targets[i]);
    if (!std::isfinite(rewards[i]) || !std::isfinite(baselines[i]))
      throw std::runtime_error("reward and baseline must be finite");
    const double scale = (rewards[i] - baselines[i]) * inv_n;
    acc += (rewards[i] - baselines[i]) * caches[i].log_prob;
    auto& grads = out.logit_grads[i];
    grads.reserve(caches[i].T);
    for (int t = 0; t < caches[i].T; ++t) {
      if (!caches[i].forced.empty() && caches[i].forced[t]) {
        grads.emplace_back(caches[i].probs[t].size(), 0.0);
      } else {
        Vec g = xe_logit_grad(caches[i].probs[t], targets[i][t]);
        for (auto& v : g) v *= scale;
        grads.push_back(std::move(g));
      }
    }
  }
  out.value = -acc * inv_n;
  return out;
}

inline double scb_baseline(const std::vector<double>& rewards) {
  if (rewards.empty()) throw std::runtime_error("baseline over empty reward list");
  double sum = 0.0;
  for (double r : rewards) sum += r;
  return sum / static_cast<double>(rewards.size());
}

// Mean of the current batch's sample rewards for one item. Unlike the
// ground-truth variant this depends on the samples themselves, so the
// resulting gradient estimator is biased; kept as a cheaper alternative.
inline double sampled_scb_baseline(const std::vector<double>& sample_rewards) {
  return scb_baseline(sample_rewards);
}

// Reward of the greedy decode, used as the baseline in the self-critical
// setup. Every call costs one extra decode plus one extra reward_fn
// evaluation; reward_fn is expected to count its own invocations.
inline double greedy_baseline(const ModelParams& params, const Vec& features, int max_len,
                              const std::function<double(const TokenSequence&)>& reward_fn) {
  return reward_fn(greedy_decode(params, features, max_len));
}

struct RewardTable {
  struct Entry {
    std::vector<double> rewards;
    double baseline = 0.0;
  };
  std::map<std::string, Entry> items;

  const Entry& at(const std::string& id) const {
    auto it = items.find(id);
    if (it == items.end()) throw std::runtime_error("no rewards stored for item: " + id);
    return it->second;
  }
};

inline void save_reward_table(const std::string& path, const RewardTable& table) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, entry] : table.items)
    j[id] = {{"rewards", entry.rewards}, {"baseline", entry.baseline}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write reward table: " + path);
  out << j.dump(2) << "\n";
}

inline RewardTable load_reward_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read reward table: " + path);
  // The writer serializes non-finite doubles as null, so read null back as
  // NaN and let the finiteness checks below reject it with a clear message.
  const auto as_double = [](const nlohmann::json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  RewardTable table;
  try {
    nlohmann::json j;
    in >> j;
    for (const auto& [id, entry] : j.items()) {
      RewardTable::Entry e;
      for (const auto& r : entry.at("rewards")) e.rewards.push_back(as_double(r));
      e.baseline = as_double(entry.at("baseline"));
      table.items[id] = std::move(e);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed reward table " + path + ": " + e.what());
  }
  for (const auto& [id, e] : table.items) {
    for (double r : e.rewards)
      if (!std::isfinite(r)) throw std::runtime_error("non-finite reward for item: " + id);
    if (!std::isfinite(e.baseline)) throw std::runtime_error("non-finite baseline for item: " + id);
  }
  return table;
}

}  // namespace cst
