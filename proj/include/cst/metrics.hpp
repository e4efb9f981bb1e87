#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cst/dataset.hpp"
#include "cst/vocab.hpp"

namespace cst {

constexpr int kMaxNgram = 4;

namespace ngram {

// N-grams up to length 4 are packed into a uint64 key, 16 bits per id.
constexpr int kMaxPackableId = 65534;

inline uint64_t pack(const int* ids, int n) {
  uint64_t key = 0;
  for (int i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] > kMaxPackableId)
      throw std::runtime_error("token id out of packable n-gram range");
    key = (key << 16) | (static_cast<uint64_t>(ids[i]) + 1);
  }
  return key;
}

using CountMap = std::unordered_map<uint64_t, double>;

// Term frequencies for n = 1..4; counts[n-1] maps packed n-gram -> count.
inline std::array<CountMap, kMaxNgram> count(const TokenSequence& seq) {
  std::array<CountMap, kMaxNgram> out;
  const int len = static_cast<int>(seq.size());
  for (int n = 1; n <= kMaxNgram; ++n)
    for (int i = 0; i + n <= len; ++i) out[n - 1][pack(seq.data() + i, n)] += 1.0;
  return out;
}

inline TokenSequence ensure_eos(TokenSequence seq) {
  if (seq.empty() || seq.back() != kEosId) seq.push_back(kEosId);
  return seq;
}

}  // namespace ngram

// Document frequencies over a reference corpus: each item counts as one
// document, and an n-gram's df is the number of items whose reference set
// contains it anywhere.
struct DocFreq {
  std::array<std::unordered_map<uint64_t, long long>, kMaxNgram> df;
  long long num_docs = 0;

  long long count(int n, uint64_t key) const {
    const auto& m = df[n - 1];
    auto it = m.find(key);
    return it == m.end() ? 0 : it->second;
  }
};

inline DocFreq build_doc_freq(const std::vector<std::vector<TokenSequence>>& reference_sets,
                              bool append_eos = true) {
  if (reference_sets.empty()) throw std::runtime_error("empty reference corpus");
  DocFreq out;
  for (const auto& refs : reference_sets) {
    if (refs.empty()) throw std::runtime_error("reference set with no captions");
    std::array<std::unordered_map<uint64_t, bool>, kMaxNgram> seen;
    for (const auto& ref : refs) {
      const auto counts = ngram::count(append_eos ? ngram::ensure_eos(ref) : ref);
      for (int n = 1; n <= kMaxNgram; ++n)
        for (const auto& [key, tf] : counts[n - 1]) seen[n - 1][key] = true;
    }
    for (int n = 1; n <= kMaxNgram; ++n)
      for (const auto& [key, unused] : seen[n - 1]) ++out.df[n - 1][key];
    ++out.num_docs;
  }
  return out;
}

struct CiderOptions {
  double sigma = 6.0;     // Gaussian length-penalty width
  bool append_eos = true; // terminate candidate and references before n-gram extraction
};

struct CiderDetail {
  double score = 0.0;
  // Sum over references of the clipped tf-idf dot product, per n-gram order.
  std::array<double, kMaxNgram> numerators{};
};

namespace detail_cider {

struct TfIdfVec {
  std::array<ngram::CountMap, kMaxNgram> weights;  // n-gram -> tf * idf
  std::array<double, kMaxNgram> norm2{};           // sum of squared weights
  long long length = 0;                            // token count
};

inline TfIdfVec tfidf(const TokenSequence& seq, const DocFreq& df) {
  TfIdfVec out;
  out.length = static_cast<long long>(seq.size());
  const double log_docs = std::log(static_cast<double>(df.num_docs));
  const auto counts = ngram::count(seq);
  for (int n = 1; n <= kMaxNgram; ++n) {
    for (const auto& [key, tf] : counts[n - 1]) {
      // Unseen n-grams keep df floored at 1, i.e. idf = log(num_docs).
      const double idf = log_docs - std::log(std::max(1.0, static_cast<double>(df.count(n, key))));
      const double w = tf * idf;
      out.weights[n - 1][key] = w;
      out.norm2[n - 1] += w * w;
    }
  }
  return out;
}

}  // namespace detail_cider

// Consensus score of a candidate against an item's references: mean over
// n-gram orders of the reference-averaged clipped tf-idf cosine, each term
// damped by a Gaussian penalty on the length difference, scaled to [0, 10].
inline CiderDetail cider_d_detail(const TokenSequence& candidate,
                                  const std::vector<TokenSequence>& references,
                                  const DocFreq& df, const CiderOptions& opts = {}) {
  if (candidate.empty()) throw std::runtime_error("empty candidate");
  if (references.empty()) throw std::runtime_error("empty reference set");
  if (df.num_docs < 1) throw std::runtime_error("document frequencies are empty");

  const auto cand =
      detail_cider::tfidf(opts.append_eos ? ngram::ensure_eos(candidate) : candidate, df);

  CiderDetail out;
  std::array<double, kMaxNgram> acc{};
  for (const auto& reference : references) {
    const auto ref =
        detail_cider::tfidf(opts.append_eos ? ngram::ensure_eos(reference) : reference, df);
    const double delta = static_cast<double>(cand.length - ref.length);
    const double penalty = std::exp(-(delta * delta) / (2.0 * opts.sigma * opts.sigma));
    for (int n = 0; n < kMaxNgram; ++n) {
      double num = 0.0;
      for (const auto& [key, wc] : cand.weights[n]) {
        auto it = ref.weights[n].find(key);
        if (it != ref.weights[n].end()) num += std::min(wc, it->second) * it->second;
      }
      out.numerators[n] += num;
      const double denom2 = cand.norm2[n] * ref.norm2[n];
      if (denom2 > 0.0) {
        double sim = num / std::sqrt(denom2);
        if (sim > 1.0) sim = 1.0;  // floating guard; Cauchy-Schwarz bounds the exact value
        acc[n] += sim * penalty;
      }
    }
  }

  double mean = 0.0;
  for (int n = 0; n < kMaxNgram; ++n) mean += acc[n] / static_cast<double>(references.size());
  out.score = 10.0 * mean / static_cast<double>(kMaxNgram);
  return out;
}

inline double cider_d(const TokenSequence& candidate, const std::vector<TokenSequence>& references,
                      const DocFreq& df, const CiderOptions& opts = {}) {
  return cider_d_detail(candidate, references, df, opts).score;
}

// Sentence-level smoothed BLEU: raw unigram precision, add-one smoothing on
// higher orders, multiplicative brevity penalty against the closest
// reference length (ties resolved to the shorter reference).
inline double bleu(const TokenSequence& candidate, const std::vector<TokenSequence>& references,
                   int max_n = 4) {
  if (candidate.empty()) throw std::runtime_error("empty candidate");
  if (references.empty()) throw std::runtime_error("empty reference set");
  if (max_n < 1 || max_n > kMaxNgram) throw std::runtime_error("max_n must be in 1..4");

  const auto cand_counts = ngram::count(candidate);
  std::array<ngram::CountMap, kMaxNgram> ref_max;
  for (const auto& ref : references) {
    const auto rc = ngram::count(ref);
    for (int n = 0; n < max_n; ++n)
      for (const auto& [key, tf] : rc[n]) {
        auto& slot = ref_max[n][key];
        slot = std::max(slot, tf);
      }
  }

  double log_sum = 0.0;
  for (int n = 0; n < max_n; ++n) {
    double total = 0.0, matched = 0.0;
    for (const auto& [key, tf] : cand_counts[n]) {
      total += tf;
      auto it = ref_max[n].find(key);
      if (it != ref_max[n].end()) matched += std::min(tf, it->second);
    }
    double p;
    if (n == 0) {
      p = matched / total;
      if (p == 0.0) return 0.0;
    } else {
      p = (matched + 1.0) / (total + 1.0);
    }
    log_sum += std::log(p);
  }

  const long long c = static_cast<long long>(candidate.size());
  long long r = static_cast<long long>(references.front().size());
  for (const auto& ref : references) {
    const long long rl = static_cast<long long>(ref.size());
    if (std::llabs(rl - c) < std::llabs(r - c) || (std::llabs(rl - c) == std::llabs(r - c) && rl < r))
      r = rl;
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

namespace detail_rouge {

inline long long lcs_length(const TokenSequence& a, const TokenSequence& b) {
  const size_t na = a.size(), nb = b.size();
  std::vector<long long> prev(nb + 1, 0), cur(nb + 1, 0);
  for (size_t i = 1; i <= na; ++i) {
    for (size_t j = 1; j <= nb; ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[nb];
}

}  // namespace detail_rouge

// Longest-common-subsequence F-measure, taking the best reference.
inline double rouge_l(const TokenSequence& candidate,
                      const std::vector<TokenSequence>& references, double beta = 1.2) {
  if (candidate.empty()) throw std::runtime_error("empty candidate");
  if (references.empty()) throw std::runtime_error("empty reference set");
  double best = 0.0;
  for (const auto& ref : references) {
    const double lcs = static_cast<double>(detail_rouge::lcs_length(candidate, ref));
    if (lcs == 0.0) continue;
    const double prec = lcs / static_cast<double>(candidate.size());
    const double rec = lcs / static_cast<double>(ref.size());
    const double f = (1.0 + beta * beta) * prec * rec / (rec + beta * beta * prec);
    best = std::max(best, f);
  }
  return best;
}

enum class Metric { kCider, kBleu4, kRougeL };

inline Metric parse_metric(const std::string& name) {
  if (name == "cider") return Metric::kCider;
  if (name == "bleu4") return Metric::kBleu4;
  if (name == "rougeL") return Metric::kRougeL;
  throw std::runtime_error("unknown metric: " + name + " (expected cider|bleu4|rougeL)");
}

inline std::string metric_name(Metric m) {
  switch (m) {
    case Metric::kCider: return "cider";
    case Metric::kBleu4: return "bleu4";
    case Metric::kRougeL: return "rougeL";
  }
  return "?";
}

// Reward function bound to a metric (and, for the consensus metric, its
// document frequencies). Every sentence-level evaluation is counted, which
// is what the trainer's cost accounting reports.
class Scorer {
 public:
  explicit Scorer(Metric metric, DocFreq df = {}, CiderOptions opts = {})
      : metric_(metric), df_(std::move(df)), opts_(opts),
        calls_(std::make_shared<std::atomic<long long>>(0)) {}

  double score(const TokenSequence& candidate, const std::vector<TokenSequence>& references) const {
    calls_->fetch_add(1, std::memory_order_relaxed);
    switch (metric_) {
      case Metric::kCider: return cider_d(candidate, references, df_, opts_);
      case Metric::kBleu4: return bleu(candidate, references, 4);
      case Metric::kRougeL: return rouge_l(candidate, references);
    }
    return 0.0;
  }

  Metric metric() const { return metric_; }
  long long calls() const { return calls_->load(std::memory_order_relaxed); }
  void reset_calls() { calls_->store(0, std::memory_order_relaxed); }

 private:
  Metric metric_;
  DocFreq df_;
  CiderOptions opts_;
  std::shared_ptr<std::atomic<long long>> calls_;
};

inline std::vector<std::vector<TokenSequence>> reference_sets(const Dataset& ds) {
  std::vector<std::vector<TokenSequence>> out;
  out.reserve(ds.items.size());
  for (const auto& it : ds.items) out.push_back(it.captions);
  return out;
}

inline Scorer make_scorer(Metric metric, const Dataset& ds, CiderOptions opts = {}) {
  DocFreq df;
  if (metric == Metric::kCider) df = build_doc_freq(reference_sets(ds), opts.append_eos);
  return Scorer(metric, std::move(df), opts);
}

struct CorpusScore {
  double corpus = 0.0;
  std::map<std::string, double> per_item;
};

// Mean of per-item sentence scores over the provided candidates.
inline CorpusScore corpus_score(const std::map<std::string, TokenSequence>& candidates,
                                const Dataset& dataset, Metric metric) {
  if (candidates.empty()) throw std::runtime_error("no candidates to score");
  const Scorer scorer = make_scorer(metric, dataset);
  CorpusScore out;
  for (const auto& [id, cand] : candidates) {
    const DatasetItem* item = dataset.find(id);
    if (item == nullptr) throw std::runtime_error("candidate for unknown item: " + id);
    const double s = scorer.score(cand, item->captions);
    out.per_item[id] = s;
  }
  double sum = 0.0;
  for (const auto& [id, s] : out.per_item) sum += s;
  out.corpus = sum / static_cast<double>(out.per_item.size());
  return out;
}

}  // namespace cst
