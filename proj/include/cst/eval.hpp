#pragma once

#include <array>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "cst/dataset.hpp"
#include "cst/metrics.hpp"
#include "cst/model.hpp"
#include "cst/vocab.hpp"

namespace cst {

struct EvalReport {
  std::array<double, 4> bleu{};  // corpus BLEU_1..BLEU_4
  double rouge_l = 0.0;
  double cider = 0.0;
  int beam = 0;
  int max_len = 0;
  struct ItemResult {
    std::string candidate;
    double cider = 0.0;
  };
  std::map<std::string, ItemResult> items;
};

// Beam-decodes every item and scores the candidates against that item's
// references. Corpus numbers are means of the per-item sentence scores.
// Consensus document frequencies come from the evaluated split itself unless
// an override corpus (typically the training split) is supplied.
inline EvalReport evaluate(const ModelParams& params, const Dataset& dataset,
                           const Vocabulary& vocab, int beam = 5, int max_len = 20,
                           const DocFreq* df_override = nullptr) {
  if (dataset.items.empty()) throw std::runtime_error("empty dataset");
  if (vocab.size() != params.V)
    throw std::runtime_error("vocabulary size does not match the checkpoint");
  const DocFreq df = df_override != nullptr ? *df_override : build_doc_freq(reference_sets(dataset));

  EvalReport report;
  report.beam = beam;
  report.max_len = max_len;
  std::array<double, 4> bleu_sum{};
  double rouge_sum = 0.0, cider_sum = 0.0;
  for (const auto& item : dataset.items) {
    const TokenSequence cand = beam_search(params, item.features, beam, max_len);
    EvalReport::ItemResult res;
    res.candidate = to_sentence(cand, vocab);
    res.cider = cider_d(cand, item.captions, df);
    cider_sum += res.cider;
    for (int n = 1; n <= 4; ++n) bleu_sum[n - 1] += bleu(cand, item.captions, n);
    rouge_sum += rouge_l(cand, item.captions);
    report.items[item.id] = std::move(res);
  }
  const double inv = 1.0 / static_cast<double>(dataset.items.size());
  for (int n = 0; n < 4; ++n) report.bleu[n] = bleu_sum[n] * inv;
  report.rouge_l = rouge_sum * inv;
  report.cider = cider_sum * inv;
  return report;
}

inline nlohmann::json report_json(const EvalReport& report) {
  nlohmann::json items = nlohmann::json::object();
  for (const auto& [id, res] : report.items)
    items[id] = {{"candidate", res.candidate}, {"cider", res.cider}};
  return {{"beam", report.beam},
          {"max_len", report.max_len},
          {"corpus",
           {{"BLEU_1", report.bleu[0]},
            {"BLEU_2", report.bleu[1]},
            {"BLEU_3", report.bleu[2]},
            {"BLEU_4", report.bleu[3]},
            {"ROUGE_L", report.rouge_l},
            {"CIDEr", report.cider}}},
          {"items", items}};
}

inline void save_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out << report_json(report).dump(2) << "\n";
}

}  // namespace cst
