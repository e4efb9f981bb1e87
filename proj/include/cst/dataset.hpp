#pragma once

#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cst/rng.hpp"
#include "cst/tensor.hpp"
#include "cst/vocab.hpp"

namespace cst {

// One "video": a feature vector plus its reference captions.
struct DatasetItem {
  std::string id;
  Vec features;
  std::vector<TokenSequence> captions;       // encoded, <eos>-terminated
  std::vector<std::string> caption_texts;    // raw strings as loaded/generated
  std::string split;                         // train | val | test
};

struct Dataset {
  std::vector<DatasetItem> items;
  size_t feature_dim = 0;
  std::string split_tag = "mixed";

  Dataset subset(const std::string& split) const {
    Dataset out;
    out.feature_dim = feature_dim;
    out.split_tag = split;
    for (const auto& it : items)
      if (it.split == split) out.items.push_back(it);
    return out;
  }

  const DatasetItem* find(const std::string& id) const {
    for (const auto& it : items)
      if (it.id == id) return &it;
    return nullptr;
  }
};

namespace detail {

inline void check_unique_ids(const Dataset& ds) {
  std::unordered_map<std::string, int> seen;
  for (const auto& it : ds.items)
    if (++seen[it.id] > 1) throw std::runtime_error("duplicate item id: " + it.id);
}

}  // namespace detail

// Reads a JSON-lines dataset file: one object per line with keys
// id / features / captions / split. Captions are encoded against `vocab`;
// pass std::nullopt to build the vocabulary from this file's train split
// first (falling back to all items when no split is tagged "train").
inline std::pair<Dataset, Vocabulary> load_dataset(const std::string& path,
                                                   std::optional<Vocabulary> vocab,
                                                   int min_count = 3, int max_len = 20) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);

  struct RawItem {
    std::string id;
    Vec features;
    std::vector<std::string> captions;
    std::string split;
  };
  std::vector<RawItem> raw;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("malformed record at line " + std::to_string(lineno) + ": " +
                               e.what());
    }
    RawItem item;
    try {
      item.id = j.at("id").get<std::string>();
      item.features = j.at("features").get<Vec>();
      item.captions = j.at("captions").get<std::vector<std::string>>();
      item.split = j.value("split", "train");
    } catch (const std::exception& e) {
      throw std::runtime_error("malformed record at line " + std::to_string(lineno) + ": " +
                               e.what());
    }
    if (item.captions.empty())
      throw std::runtime_error("malformed record at line " + std::to_string(lineno) +
                               ": item has no captions");
    raw.push_back(std::move(item));
  }
  if (raw.empty()) throw std::runtime_error("empty corpus");

  Vocabulary v;
  if (vocab.has_value()) {
    v = std::move(*vocab);
  } else {
    std::vector<std::vector<std::string>> corpus;
    for (const auto& r : raw)
      if (r.split == "train") corpus.push_back(r.captions);
    if (corpus.empty())
      for (const auto& r : raw) corpus.push_back(r.captions);
    v = build_vocab(corpus, min_count);
  }

  Dataset ds;
  ds.feature_dim = raw.front().features.size();
  for (auto& r : raw) {
    if (r.features.size() != ds.feature_dim)
      throw std::runtime_error("feature-dimension mismatch for item " + r.id + ": expected " +
                               std::to_string(ds.feature_dim) + ", got " +
                               std::to_string(r.features.size()));
    DatasetItem item;
    item.id = std::move(r.id);
    item.features = std::move(r.features);
    item.split = std::move(r.split);
    for (const auto& text : r.captions) {
      item.captions.push_back(encode_caption(text, v, max_len));
      item.caption_texts.push_back(text);
    }
    ds.items.push_back(std::move(item));
  }
  detail::check_unique_ids(ds);
  return {std::move(ds), std::move(v)};
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  for (const auto& it : ds.items) {
    nlohmann::json j;
    j["id"] = it.id;
    j["features"] = it.features;
    j["captions"] = it.caption_texts;
    j["split"] = it.split;
    out << j.dump() << "\n";
  }
}

inline void save_vocab(const Vocabulary& vocab, int min_count, const std::string& path) {
  nlohmann::json j;
  j["tokens"] = vocab.tokens();
  j["min_count"] = min_count;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocab file: " + path);
  out << j.dump(2) << "\n";
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab file: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  const auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < 3 || tokens[0] != kBosToken || tokens[1] != kEosToken ||
      tokens[2] != kUnkToken)
    throw std::runtime_error("vocab file does not start with the special tokens");
  Vocabulary v;
  for (size_t i = 3; i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

namespace detail {

// Short pronounceable word for synthetic captions: CV syllables.
inline std::string synth_word(size_t i) {
  static const std::string cons = "bcdfglmnprstvz";
  static const std::string vow = "aeiou";
  const size_t n = cons.size() * vow.size();
  std::string w;
  do {
    const size_t s = i % n;
    w += cons[s / vow.size()];
    w += vow[s % vow.size()];
    i /= n;
  } while (i > 0);
  return w;
}

}  // namespace detail

// Vocabulary matching the encoding used by generate_synthetic (min_count 0
// over every caption in the dataset).
inline Vocabulary synthetic_vocab(const Dataset& ds) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& it : ds.items) corpus.push_back(it.caption_texts);
  return build_vocab(corpus, 0);
}

// Generates a deterministic consensus-structured dataset: each item has a
// latent topic with a template sentence; features are a noisy one-hot of the
// topic; each caption is the template with independent per-token corruption,
// so captions of one item range from near-consensus to outliers.
// Items are tagged 80% train / 20% val by index.
inline Dataset generate_synthetic(uint64_t seed, int n_items, int vocab_size,
                                  int captions_per_item, double consensus_noise) {
  if (n_items < 1 || vocab_size < 5 || captions_per_item < 1)
    throw std::runtime_error("generate_synthetic: counts must be >= 1 and vocab_size >= 5");
  if (consensus_noise < 0.0 || consensus_noise > 1.0)
    throw std::runtime_error("generate_synthetic: consensus_noise must be in [0,1]");

  Rng rng(derive_seed({seed, 0x53594e5448ULL}));

  std::vector<std::string> words(static_cast<size_t>(vocab_size));
  for (int i = 0; i < vocab_size; ++i) words[static_cast<size_t>(i)] = detail::synth_word(i);

  const int n_topics = std::max(2, std::min(16, n_items));
  std::vector<std::vector<std::string>> templates(static_cast<size_t>(n_topics));
  for (auto& tpl : templates) {
    const size_t len = 5 + rng.uniform_int(5);  // 5..9 words
    tpl.reserve(len);
    for (size_t t = 0; t < len; ++t) tpl.push_back(words[rng.uniform_int(words.size())]);
  }

  Dataset ds;
  ds.feature_dim = static_cast<size_t>(n_topics);
  const int n_train = n_items < 5 ? n_items : static_cast<int>(std::lround(0.8 * n_items));
  for (int j = 0; j < n_items; ++j) {
    DatasetItem item;
    {
      std::ostringstream id;
      id << "v" << std::setw(5) << std::setfill('0') << j;
      item.id = id.str();
    }
    const size_t topic = rng.uniform_int(static_cast<size_t>(n_topics));
    item.features.assign(ds.feature_dim, 0.0);
    for (auto& f : item.features) f = 0.1 * rng.gaussian();
    item.features[topic] += 1.0;
    for (int c = 0; c < captions_per_item; ++c) {
      std::string text;
      for (const auto& tok : templates[topic]) {
        if (!text.empty()) text.push_back(' ');
        if (rng.uniform() < consensus_noise)
          text += words[rng.uniform_int(words.size())];
        else
          text += tok;
      }
      item.caption_texts.push_back(std::move(text));
    }
    item.split = j < n_train ? "train" : "val";
    ds.items.push_back(std::move(item));
  }

  // Encode against the vocabulary this corpus itself induces (min_count 0 so
  // the generated text round-trips without <unk>).
  const Vocabulary vocab = synthetic_vocab(ds);
  for (auto& it : ds.items)
    for (const auto& text : it.caption_texts) it.captions.push_back(encode_caption(text, vocab, 20));
  return ds;
}

}  // namespace cst
