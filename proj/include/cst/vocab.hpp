#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cst {

// Token ids are dense ints. The three specials occupy fixed slots so that
// encoded datasets and checkpoints stay stable across runs.
constexpr int kBosId = 0;
constexpr int kEosId = 1;
constexpr int kUnkId = 2;

inline const char* kBosToken = "<bos>";
inline const char* kEosToken = "<eos>";
inline const char* kUnkToken = "<unk>";

// A terminated sequence ends with kEosId and never contains kBosId.
using TokenSequence = std::vector<int>;

// Lowercase, strip sentence punctuation to spaces, split on whitespace.
inline std::vector<std::string> tokenize(const std::string& text) {
  static const std::string kStrip = ".,!?;:\"()";
  std::vector<std::string> out;
  std::string cur;
  for (char raw : text) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c)) || kStrip.find(c) != std::string::npos) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocabulary {
 public:
  Vocabulary() {
    tokens_ = {kBosToken, kEosToken, kUnkToken};
    for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) index_[tokens_[i]] = i;
  }

  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_[token] = id;
    return id;
  }

  int id_or_unk(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  int size() const { return static_cast<int>(tokens_.size()); }

  int bos_id() const { return kBosId; }
  int eos_id() const { return kEosId; }
  int unk_id() const { return kUnkId; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Builds a vocabulary of every token whose corpus count exceeds min_count.
// Order is deterministic: count descending, ties broken lexicographically.
inline Vocabulary build_vocab(const std::vector<std::vector<std::string>>& caption_sets,
                              int min_count) {
  std::map<std::string, long long> counts;
  bool any = false;
  for (const auto& captions : caption_sets) {
    for (const auto& text : captions) {
      for (auto& tok : tokenize(text)) {
        any = true;
        // Literal special markers in raw text are not countable words.
        if (tok == kBosToken || tok == kEosToken || tok == kUnkToken) continue;
        ++counts[tok];
      }
    }
  }
  if (!any) throw std::runtime_error("empty corpus");

  std::vector<std::pair<std::string, long long>> kept;
  for (const auto& [tok, n] : counts)
    if (n > min_count) kept.emplace_back(tok, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  for (const auto& [tok, n] : kept) vocab.add(tok);
  return vocab;
}

// Encodes text to ids: lowercased tokens, OOV mapped to <unk>, truncated to
// max_len - 1 tokens, <eos> appended. <bos> is never emitted.
inline TokenSequence encode_caption(const std::string& text, const Vocabulary& vocab,
                                    int max_len) {
  auto words = tokenize(text);
  if (words.empty()) throw std::runtime_error("empty caption");
  TokenSequence seq;
  seq.reserve(words.size() + 1);
  for (const auto& w : words) {
    if (static_cast<int>(seq.size()) >= max_len - 1) break;
    int id = vocab.id_or_unk(w);
    if (id == kBosId || id == kEosId) id = kUnkId;  // specials never appear mid-sequence
    seq.push_back(id);
  }
  seq.push_back(kEosId);
  return seq;
}

inline std::vector<std::string> decode(const TokenSequence& seq, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(seq.size());
  for (int id : seq) out.push_back(vocab.token(id));
  return out;
}

// Rendered sentence without the terminal <eos>.
inline std::string to_sentence(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (i + 1 == seq.size() && seq[i] == kEosId) break;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(seq[i]);
  }
  return out;
}

inline bool is_terminated(const TokenSequence& seq) {
  return !seq.empty() && seq.back() == kEosId;
}

}  // namespace cst
