#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cst/rng.hpp"
#include "cst/tensor.hpp"
#include "cst/vocab.hpp"

namespace cst {

// Single-layer LSTM caption decoder. Step 0 consumes the embedded feature
// vector with zero initial state; step t >= 1 consumes the embedding of the
// previous token (BOS before the first word). Logits exist for steps 1..T,
// step t predicting token t of the sequence.
struct ModelParams {
  int d = 0;    // hidden size
  int V = 0;    // vocab size
  int D_f = 0;  // feature dimension

  Matrix W_f;   // d x D_f feature embedding
  Vec b_f;      // d
  Matrix E;     // V x d word embeddings
  Matrix W_x;   // 4d x d input-to-gates, rows packed [input, forget, output, cell]
  Matrix W_h;   // 4d x d hidden-to-gates
  Vec b;        // 4d gate bias
  Matrix W_out; // V x d output projection
  Vec b_out;    // V
};

struct ParamGrads {
  Matrix W_f;
  Vec b_f;
  Matrix E;
  Matrix W_x;
  Matrix W_h;
  Vec b;
  Matrix W_out;
  Vec b_out;
};

// Applies f(name, tensor) to every tensor, in a fixed order shared by
// initialization, the optimizer, and checkpoint serialization.
template <class Params, class F>
void visit_tensors(Params& p, F&& f) {
  f("feature_embed_w", p.W_f);
  f("feature_embed_b", p.b_f);
  f("word_embed", p.E);
  f("lstm_wx", p.W_x);
  f("lstm_wh", p.W_h);
  f("lstm_b", p.b);
  f("out_proj_w", p.W_out);
  f("out_proj_b", p.b_out);
}

// Flat (pointer, length) spans over the tensors, in visit order. Lets the
// optimizer walk params, grads, and moment buffers in lockstep.
template <class Params>
inline auto tensor_spans(Params& p) {
  using Ptr = std::conditional_t<std::is_const_v<Params>, const double*, double*>;
  std::vector<std::pair<Ptr, size_t>> spans;
  visit_tensors(p, [&](const char*, auto& t) {
    using T = std::decay_t<decltype(t)>;
    if constexpr (std::is_same_v<std::remove_const_t<T>, Matrix>) {
      spans.emplace_back(t.data.data(), t.data.size());
    } else {
      spans.emplace_back(t.data(), t.size());
    }
  });
  return spans;
}

inline ParamGrads zeros_like(const ModelParams& p) {
  ParamGrads g;
  g.W_f = Matrix(p.W_f.rows, p.W_f.cols);
  g.b_f.assign(p.b_f.size(), 0.0);
  g.E = Matrix(p.E.rows, p.E.cols);
  g.W_x = Matrix(p.W_x.rows, p.W_x.cols);
  g.W_h = Matrix(p.W_h.rows, p.W_h.cols);
  g.b.assign(p.b.size(), 0.0);
  g.W_out = Matrix(p.W_out.rows, p.W_out.cols);
  g.b_out.assign(p.b_out.size(), 0.0);
  return g;
}

inline void add_scaled(ParamGrads& dst, const ParamGrads& src, double s) {
  for (size_t k = 0; k < dst.W_f.data.size(); ++k) dst.W_f.data[k] += s * src.W_f.data[k];
  for (size_t k = 0; k < dst.b_f.size(); ++k) dst.b_f[k] += s * src.b_f[k];
  for (size_t k = 0; k < dst.E.data.size(); ++k) dst.E.data[k] += s * src.E.data[k];
  for (size_t k = 0; k < dst.W_x.data.size(); ++k) dst.W_x.data[k] += s * src.W_x.data[k];
  for (size_t k = 0; k < dst.W_h.data.size(); ++k) dst.W_h.data[k] += s * src.W_h.data[k];
  for (size_t k = 0; k < dst.b.size(); ++k) dst.b[k] += s * src.b[k];
  for (size_t k = 0; k < dst.W_out.data.size(); ++k) dst.W_out.data[k] += s * src.W_out.data[k];
  for (size_t k = 0; k < dst.b_out.size(); ++k) dst.b_out[k] += s * src.b_out[k];
}

inline bool all_finite(const ParamGrads& g) {
  return all_finite(g.W_f) && all_finite(g.b_f) && all_finite(g.E) && all_finite(g.W_x) &&
         all_finite(g.W_h) && all_finite(g.b) && all_finite(g.W_out) && all_finite(g.b_out);
}

inline bool all_finite(const ModelParams& p) {
  return all_finite(p.W_f) && all_finite(p.b_f) && all_finite(p.E) && all_finite(p.W_x) &&
         all_finite(p.W_h) && all_finite(p.b) && all_finite(p.W_out) && all_finite(p.b_out);
}

inline ModelParams init_params(int d, int V, int D_f, uint64_t seed) {
  if (d < 1 || V < 1 || D_f < 1) throw std::runtime_error("model dimensions must be >= 1");
  ModelParams p;
  p.d = d;
  p.V = V;
  p.D_f = D_f;
  p.W_f = Matrix(d, D_f);
  p.b_f.assign(d, 0.0);
  p.E = Matrix(V, d);
  p.W_x = Matrix(4 * d, d);
  p.W_h = Matrix(4 * d, d);
  p.b.assign(4 * d, 0.0);
  p.W_out = Matrix(V, d);
  p.b_out.assign(V, 0.0);

  Rng rng(derive_seed({seed, 0x494e4954ULL}));
  visit_tensors(p, [&](const char* name, auto& t) {
    (void)name;
    using T = std::decay_t<decltype(t)>;
    if constexpr (std::is_same_v<T, Matrix>) {
      t.fill_uniform(rng, -0.08, 0.08);
    } else {
      for (auto& v : t) v = rng.uniform(-0.08, 0.08);
    }
  });
  // Forget-gate bias starts at 1 so early cells retain state.
  for (int k = d; k < 2 * d; ++k) p.b[k] = 1.0;
  return p;
}

struct LstmState {
  Vec h;
  Vec c;
};

struct StepCache {
  Vec x;       // input actually fed to the LSTM (post-dropout if any)
  Vec i, f, o, g;
  Vec c, h;
  Vec tanh_c;
};

struct ForwardCache {
  int T = 0;                          // number of predicted tokens
  TokenSequence tokens;               // tokens the logits predict
  std::vector<StepCache> steps;       // T + 1 entries, step 0 is the feature step
  std::vector<Vec> logits;            // T entries
  std::vector<Vec> probs;             // T entries, each a valid distribution
  std::vector<double> token_log_prob; // T entries, 0 at forced steps
  std::vector<char> forced;           // nonzero where the token was emitted without sampling
  double log_prob = 0.0;
  Vec features;                       // kept for the feature-embedding backward
  std::vector<Vec> in_mask;           // dropout masks (scaled), empty when off
  std::vector<Vec> out_mask;
};

namespace detail_model {

inline void check_features(const ModelParams& p, const Vec& features) {
  if (static_cast<int>(features.size()) != p.D_f)
    throw std::runtime_error("feature dimension mismatch: got " +
                             std::to_string(features.size()) + ", model expects " +
                             std::to_string(p.D_f));
}

inline void check_token(const ModelParams& p, int id) {
  if (id < 0 || id >= p.V) throw std::runtime_error("token id out of range: " + std::to_string(id));
}

// One LSTM cell update. Gate rows are packed [input, forget, output, cell].
inline void lstm_step(const ModelParams& p, const Vec& x, const Vec& h_prev, const Vec& c_prev,
                      StepCache& out) {
  const int d = p.d;
  Vec a(4 * d, 0.0);
  for (int k = 0; k < 4 * d; ++k) a[k] = p.b[k];
  matvec_acc(p.W_x, x, a);
  matvec_acc(p.W_h, h_prev, a);

  out.x = x;
  out.i.resize(d);
  out.f.resize(d);
  out.o.resize(d);
  out.g.resize(d);
  out.c.resize(d);
  out.h.resize(d);
  out.tanh_c.resize(d);
  for (int k = 0; k < d; ++k) {
    out.i[k] = sigmoid(a[k]);
    out.f[k] = sigmoid(a[d + k]);
    out.o[k] = sigmoid(a[2 * d + k]);
    out.g[k] = std::tanh(a[3 * d + k]);
    out.c[k] = out.f[k] * c_prev[k] + out.i[k] * out.g[k];
    out.tanh_c[k] = std::tanh(out.c[k]);
    out.h[k] = out.o[k] * out.tanh_c[k];
  }
}

inline Vec feature_input(const ModelParams& p, const Vec& features) {
  Vec x(p.d, 0.0);
  for (int k = 0; k < p.d; ++k) x[k] = p.b_f[k];
  matvec_acc(p.W_f, features, x);
  return x;
}

inline Vec embed_token(const ModelParams& p, int id) {
  const double* row = p.E.row(id);
  return Vec(row, row + p.d);
}

inline Vec output_logits(const ModelParams& p, const Vec& h) {
  Vec logits(p.V, 0.0);
  for (int k = 0; k < p.V; ++k) logits[k] = p.b_out[k];
  matvec_acc(p.W_out, h, logits);
  return logits;
}

inline Vec dropout_mask(int n, double rate, Rng& rng) {
  Vec m(n, 0.0);
  const double keep = 1.0 - rate;
  for (int k = 0; k < n; ++k) m[k] = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  return m;
}

inline void apply_mask(Vec& x, const Vec& m) {
  for (size_t k = 0; k < x.size(); ++k) x[k] *= m[k];
}

}  // namespace detail_model

// Teacher-forced pass over a target ending in EOS. Optional inverted dropout
// on LSTM inputs and on the hidden state feeding the output projection;
// decoding paths never use it.
inline ForwardCache forward_teacher(const ModelParams& p, const Vec& features,
                                    const TokenSequence& target, double dropout = 0.0,
                                    Rng* rng = nullptr) {
  detail_model::check_features(p, features);
  if (target.empty()) throw std::runtime_error("empty target sequence");
  if (target.back() != kEosId) throw std::runtime_error("target must end with EOS");
  for (int id : target) detail_model::check_token(p, id);
  if (dropout < 0.0 || dropout >= 1.0) throw std::runtime_error("dropout must be in [0, 1)");
  if (dropout > 0.0 && rng == nullptr) throw std::runtime_error("dropout requires an rng");

  const int T = static_cast<int>(target.size());
  ForwardCache cache;
  cache.T = T;
  cache.tokens = target;
  cache.features = features;
  cache.steps.resize(T + 1);
  cache.logits.resize(T);
  cache.probs.resize(T);
  cache.token_log_prob.assign(T, 0.0);
  cache.forced.assign(T, 0);
  const bool use_dropout = dropout > 0.0;
  if (use_dropout) {
    cache.in_mask.resize(T + 1);
    cache.out_mask.resize(T + 1);
  }

  const Vec zero(p.d, 0.0);
  for (int t = 0; t <= T; ++t) {
    Vec x = t == 0 ? detail_model::feature_input(p, features)
                   : detail_model::embed_token(p, t == 1 ? kBosId : target[t - 2]);
    if (use_dropout) {
      cache.in_mask[t] = detail_model::dropout_mask(p.d, dropout, *rng);
      detail_model::apply_mask(x, cache.in_mask[t]);
    }
    const Vec& h_prev = t == 0 ? zero : cache.steps[t - 1].h;
    const Vec& c_prev = t == 0 ? zero : cache.steps[t - 1].c;
    detail_model::lstm_step(p, x, h_prev, c_prev, cache.steps[t]);
    if (t == 0) continue;

    Vec h_used = cache.steps[t].h;
    if (use_dropout) {
      cache.out_mask[t] = detail_model::dropout_mask(p.d, dropout, *rng);
      detail_model::apply_mask(h_used, cache.out_mask[t]);
    }
    cache.logits[t - 1] = detail_model::output_logits(p, h_used);
    cache.probs[t - 1] = cache.logits[t - 1];
    const double lse = softmax_inplace(cache.probs[t - 1]);
    cache.token_log_prob[t - 1] = cache.logits[t - 1][target[t - 1]] - lse;
    cache.log_prob += cache.token_log_prob[t - 1];
  }
  return cache;
}

inline double log_prob(const ModelParams& p, const Vec& features, const TokenSequence& target) {
  return forward_teacher(p, features, target).log_prob;
}

// Ancestral sampling at temperature 1. Emission stops at a sampled EOS; if
// step max_len is reached, EOS is forced there (that step contributes no
// log-probability and carries no gradient).
inline ForwardCache sample_sequence(const ModelParams& p, const Vec& features, int max_len,
                                    Rng& rng) {
  detail_model::check_features(p, features);
  if (max_len < 1) throw std::runtime_error("max_len must be >= 1");
  ForwardCache cache;
  cache.features = features;
  cache.steps.emplace_back();
  const Vec zero(p.d, 0.0);
  detail_model::lstm_step(p, detail_model::feature_input(p, features), zero, zero, cache.steps[0]);

  int prev = kBosId;
  for (int t = 1; t <= max_len; ++t) {
    cache.steps.emplace_back();
    detail_model::lstm_step(p, detail_model::embed_token(p, prev), cache.steps[t - 1].h,
                            cache.steps[t - 1].c, cache.steps[t]);
    Vec logits = detail_model::output_logits(p, cache.steps[t].h);
    Vec probs = logits;
    const double lse = softmax_inplace(probs);

    int token;
    bool forced = false;
    if (t == max_len) {
      token = kEosId;
      forced = true;
    } else {
      token = static_cast<int>(rng.categorical(probs));
    }
    cache.tokens.push_back(token);
    cache.forced.push_back(forced ? 1 : 0);
    cache.token_log_prob.push_back(forced ? 0.0 : logits[token] - lse);
    cache.log_prob += cache.token_log_prob.back();
    cache.logits.push_back(std::move(logits));
    cache.probs.push_back(std::move(probs));
    if (token == kEosId) break;
    prev = token;
  }
  cache.T = static_cast<int>(cache.tokens.size());
  return cache;
}

inline ForwardCache sample_sequence(const ModelParams& p, const Vec& features, int max_len,
                                    uint64_t seed) {
  Rng rng(seed);
  return sample_sequence(p, features, max_len, rng);
}

namespace detail_model {

inline int argmax_lowest(const Vec& v) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(v.size()); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

}  // namespace detail_model

struct DecodeResult {
  TokenSequence tokens;
  double log_prob = 0.0;
};

inline DecodeResult greedy_decode_scored(const ModelParams& p, const Vec& features, int max_len) {
  detail_model::check_features(p, features);
  if (max_len < 1) throw std::runtime_error("max_len must be >= 1");
  DecodeResult out;
  StepCache prev_step, step;
  const Vec zero(p.d, 0.0);
  detail_model::lstm_step(p, detail_model::feature_input(p, features), zero, zero, prev_step);

  int prev = kBosId;
  for (int t = 1; t <= max_len; ++t) {
    if (t == max_len) {
      out.tokens.push_back(kEosId);
      break;
    }
    detail_model::lstm_step(p, detail_model::embed_token(p, prev), prev_step.h, prev_step.c, step);
    Vec logits = detail_model::output_logits(p, step.h);
    Vec probs = logits;
    const double lse = softmax_inplace(probs);
    const int token = detail_model::argmax_lowest(logits);
    out.tokens.push_back(token);
    out.log_prob += logits[token] - lse;
    if (token == kEosId) break;
    prev = token;
    std::swap(prev_step, step);
  }
  return out;
}

inline TokenSequence greedy_decode(const ModelParams& p, const Vec& features, int max_len) {
  return greedy_decode_scored(p, features, max_len).tokens;
}

// Beam search over summed log-probabilities. Finished hypotheses are set
// aside when selected; the best finished one wins, ties broken toward the
// lexicographically smaller sequence. No length normalization. beam=1
// reproduces greedy_decode exactly, including the forced EOS at max_len.
inline DecodeResult beam_search_scored(const ModelParams& p, const Vec& features, int beam,
                                       int max_len) {
  detail_model::check_features(p, features);
  if (beam < 1) throw std::runtime_error("beam must be >= 1");
  if (max_len < 1) throw std::runtime_error("max_len must be >= 1");

  struct Hyp {
    TokenSequence tokens;
    double lp = 0.0;
    Vec h, c;
  };
  const Vec zero(p.d, 0.0);
  StepCache root;
  detail_model::lstm_step(p, detail_model::feature_input(p, features), zero, zero, root);

  std::vector<Hyp> live;
  live.push_back(Hyp{{}, 0.0, root.h, root.c});
  std::vector<Hyp> done;

  for (int t = 1; t <= max_len && !live.empty(); ++t) {
    if (t == max_len) {
      for (auto& hyp : live) {
        hyp.tokens.push_back(kEosId);
        done.push_back(std::move(hyp));
      }
      break;
    }
    struct Cand {
      double lp;
      size_t src;
      int token;
    };
    std::vector<Cand> cands;
    std::vector<StepCache> stepped(live.size());
    for (size_t s = 0; s < live.size(); ++s) {
      const int prev = live[s].tokens.empty() ? kBosId : live[s].tokens.back();
      detail_model::lstm_step(p, detail_model::embed_token(p, prev), live[s].h, live[s].c,
                              stepped[s]);
      Vec logits = detail_model::output_logits(p, stepped[s].h);
      Vec probs = logits;
      const double lse = softmax_inplace(probs);
      for (int v = 0; v < p.V; ++v)
        cands.push_back(Cand{live[s].lp + (logits[v] - lse), s, v});
    }
    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.lp != b.lp) return a.lp > b.lp;
      const auto& ta = live[a.src].tokens;
      const auto& tb = live[b.src].tokens;
      if (ta != tb) return std::lexicographical_compare(ta.begin(), ta.end(), tb.begin(), tb.end());
      return a.token < b.token;
    });
    const size_t keep = std::min<size_t>(beam, cands.size());
    std::vector<Hyp> next;
    for (size_t k = 0; k < keep; ++k) {
      const Cand& c = cands[k];
      Hyp hyp;
      hyp.tokens = live[c.src].tokens;
      hyp.tokens.push_back(c.token);
      hyp.lp = c.lp;
      if (c.token == kEosId) {
        done.push_back(std::move(hyp));
      } else {
        hyp.h = stepped[c.src].h;
        hyp.c = stepped[c.src].c;
        next.push_back(std::move(hyp));
      }
    }
    live = std::move(next);
  }

  const Hyp* best = nullptr;
  for (const auto& hyp : done) {
    if (best == nullptr || hyp.lp > best->lp ||
        (hyp.lp == best->lp &&
         std::lexicographical_compare(hyp.tokens.begin(), hyp.tokens.end(), best->tokens.begin(),
                                      best->tokens.end())))
      best = &hyp;
  }
  return DecodeResult{best->tokens, best->lp};
}

inline TokenSequence beam_search(const ModelParams& p, const Vec& features, int beam,
                                 int max_len) {
  return beam_search_scored(p, features, beam, max_len).tokens;
}

// Reverse-mode pass from per-step logit gradients back to every parameter.
inline ParamGrads backward(const ModelParams& p, const ForwardCache& cache,
                           const std::vector<Vec>& logit_grads) {
  if (static_cast<int>(logit_grads.size()) != cache.T)
    throw std::runtime_error("logit gradient count does not match cached steps");
  for (const auto& g : logit_grads)
    if (static_cast<int>(g.size()) != p.V)
      throw std::runtime_error("logit gradient width does not match vocab");

  const int d = p.d;
  const int T = cache.T;
  ParamGrads grads = zeros_like(p);
  const Vec zero(d, 0.0);
  const bool use_dropout = !cache.in_mask.empty();

  Vec dh_next(d, 0.0), dc_next(d, 0.0);
  Vec dh(d), dc(d), da(4 * d), dx(d), h_used(d);
  for (int t = T; t >= 0; --t) {
    const StepCache& st = cache.steps[t];
    for (int k = 0; k < d; ++k) {
      dh[k] = dh_next[k];
      dc[k] = dc_next[k];
    }
    if (t >= 1) {
      const Vec& dlogits = logit_grads[t - 1];
      for (int k = 0; k < d; ++k) h_used[k] = st.h[k];
      if (use_dropout) detail_model::apply_mask(h_used, cache.out_mask[t]);
      outer_acc(grads.W_out, dlogits, h_used);
      for (int k = 0; k < p.V; ++k) grads.b_out[k] += dlogits[k];
      Vec dh_out(d, 0.0);
      matvec_t_acc(p.W_out, dlogits, dh_out);
      if (use_dropout) detail_model::apply_mask(dh_out, cache.out_mask[t]);
      for (int k = 0; k < d; ++k) dh[k] += dh_out[k];
    }

    const Vec& c_prev = t == 0 ? zero : cache.steps[t - 1].c;
    const Vec& h_prev = t == 0 ? zero : cache.steps[t - 1].h;
    for (int k = 0; k < d; ++k) {
      const double do_k = dh[k] * st.tanh_c[k];
      const double dtc = dh[k] * st.o[k];
      const double dc_k = dc[k] + dtc * (1.0 - st.tanh_c[k] * st.tanh_c[k]);
      const double di = dc_k * st.g[k];
      const double df = dc_k * c_prev[k];
      const double dg = dc_k * st.i[k];
      dc_next[k] = dc_k * st.f[k];
      da[k] = di * st.i[k] * (1.0 - st.i[k]);
      da[d + k] = df * st.f[k] * (1.0 - st.f[k]);
      da[2 * d + k] = do_k * st.o[k] * (1.0 - st.o[k]);
      da[3 * d + k] = dg * (1.0 - st.g[k] * st.g[k]);
    }
    outer_acc(grads.W_x, da, st.x);
    outer_acc(grads.W_h, da, h_prev);
    for (int k = 0; k < 4 * d; ++k) grads.b[k] += da[k];
    std::fill(dx.begin(), dx.end(), 0.0);
    matvec_t_acc(p.W_x, da, dx);
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    matvec_t_acc(p.W_h, da, dh_next);

    if (use_dropout) detail_model::apply_mask(dx, cache.in_mask[t]);
    if (t == 0) {
      outer_acc(grads.W_f, dx, cache.features);
      for (int k = 0; k < d; ++k) grads.b_f[k] += dx[k];
    } else {
      const int prev = t == 1 ? kBosId : cache.tokens[t - 2];
      double* row = grads.E.row(prev);
      for (int k = 0; k < d; ++k) row[k] += dx[k];
    }
  }
  return grads;
}

}  // namespace cst
