// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only causal transformer, small enough to train on one core:
// pre-norm blocks with RMS normalization, learned absolute positions,
// untied output head, hidden-state capture at any layer, and decoding
// from either token ids or a raw embedding matrix.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gag/errors.hpp"
#include "gag/hash.hpp"
#include "gag/log.hpp"
#include "gag/optim.hpp"
#include "gag/tensor.hpp"
#include "gag/tokenizer.hpp"

namespace gag {

struct LMConfig {
  int vocab_size = Tokenizer::kVocabSize;
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 160;
  uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 1 || n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 2)
      raise(ErrorCode::config, "LMConfig fields must be positive");
    if (d_model % n_heads != 0)
      raise(ErrorCode::config, "d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                   std::to_string(n_heads));
  }
};

template <class S>
struct HiddenTrace {
  // layer 0 = block input after token + positional embedding; layer L = last
  // block output (pre final norm)
  std::map<int, num::Tensor<S>> layers;
  num::Tensor<S> logits;  // [T x vocab]
};

struct DecodingConfig {
  enum class Mode { greedy, sample };
  Mode mode = Mode::greedy;
  double temperature = 0.7;
  double top_p = 0.8;
  int top_k = 20;
  int max_new_tokens = 32;
  int min_new_tokens = 0;  // EOS suppressed until this many tokens emitted
  uint64_t seed = 0;

  void validate() const {
    if (max_new_tokens < 0 || min_new_tokens < 0)
      raise(ErrorCode::config, "token budgets must be non-negative");
    if (mode == Mode::sample) {
      if (temperature <= 0.0) raise(ErrorCode::config, "sampling needs temperature > 0");
      if (top_p <= 0.0 || top_p > 1.0) raise(ErrorCode::config, "top_p must lie in (0,1]");
      if (top_k < 1) raise(ErrorCode::config, "top_k must be >= 1");
    }
  }
};

// One training sequence: token ids plus a mask over next-token targets.
// target_mask[t] set means the prediction of ids[t+1] contributes to loss.
struct LMExample {
  std::vector<int> ids;
  std::vector<uint8_t> target_mask;
};

struct TrainHParams {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  num::LrSchedule::Decay decay = num::LrSchedule::Decay::cosine;
  double warmup_ratio = 0.1;
  int epochs = 8;
  int batch_size = 8;
  uint64_t seed = 42;
};

template <class S>
class ToyLM {
 public:
  explicit ToyLM(LMConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    num::RandomStream rng(cfg_.seed);
    const S std = S(0.02);
    auto mat = [&](num::Shape shape) { return num::Tensor<S>::randn(std::move(shape), rng, std); };
    const int64_t d = cfg_.d_model, f = cfg_.d_ff, v = cfg_.vocab_size;
    params_.add("tok_emb", mat({v, d}));
    params_.add("pos_emb", mat({cfg_.max_seq_len, d}));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      params_.add(p + "attn_norm.g", num::Tensor<S>::full({d}, S(1)));
      params_.add(p + "wq", mat({d, d}));
      params_.add(p + "wk", mat({d, d}));
      params_.add(p + "wv", mat({d, d}));
      params_.add(p + "wo", mat({d, d}));
      params_.add(p + "ffn_norm.g", num::Tensor<S>::full({d}, S(1)));
      params_.add(p + "w_in", mat({d, f}));
      params_.add(p + "b_in", num::Tensor<S>::zeros({f}));
      params_.add(p + "w_out", mat({f, d}));
      params_.add(p + "b_out", num::Tensor<S>::zeros({d}));
    }
    params_.add("final_norm.g", num::Tensor<S>::full({d}, S(1)));
    params_.add("head", mat({d, v}));
  }

  const LMConfig& config() const { return cfg_; }
  num::ParamSet<S>& params() { return params_; }
  const num::ParamSet<S>& params() const { return params_; }
  void set_frozen(bool f) { params_.set_frozen(f); }
  bool frozen() const { return params_.frozen(); }

  // Pure token-embedding rows; positional encoding is added inside forward so
  // slot substitution happens on position-independent vectors.
  num::Tensor<S> embed(const std::vector<int>& ids) const {
    return num::gather_rows(params_.get("tok_emb"), ids);
  }

  HiddenTrace<S> forward(const std::vector<int>& ids, const std::set<int>& capture = {}) const {
    return run(embed(ids), capture);
  }

  HiddenTrace<S> forward_embeddings(const num::Tensor<S>& e, const std::set<int>& capture = {}) const {
    if (e.rank() != 2 || e.shape()[1] != cfg_.d_model)
      raise(ErrorCode::dimension_mismatch, "embedding input must be [T x d_model]");
    return run(e, capture);
  }

  // Autoregressive continuation of a token prefix. The returned sequence never
  // contains EOS; generation stops when EOS wins, budgets run out, or the
  // context fills up.
  std::vector<int> decode(const std::vector<int>& prefix, const DecodingConfig& cfg) const {
    if (prefix.empty()) raise(ErrorCode::input, "decode needs a non-empty prefix");
    cfg.validate();
    num::NoGradGuard ng;
    num::RandomStream rng(cfg.seed);
    std::vector<int> cur = prefix;
    std::vector<int> out;
    while (static_cast<int>(out.size()) < cfg.max_new_tokens &&
           static_cast<int>(cur.size()) < cfg_.max_seq_len) {
      auto trace = forward(cur, {});
      int next = pick_token(trace.logits, cfg, rng, static_cast<int>(out.size()));
      if (next == Tokenizer::kEos) break;
      out.push_back(next);
      cur.push_back(next);
    }
    return out;
  }

  // Same loop with an embedding-matrix prefix (for substituted prompts);
  // generated tokens extend the matrix with their embedding rows.
  std::vector<int> decode_embeddings(const num::Tensor<S>& prefix, const DecodingConfig& cfg) const {
    if (!prefix.defined() || prefix.rank() != 2 || prefix.shape()[0] < 1)
      raise(ErrorCode::input, "decode needs a non-empty embedding prefix");
    cfg.validate();
    num::NoGradGuard ng;
    num::RandomStream rng(cfg.seed);
    num::Tensor<S> cur = prefix;
    std::vector<int> out;
    while (static_cast<int>(out.size()) < cfg.max_new_tokens &&
           cur.shape()[0] < cfg_.max_seq_len) {
      auto trace = forward_embeddings(cur, {});
      int next = pick_token(trace.logits, cfg, rng, static_cast<int>(out.size()));
      if (next == Tokenizer::kEos) break;
      out.push_back(next);
      cur = num::concat_rows<S>({cur, embed({next})});
    }
    return out;
  }

  // Masked-autoregressive training over full sequences. Returns mean loss per
  // epoch. Gradients accumulate across a mini-batch, then one AdamW step.
  std::vector<double> train(const std::vector<LMExample>& corpus, const TrainHParams& hp) {
    if (params_.frozen()) raise(ErrorCode::frozen_discipline, "train on a frozen model");
    if (corpus.empty()) raise(ErrorCode::input, "training corpus is empty");
    for (const auto& ex : corpus) {
      if (ex.ids.size() < 2 || ex.target_mask.size() != ex.ids.size() - 1)
        raise(ErrorCode::data, "training example needs ids (>=2) and mask of length len-1");
    }
    std::vector<double> curve;
    if (hp.epochs == 0) return curve;
    const int64_t steps_per_epoch =
        (static_cast<int64_t>(corpus.size()) + hp.batch_size - 1) / hp.batch_size;
    num::LrSchedule sched{hp.decay, hp.lr, hp.warmup_ratio, steps_per_epoch * hp.epochs};
    num::AdamW<S> opt(params_, {hp.beta1, hp.beta2, hp.eps, hp.weight_decay});
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    int64_t step = 0;
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
      num::RandomStream shuf(mix_seed(hp.seed, 0x5048u * (epoch + 1)));
      shuf.shuffle(order);
      double loss_sum = 0.0;
      for (size_t b = 0; b < order.size(); b += hp.batch_size) {
        const size_t b_end = std::min(order.size(), b + hp.batch_size);
        params_.zero_grad();
        for (size_t k = b; k < b_end; ++k) {
          const LMExample& ex = corpus[order[k]];
          auto trace = forward(ex.ids, {});
          auto logits = num::slice_rows(trace.logits, 0, static_cast<int64_t>(ex.ids.size()) - 1);
          std::vector<int> targets(ex.ids.begin() + 1, ex.ids.end());
          auto loss = num::nll_masked(logits, targets, ex.target_mask);
          loss_sum += static_cast<double>(loss.item());
          loss.backward();
        }
        opt.step(sched.at(step), static_cast<double>(b_end - b));
        ++step;
      }
      curve.push_back(loss_sum / static_cast<double>(corpus.size()));
      log::debug("epoch " + std::to_string(epoch) + " mean loss " + std::to_string(curve.back()));
    }
    return curve;
  }

  // Mean masked nll over a corpus without touching parameters.
  double eval_loss(const std::vector<LMExample>& corpus) const {
    num::NoGradGuard ng;
    double loss_sum = 0.0;
    for (const auto& ex : corpus) {
      auto trace = forward(ex.ids, {});
      auto logits = num::slice_rows(trace.logits, 0, static_cast<int64_t>(ex.ids.size()) - 1);
      std::vector<int> targets(ex.ids.begin() + 1, ex.ids.end());
      loss_sum += static_cast<double>(num::nll_masked(logits, targets, ex.target_mask).item());
    }
    return loss_sum / static_cast<double>(corpus.size());
  }

 private:
  HiddenTrace<S> run(const num::Tensor<S>& e, const std::set<int>& capture) const {
    const int64_t t = e.shape()[0];
    if (t > cfg_.max_seq_len)
      raise(ErrorCode::length, "sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                                   std::to_string(cfg_.max_seq_len));
    for (int l : capture)
      if (l < 0 || l > cfg_.n_layers)
        raise(ErrorCode::range, "capture layer " + std::to_string(l) + " outside 0.." +
                                    std::to_string(cfg_.n_layers));
    const S inv_sqrt_dh =
        S(1) / static_cast<S>(std::sqrt(static_cast<double>(cfg_.d_model / cfg_.n_heads)));
    HiddenTrace<S> trace;
    auto pos = num::slice_rows(params_.get("pos_emb"), 0, t);
    auto x = num::add(e, pos);
    if (capture.count(0)) trace.layers[0] = x;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      auto xn = num::rmsnorm(x, params_.get(p + "attn_norm.g"), S(kRmsEps));
      auto q = num::matmul(xn, params_.get(p + "wq"));
      auto k = num::matmul(xn, params_.get(p + "wk"));
      auto v = num::matmul(xn, params_.get(p + "wv"));
      const int64_t dh = cfg_.d_model / cfg_.n_heads;
      std::vector<num::Tensor<S>> heads;
      heads.reserve(cfg_.n_heads);
      for (int h = 0; h < cfg_.n_heads; ++h) {
        auto qh = num::slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = num::slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = num::slice_cols(v, h * dh, (h + 1) * dh);
        auto attn = num::causal_softmax(num::scale(num::matmul_nt(qh, kh), inv_sqrt_dh));
        heads.push_back(num::matmul(attn, vh));
      }
      auto ctx = cfg_.n_heads == 1 ? heads[0] : num::concat_cols(heads);
      x = num::add(x, num::matmul(ctx, params_.get(p + "wo")));
      auto hn = num::rmsnorm(x, params_.get(p + "ffn_norm.g"), S(kRmsEps));
      auto ff = num::gelu(num::add_rowvec(num::matmul(hn, params_.get(p + "w_in")),
                                          params_.get(p + "b_in")));
      x = num::add(x, num::add_rowvec(num::matmul(ff, params_.get(p + "w_out")),
                                      params_.get(p + "b_out")));
      if (capture.count(l + 1)) trace.layers[l + 1] = x;
    }
    auto xf = num::rmsnorm(x, params_.get("final_norm.g"), S(kRmsEps));
    trace.logits = num::matmul(xf, params_.get("head"));
    return trace;
  }

  int pick_token(const num::Tensor<S>& logits, const DecodingConfig& cfg, num::RandomStream& rng,
                 int emitted) const {
    const int64_t t = logits.shape()[0], v = logits.shape()[1];
    const S* row = logits.values().data() + (t - 1) * v;
    const bool ban_eos = emitted < cfg.min_new_tokens;
    if (cfg.mode == DecodingConfig::Mode::greedy) {
      int best = -1;
      for (int j = 0; j < v; ++j) {
        if (ban_eos && j == Tokenizer::kEos) continue;
        if (best < 0 || static_cast<double>(row[j]) > static_cast<double>(row[best])) best = j;
      }
      return best;
    }
    // temperature -> softmax -> top-k -> nucleus -> renormalize -> draw
    std::vector<std::pair<double, int>> items;
    items.reserve(v);
    double mx = -1e300;
    for (int j = 0; j < v; ++j) {
      if (ban_eos && j == Tokenizer::kEos) continue;
      const double s = static_cast<double>(row[j]) / cfg.temperature;
      mx = std::max(mx, s);
      items.push_back({s, j});
    }
    double sum = 0.0;
    for (auto& [s, j] : items) {
      s = std::exp(s - mx);
      sum += s;
    }
    for (auto& [s, j] : items) s /= sum;
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    size_t keep = std::min<size_t>(items.size(), static_cast<size_t>(cfg.top_k));
    double cum = 0.0;
    size_t nucleus = keep;
    for (size_t j = 0; j < keep; ++j) {
      cum += items[j].first;
      if (cum >= cfg.top_p) {
        nucleus = j + 1;
        break;
      }
    }
    items.resize(nucleus);
    double mass = 0.0;
    for (const auto& [s, j] : items) mass += s;
    const double u = rng.uniform() * mass;
    double acc = 0.0;
    for (const auto& [s, j] : items) {
      acc += s;
      if (u < acc) return j;
    }
    return items.back().second;
  }

  static constexpr double kRmsEps = 1e-5;

  LMConfig cfg_;
  num::ParamSet<S> params_;
};

using ToyLMF = ToyLM<float>;

}  // namespace gag
