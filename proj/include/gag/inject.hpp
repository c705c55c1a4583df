// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Continuous knowledge injection: the projector MLP, anchor-slot embedding
// substitution, decoding from substituted prompts, and projector-only
// Stage II training under a frozen base and expert.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gag/errors.hpp"
#include "gag/expert.hpp"
#include "gag/lm.hpp"
#include "gag/templates.hpp"
#include "gag/tokenizer.hpp"

namespace gag {

// Two-layer GELU MLP mapping the expert readout (d2) into the base model's
// embedding space (d1). The second layer starts at zero so the initial
// injection is exactly the NULL vector.
template <class S>
class Projector {
 public:
  Projector(int d2, int d1, int d_hidden = 0, uint64_t seed = 0)
      : d2_(d2), d1_(d1), dh_(d_hidden > 0 ? d_hidden : std::max(d1, d2)) {
    if (d2 < 1 || d1 < 1) raise(ErrorCode::config, "projector dims must be positive");
    num::RandomStream rng(seed);
    const S limit = static_cast<S>(std::sqrt(6.0 / static_cast<double>(d2_)));
    params_.add("w1", num::Tensor<S>::rand_uniform({d2_, dh_}, rng, -limit, limit));
    params_.add("b1", num::Tensor<S>::zeros({dh_}));
    params_.add("w2", num::Tensor<S>::zeros({dh_, d1_}));
    params_.add("b2", num::Tensor<S>::zeros({d1_}));
  }

  int in_dim() const { return d2_; }
  int hidden_dim() const { return dh_; }
  int out_dim() const { return d1_; }
  num::ParamSet<S>& params() { return params_; }
  const num::ParamSet<S>& params() const { return params_; }
  void set_frozen(bool f) { params_.set_frozen(f); }

  // z = W2 . gelu(W1 . k + b1) + b2
  num::Tensor<S> project(const num::Tensor<S>& k) const {
    if (k.rank() != 1 || k.shape()[0] != d2_)
      raise(ErrorCode::config, "projector input " + num::shape_str(k.shape()) + " expects (" +
                                   std::to_string(d2_) + ")");
    auto row = num::reshape(k, {1, d2_});
    auto h = num::gelu(num::add_rowvec(num::matmul(row, params_.get("w1")), params_.get("b1")));
    auto out = num::add_rowvec(num::matmul(h, params_.get("w2")), params_.get("b2"));
    return num::row_of(out, 0);
  }

 private:
  int d2_, d1_, dh_;
  num::ParamSet<S> params_;
};

// A filled answer template as token ids; anchor_pos is the index of the
// single ANCHOR token, or -1 when the template carries no knowledge slot.
struct AnswerPrompt {
  std::vector<int> tokens;
  int anchor_pos = -1;
};

// Splits the template at "{anchor}" before substituting the question, so
// question text can never masquerade as a slot. Exactly one slot (or none,
// for the general template) is allowed.
inline AnswerPrompt make_answer_prompt(const Tokenizer& tok, const std::string& template_text,
                                       const std::string& question) {
  if (template_text.find("{question}") == std::string::npos)
    raise(ErrorCode::template_error, "answer template lacks a {question} field");
  const std::string marker = "{anchor}";
  const size_t first = template_text.find(marker);
  AnswerPrompt p;
  if (first == std::string::npos) {
    p.tokens = tok.encode(render_template(template_text, {{"question", question}}), /*add_bos=*/true);
    return p;
  }
  if (template_text.find(marker, first + marker.size()) != std::string::npos)
    raise(ErrorCode::template_error, "answer template has more than one {anchor} slot");
  const std::string before = render_template(template_text.substr(0, first), {{"question", question}});
  const std::string after =
      render_template(template_text.substr(first + marker.size()), {{"question", question}});
  p.tokens = tok.encode(before, /*add_bos=*/true);
  p.anchor_pos = static_cast<int>(p.tokens.size());
  p.tokens.push_back(Tokenizer::kAnchor);
  for (int id : tok.encode(after)) p.tokens.push_back(id);
  return p;
}

// E_theta(s_1..n) with row a replaced by z; z == nullptr is the NULL route:
// the anchor token is dropped entirely (no slot, no token).
template <class S>
num::Tensor<S> build_injected_embeddings(const ToyLM<S>& base, const AnswerPrompt& prompt,
                                         const num::Tensor<S>* z) {
  int anchors = 0;
  for (int id : prompt.tokens)
    if (id == Tokenizer::kAnchor) ++anchors;
  if (anchors > 1) raise(ErrorCode::template_error, "prompt contains more than one ANCHOR");
  if (anchors == 1 &&
      (prompt.anchor_pos < 0 || prompt.tokens[prompt.anchor_pos] != Tokenizer::kAnchor))
    raise(ErrorCode::template_error, "anchor_pos does not point at the ANCHOR token");
  if (z != nullptr) {
    if (anchors == 0) raise(ErrorCode::template_error, "injection needs a template with an ANCHOR slot");
    auto e = base.embed(prompt.tokens);
    return num::replace_row(e, prompt.anchor_pos, *z);
  }
  std::vector<int> ids;
  ids.reserve(prompt.tokens.size());
  for (int id : prompt.tokens)
    if (id != Tokenizer::kAnchor) ids.push_back(id);
  return base.embed(ids);
}

// Decoding from an embedding-level prefix under the frozen base.
template <class S>
std::vector<int> injected_decode(const ToyLM<S>& base, const num::Tensor<S>& e,
                                 const DecodingConfig& cfg) {
  if (!base.frozen()) raise(ErrorCode::frozen_discipline, "injected decoding requires a frozen base");
  return base.decode_embeddings(e, cfg);
}

struct Stage2Config {
  TrainHParams hp;                 // pinned defaults: linear warmup, zero weight decay
  DecodingConfig background;       // background synthesis settings
  std::string answer_template;     // must contain {question} and {anchor}
  bool cache_backgrounds = false;  // freeze per-example backgrounds from epoch 0
  bool allow_unadapted = false;    // w/o-Stage-I ablation switch

  Stage2Config() {
    hp.lr = 6e-3;
    hp.decay = num::LrSchedule::Decay::linear;
    hp.warmup_ratio = 0.03;
    hp.weight_decay = 0.0;
    hp.epochs = 5;
    hp.seed = 980406;
  }
};

// Stage II: backgrounds and readouts are synthesized under the frozen expert
// (constants in the graph); the base forward carries gradients only through
// the substituted row, so the projector is the sole trainable component.
template <class S>
std::vector<double> train_stage2(const ToyLM<S>& base, const DomainExpert<S>& expert,
                                 Projector<S>& proj, const std::vector<QAPair>& corpus,
                                 const Stage2Config& cfg) {
  if (!base.frozen()) raise(ErrorCode::frozen_discipline, "Stage II requires a frozen base");
  if (!expert.model().frozen()) raise(ErrorCode::frozen_discipline, "Stage II requires a frozen expert");
  if (proj.params().frozen()) raise(ErrorCode::frozen_discipline, "Stage II projector must be trainable");
  if (corpus.empty()) raise(ErrorCode::input, "Stage II corpus is empty");
  Tokenizer tok;
  const TrainHParams& hp = cfg.hp;
  std::vector<double> curve;
  if (hp.epochs == 0) return curve;

  std::vector<std::vector<int>> cached(corpus.size());
  auto background_for = [&](size_t idx, int epoch) -> std::vector<int> {
    if (cfg.cache_backgrounds && !cached[idx].empty()) return cached[idx];
    DecodingConfig bg = cfg.background;
    if (bg.mode == DecodingConfig::Mode::sample && !cfg.cache_backgrounds)
      bg.seed = mix_seed(cfg.background.seed, (static_cast<uint64_t>(epoch) << 32) | idx);
    auto b = expert.synthesize_background(corpus[idx].question, bg, cfg.allow_unadapted);
    if (cfg.cache_backgrounds) cached[idx] = b;
    return b;
  };

  const int64_t steps_per_epoch =
      (static_cast<int64_t>(corpus.size()) + hp.batch_size - 1) / hp.batch_size;
  num::LrSchedule sched{hp.decay, hp.lr, hp.warmup_ratio, steps_per_epoch * hp.epochs};
  num::AdamW<S> opt(proj.params(), {hp.beta1, hp.beta2, hp.eps, hp.weight_decay});
  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  int64_t step = 0;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    num::RandomStream shuf(mix_seed(hp.seed, 0x5332u * (epoch + 1)));
    shuf.shuffle(order);
    double loss_sum = 0.0;
    for (size_t b = 0; b < order.size(); b += hp.batch_size) {
      const size_t b_end = std::min(order.size(), b + hp.batch_size);
      proj.params().zero_grad();
      for (size_t i = b; i < b_end; ++i) {
        const QAPair& qa = corpus[order[i]];
        auto bg = background_for(order[i], epoch);
        auto k = expert.readout(qa.question, bg);
        auto z = proj.project(k.vector);
        auto prompt = make_answer_prompt(tok, cfg.answer_template, qa.question);
        auto e_prompt = build_injected_embeddings(base, prompt, &z);
        std::vector<int> answer_ids = tok.encode(qa.answer, false, /*add_eos=*/true);
        auto e_full = num::concat_rows<S>({e_prompt, base.embed(answer_ids)});
        auto trace = base.forward_embeddings(e_full, {});
        std::vector<int> full_ids = prompt.tokens;
        full_ids.insert(full_ids.end(), answer_ids.begin(), answer_ids.end());
        const int64_t n = static_cast<int64_t>(full_ids.size());
        auto logits = num::slice_rows(trace.logits, 0, n - 1);
        std::vector<int> targets(full_ids.begin() + 1, full_ids.end());
        std::vector<uint8_t> mask(n - 1, 0);
        for (int64_t t = 0; t + 1 < n; ++t)
          if (t + 1 >= static_cast<int64_t>(prompt.tokens.size())) mask[t] = 1;
        auto loss = num::nll_masked(logits, targets, mask);
        loss_sum += static_cast<double>(loss.item());
        loss.backward();
      }
      opt.step(sched.at(step), static_cast<double>(b_end - b));
      ++step;
    }
    curve.push_back(loss_sum / static_cast<double>(corpus.size()));
    log::debug("stage2 epoch " + std::to_string(epoch) + " mean loss " +
               std::to_string(curve.back()));
  }
  return curve;
}

}  // namespace gag
