// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-domain expert: QA adaptation (Stage I), background synthesis from a
// prompt template, and the single-vector late-layer readout.
#pragma once

#include <string>
#include <vector>

#include "gag/errors.hpp"
#include "gag/lm.hpp"
#include "gag/templates.hpp"
#include "gag/tokenizer.hpp"

namespace gag {

template <class S>
struct ExpertReadout {
  num::Tensor<S> vector;  // [d2]
  int source_layer = 0;
  int background_length = 0;
};

// Default readout depth: four blocks below the top, clamped for shallow toys.
inline int default_readout_layer(int n_layers) { return std::max(1, n_layers - 4); }

template <class S>
class DomainExpert {
 public:
  // readout_layer <= 0 selects the default depth.
  DomainExpert(int id, LMConfig cfg, std::string background_template, int readout_layer = 0)
      : id_(id), model_(cfg), background_template_(std::move(background_template)) {
    if (id_ < 1) raise(ErrorCode::config, "domain id must be >= 1 (0 is the general route)");
    if (background_template_.find("{question}") == std::string::npos)
      raise(ErrorCode::template_error, "background template lacks a {question} field");
    set_readout_layer(readout_layer > 0 ? readout_layer : default_readout_layer(cfg.n_layers));
  }

  int id() const { return id_; }
  ToyLM<S>& model() { return model_; }
  const ToyLM<S>& model() const { return model_; }
  const std::string& background_template() const { return background_template_; }

  int readout_layer() const { return readout_layer_; }
  void set_readout_layer(int layer) {
    if (layer < 1 || layer > model_.config().n_layers)
      raise(ErrorCode::config, "readout layer " + std::to_string(layer) + " outside 1.." +
                                   std::to_string(model_.config().n_layers));
    readout_layer_ = layer;
  }

  bool adapted() const { return adapted_; }
  void mark_adapted() { adapted_ = true; }  // for checkpoints restored post-Stage-I

  // When false, the readout forward pass sees only BOS + b rather than the
  // full template(x) + b conditioning sequence.
  bool readout_includes_prompt = true;

  // Stage I: teach the expert to produce the domain answer as its background
  // continuation of the filled template.
  std::vector<double> adapt_stage1(const std::vector<QAPair>& corpus, const TrainHParams& hp) {
    if (model_.frozen()) raise(ErrorCode::frozen_discipline, "Stage I on a frozen expert");
    std::vector<LMExample> examples;
    examples.reserve(corpus.size());
    for (const auto& qa : corpus)
      examples.push_back(build_example(tok_, prompt_text(qa.question), qa.answer));
    auto curve = model_.train(examples, hp);
    adapted_ = true;
    return curve;
  }

  // b ~ p_phi(b | template(x)); never empty — EOS is suppressed at the first
  // step so at least one content token is generated.
  std::vector<int> synthesize_background(const std::string& x, DecodingConfig cfg,
                                         bool allow_unadapted = false) const {
    if (!adapted_ && !allow_unadapted)
      raise(ErrorCode::config, "background synthesis before Stage I (pass allow_unadapted to override)");
    cfg.max_new_tokens = std::max(1, cfg.max_new_tokens);
    cfg.min_new_tokens = std::max(1, cfg.min_new_tokens);
    auto prefix = tok_.encode(prompt_text(x), /*add_bos=*/true);
    auto b = model_.decode(prefix, cfg);
    if (b.empty())
      raise(ErrorCode::length, "no context room left to generate a background for this query");
    return b;
  }

  // k_i(x): hidden state at the last background position from layer ell*.
  // Runs without building a graph: Stage II treats k as a constant.
  ExpertReadout<S> readout(const std::string& x, const std::vector<int>& b) const {
    if (b.empty()) raise(ErrorCode::input, "readout needs a non-empty background");
    num::NoGradGuard ng;
    std::vector<int> ids;
    if (readout_includes_prompt) {
      ids = tok_.encode(prompt_text(x), /*add_bos=*/true);
    } else {
      ids.push_back(Tokenizer::kBos);
    }
    ids.insert(ids.end(), b.begin(), b.end());
    auto trace = model_.forward(ids, {readout_layer_});
    ExpertReadout<S> r;
    r.vector = num::row_of(trace.layers.at(readout_layer_),
                           static_cast<int64_t>(ids.size()) - 1);
    r.source_layer = readout_layer_;
    r.background_length = static_cast<int>(b.size());
    return r;
  }

 private:
  std::string prompt_text(const std::string& x) const {
    return render_template(background_template_, {{"question", x}});
  }

  int id_;
  ToyLM<S> model_;
  std::string background_template_;
  int readout_layer_ = 1;
  bool adapted_ = false;
  Tokenizer tok_;
};

struct SweepRow {
  int layer = 0;
  double score = 0.0;
};

// Re-runs Stage II + evaluation (supplied as a callable) once per readout
// depth, restoring the expert's configured depth afterwards.
template <class S, class TrainEval>
std::vector<SweepRow> readout_sweep(DomainExpert<S>& expert, TrainEval&& train_and_eval,
                                    const std::vector<int>& layers) {
  for (int l : layers)
    if (l < 1 || l > expert.model().config().n_layers)
      raise(ErrorCode::range, "sweep layer " + std::to_string(l) + " outside 1.." +
                                  std::to_string(expert.model().config().n_layers));
  const int original = expert.readout_layer();
  std::vector<SweepRow> rows;
  rows.reserve(layers.size());
  for (int l : layers) {
    expert.set_readout_layer(l);
    rows.push_back({l, train_and_eval(l)});
  }
  expert.set_readout_layer(original);
  return rows;
}

}  // namespace gag
