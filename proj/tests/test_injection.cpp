// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0

#include <string>
#include <vector>

#include "doctest.h"
#include "gag/grad_check.hpp"
#include "gag/inject.hpp"

using namespace gag;

namespace {

const char* kAnswerTemplate = "Question: {question}\nKnowledge: {anchor}\nAnswer: ";
const char* kBgTemplate = "Question: {question}\nBackground: ";

LMConfig small_cfg(int d, int layers, uint64_t seed) {
  LMConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = d;
  cfg.n_heads = 2;
  cfg.d_ff = d * 2;
  cfg.max_seq_len = 96;
  cfg.seed = seed;
  return cfg;
}

template <class S>
std::vector<S> snapshot(const num::ParamSet<S>& ps) {
  std::vector<S> all;
  for (size_t i = 0; i < ps.size(); ++i)
    all.insert(all.end(), ps.at(i).values().begin(), ps.at(i).values().end());
  return all;
}

}  // namespace

TEST_CASE("zero-initialized projector maps everything to zero") {
  Projector<float> proj(8, 12, 0, 3);
  CHECK(proj.hidden_dim() == 12);
  num::RandomStream rng(4);
  auto k = num::Tensor<float>::randn({8}, rng, 1.0f);
  auto z = proj.project(k);
  CHECK(z.shape() == num::Shape{12});
  for (float v : z.values()) CHECK(v == 0.0f);
}

TEST_CASE("projector matches a hand-computed 2x2x2 case") {
  Projector<double> proj(2, 2, 2, 0);
  auto set = [&](const char* name, std::vector<double> v) {
    auto w = proj.params().get(name).raw();
    std::copy(v.begin(), v.end(), w.begin());
  };
  set("w1", {1, 0, 0, 1});
  set("b1", {0.5, -0.5});
  set("w2", {1, 2, 3, 4});
  set("b2", {0.1, -0.1});
  auto z = proj.project(num::Tensor<double>::from_vector({2}, {1.0, -1.0}));
  // h = gelu([1.5, -1.5]) = [1.5*Phi(1.5), -1.5*Phi(-1.5)]
  CHECK(z.values()[0] == doctest::Approx(1.1991567923868487).epsilon(1e-9));
  CHECK(z.values()[1] == doctest::Approx(2.2987351885802716).epsilon(1e-9));
}

TEST_CASE("projector rejects a readout of the wrong width") {
  Projector<float> proj(8, 12);
  try {
    proj.project(num::Tensor<float>::zeros({9}));
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::config);
  }
}

TEST_CASE("answer prompts carry exactly one anchor at the recorded position") {
  Tokenizer tok;
  auto p = make_answer_prompt(tok, kAnswerTemplate, "why?");
  int anchors = 0;
  for (int id : p.tokens)
    if (id == Tokenizer::kAnchor) ++anchors;
  CHECK(anchors == 1);
  CHECK(p.tokens[p.anchor_pos] == Tokenizer::kAnchor);
  CHECK(p.tokens[0] == Tokenizer::kBos);

  auto general = make_answer_prompt(tok, "Question: {question}\nAnswer: ", "why?");
  CHECK(general.anchor_pos == -1);

  CHECK_THROWS_AS(make_answer_prompt(tok, "no question field {anchor}", "q"), GagError);
  CHECK_THROWS_AS(make_answer_prompt(tok, "{question} {anchor} {anchor}", "q"), GagError);
}

TEST_CASE("a literal {anchor} inside the question is data, not a slot") {
  Tokenizer tok;
  auto p = make_answer_prompt(tok, kAnswerTemplate, "what does {anchor} mean?");
  int anchors = 0;
  for (int id : p.tokens)
    if (id == Tokenizer::kAnchor) ++anchors;
  CHECK(anchors == 1);  // only the template slot
  CHECK(tok.decode(p.tokens).find("{anchor} mean?") != std::string::npos);
}

TEST_CASE("identity substitution reproduces the raw embedding matrix") {
  ToyLM<float> base(small_cfg(16, 1, 9));
  Tokenizer tok;
  auto p = make_answer_prompt(tok, kAnswerTemplate, "q");
  auto anchor_row = num::row_of(base.params().get("tok_emb"), Tokenizer::kAnchor);
  auto substituted = build_injected_embeddings(base, p, &anchor_row);
  auto raw = base.embed(p.tokens);
  REQUIRE(substituted.shape() == raw.shape());
  for (int64_t i = 0; i < raw.size(); ++i) CHECK(substituted.values()[i] == raw.values()[i]);
}

TEST_CASE("non-identity substitution changes exactly one row") {
  ToyLM<float> base(small_cfg(16, 1, 9));
  Tokenizer tok;
  auto p = make_answer_prompt(tok, kAnswerTemplate, "q");
  num::RandomStream rng(2);
  auto z = num::Tensor<float>::randn({16}, rng, 1.0f);
  auto e = build_injected_embeddings(base, p, &z);
  auto raw = base.embed(p.tokens);
  int changed_rows = 0;
  for (int64_t r = 0; r < raw.shape()[0]; ++r) {
    bool diff = false;
    for (int64_t c = 0; c < 16; ++c) diff = diff || (e.at(r, c) != raw.at(r, c));
    changed_rows += diff ? 1 : 0;
  }
  CHECK(changed_rows == 1);
}

TEST_CASE("NULL route removes the slot token entirely") {
  ToyLM<float> base(small_cfg(16, 1, 9));
  Tokenizer tok;
  auto p = make_answer_prompt(tok, kAnswerTemplate, "q");
  auto e = build_injected_embeddings<float>(base, p, nullptr);
  CHECK(e.shape()[0] == static_cast<int64_t>(p.tokens.size()) - 1);
  std::vector<int> no_anchor;
  for (int id : p.tokens)
    if (id != Tokenizer::kAnchor) no_anchor.push_back(id);
  auto expected = base.embed(no_anchor);
  for (int64_t i = 0; i < e.size(); ++i) CHECK(e.values()[i] == expected.values()[i]);
}

TEST_CASE("injection without a slot raises template_error") {
  ToyLM<float> base(small_cfg(16, 1, 9));
  Tokenizer tok;
  auto general = make_answer_prompt(tok, "Question: {question}\nAnswer: ", "q");
  num::Tensor<float> z = num::Tensor<float>::zeros({16});
  try {
    build_injected_embeddings(base, general, &z);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::template_error);
  }
}

TEST_CASE("injected decoding needs a frozen base and is deterministic") {
  ToyLM<float> base(small_cfg(16, 1, 9));
  Tokenizer tok;
  auto p = make_answer_prompt(tok, kAnswerTemplate, "q");
  auto anchor_row = num::row_of(base.params().get("tok_emb"), Tokenizer::kAnchor);
  auto e = build_injected_embeddings(base, p, &anchor_row);
  DecodingConfig cfg;
  cfg.max_new_tokens = 6;
  CHECK_THROWS_AS(injected_decode(base, e, cfg), GagError);
  base.set_frozen(true);
  auto d1 = injected_decode(base, e, cfg);
  CHECK(d1 == injected_decode(base, e, cfg));
  // identity substitution decodes exactly like the raw token prompt
  CHECK(d1 == base.decode(p.tokens, cfg));
}

TEST_CASE("stage II enforces the frozen/trainable split") {
  ToyLM<float> base(small_cfg(16, 1, 1));
  DomainExpert<float> ex(1, small_cfg(12, 1, 2), kBgTemplate);
  ex.mark_adapted();
  Projector<float> proj(12, 16, 8, 3);
  std::vector<QAPair> corpus{{"k1?", "v1"}};
  Stage2Config cfg;
  cfg.answer_template = kAnswerTemplate;
  cfg.hp.epochs = 1;
  cfg.background.max_new_tokens = 3;

  auto expect_frozen_error = [&] {
    try {
      train_stage2(base, ex, proj, corpus, cfg);
      CHECK(false);
    } catch (const GagError& e) {
      CHECK(e.code() == ErrorCode::frozen_discipline);
    }
  };
  expect_frozen_error();  // base unfrozen
  base.set_frozen(true);
  expect_frozen_error();  // expert unfrozen
  ex.model().set_frozen(true);
  proj.set_frozen(true);
  expect_frozen_error();  // projector frozen
  proj.set_frozen(false);
  auto curve = train_stage2(base, ex, proj, corpus, cfg);
  CHECK(curve.size() == 1);
}

TEST_CASE("stage II leaves base and expert parameters byte-identical") {
  ToyLM<float> base(small_cfg(16, 2, 4));
  DomainExpert<float> ex(1, small_cfg(12, 2, 5), kBgTemplate);
  ex.mark_adapted();
  base.set_frozen(true);
  ex.model().set_frozen(true);
  Projector<float> proj(12, 16, 8, 6);
  std::vector<QAPair> corpus{{"k1?", "aa"}, {"k2?", "bb"}, {"k3?", "cc"}};
  Stage2Config cfg;
  cfg.answer_template = kAnswerTemplate;
  cfg.hp.epochs = 2;
  cfg.hp.batch_size = 2;
  cfg.background.max_new_tokens = 3;

  auto base_before = snapshot(base.params());
  auto expert_before = snapshot(ex.model().params());
  auto proj_before = snapshot(proj.params());
  train_stage2(base, ex, proj, corpus, cfg);
  CHECK(snapshot(base.params()) == base_before);
  CHECK(snapshot(ex.model().params()) == expert_before);
  CHECK(snapshot(proj.params()) != proj_before);
}

TEST_CASE("stage II steers a slot-reading base to high injected accuracy") {
  // The base is pretrained to answer from a one-token knowledge slot; the
  // injected continuous token then only has to land near the right slot
  // embedding for the frozen base to decode the private answer.
  Tokenizer tok;
  std::vector<std::string> carriers = {
      "what is entry a?",   "value of item bq?", "tell me about ccc?", "lookup record dd?",
      "what is entry ee?",  "value of item f?",  "tell me about gg?",  "lookup record hhh?",
      "what is entry iii?", "value of item jj?", "tell me about k?",   "lookup record ll?"};
  std::vector<std::string> codes = {"am", "bn", "co", "dp", "eq", "fr", "gs", "ht"};
  ToyLM<float> base(small_cfg(24, 2, 14));
  std::vector<LMExample> rows;
  for (const auto& q : carriers)
    for (int j = 0; j < 8; ++j)
      rows.push_back(build_example(
          tok, "Question: " + q + "\nKnowledge: " + std::string(1, static_cast<char>('A' + j)) + "\nAnswer: ",
          codes[j]));
  TrainHParams pre;
  pre.lr = 3e-3;
  pre.epochs = 40;
  pre.batch_size = 8;
  base.train(rows, pre);
  base.set_frozen(true);

  // private facts reuse the carrier phrasing but with unseen keys
  std::vector<QAPair> corpus = {
      {"what is entry zz?", codes[0]}, {"value of item yyy?", codes[1]},
      {"tell me about x?", codes[2]},  {"lookup record wwa?", codes[3]},
      {"what is entry vv?", codes[4]}, {"value of item u?", codes[5]},
      {"tell me about tt?", codes[6]}, {"lookup record sss?", codes[7]}};
  DomainExpert<float> ex(1, small_cfg(16, 2, 15), kBgTemplate);
  TrainHParams stage1;
  stage1.lr = 3e-3;
  stage1.epochs = 60;
  stage1.batch_size = 1;
  ex.adapt_stage1(corpus, stage1);
  ex.model().set_frozen(true);

  Projector<float> proj(16, 24, 0, 16);
  Stage2Config cfg;
  cfg.answer_template = kAnswerTemplate;
  cfg.hp.epochs = 60;
  cfg.hp.batch_size = 1;
  cfg.background.max_new_tokens = 4;
  auto curve = train_stage2(base, ex, proj, corpus, cfg);
  REQUIRE(curve.size() == 60);
  CHECK(curve.back() < 0.5 * curve.front());

  DecodingConfig greedy;
  greedy.max_new_tokens = 8;
  int hit = 0;
  for (const auto& qa : corpus) {
    auto b = ex.synthesize_background(qa.question, cfg.background);
    auto k = ex.readout(qa.question, b);
    num::NoGradGuard ng;
    auto z = proj.project(k.vector);
    auto p = make_answer_prompt(tok, kAnswerTemplate, qa.question);
    hit += tok.decode(injected_decode(base, build_injected_embeddings(base, p, &z), greedy)) == qa.answer;
  }
  CHECK(hit >= 6);  // observed 8/8; margin for float reordering across toolchains
}

TEST_CASE("stage II gradients match central finite differences at 64-bit") {
  ToyLM<double> base(small_cfg(16, 1, 24));
  DomainExpert<double> ex(1, small_cfg(12, 1, 25), kBgTemplate);
  ex.mark_adapted();
  base.set_frozen(true);
  ex.model().set_frozen(true);
  Projector<double> proj(12, 16, 8, 26);
  // roughen the zero init so the checked point is generic
  {
    num::RandomStream rng(27);
    for (auto name : {"w2", "b2"}) {
      auto w = proj.params().get(name).raw();
      for (auto& v : w) v = rng.normal() * 0.3;
    }
  }
  Tokenizer tok;
  const QAPair qa{"k1?", "xy"};
  DecodingConfig bg_cfg;
  bg_cfg.max_new_tokens = 3;
  auto b = ex.synthesize_background(qa.question, bg_cfg, true);
  auto k = ex.readout(qa.question, b);
  auto prompt = make_answer_prompt(tok, kAnswerTemplate, qa.question);
  std::vector<int> answer_ids = tok.encode(qa.answer, false, true);
  std::vector<int> full_ids = prompt.tokens;
  full_ids.insert(full_ids.end(), answer_ids.begin(), answer_ids.end());
  std::vector<int> targets(full_ids.begin() + 1, full_ids.end());
  std::vector<uint8_t> mask(full_ids.size() - 1, 0);
  for (size_t t = 0; t + 1 < full_ids.size(); ++t)
    if (t + 1 >= prompt.tokens.size()) mask[t] = 1;

  auto loss_fn = [&] {
    auto z = proj.project(k.vector);
    auto e = num::concat_rows<double>(
        {build_injected_embeddings(base, prompt, &z), base.embed(answer_ids)});
    auto trace = base.forward_embeddings(e, {});
    auto logits = num::slice_rows(trace.logits, 0, static_cast<int64_t>(full_ids.size()) - 1);
    return num::nll_masked(logits, targets, mask);
  };
  auto rep = num::check_gradients(proj.params(), loss_fn);
  CHECK(rep.checked == 12 * 8 + 8 + 8 * 16 + 16);
  CHECK(rep.max_rel_err <= 1e-4);
}
