// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0

#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "gag/lm.hpp"
#include "gag/templates.hpp"
#include "gag/tokenizer.hpp"

using namespace gag;

namespace {

LMConfig tiny_cfg(uint64_t seed = 7) {
  LMConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.max_seq_len = 48;
  cfg.seed = seed;
  return cfg;
}

template <class S>
bool same_values(const num::Tensor<S>& a, const num::Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.size(); ++i)
    if (a.values()[i] != b.values()[i]) return false;
  return true;
}

template <class S>
void copy_shared_params(ToyLM<S>& dst, const ToyLM<S>& src) {
  for (const std::string& name : dst.params().names()) {
    if (!src.params().has(name)) continue;
    auto from = src.params().get(name).values();
    auto to = dst.params().get(name).raw();
    if (from.size() == to.size()) std::copy(from.begin(), from.end(), to.begin());
  }
}

}  // namespace

TEST_CASE("tokenizer round-trips byte strings exactly") {
  Tokenizer tok;
  CHECK(tok.vocab_size() == 260);
  CHECK(tok.encode("").empty());
  CHECK(tok.decode({}).empty());
  auto ids = tok.encode("ab");
  CHECK(ids == std::vector<int>{101, 102});  // 'a'=97, 'b'=98, +4 specials
  CHECK(tok.decode(ids) == "ab");
  const std::string utf8 = "héllo wörld — 你好";
  CHECK(tok.decode(tok.encode(utf8)) == utf8);
}

TEST_CASE("tokenizer drops specials on decode and rejects bad ids") {
  Tokenizer tok;
  auto ids = tok.encode("xy", /*add_bos=*/true, /*add_eos=*/true);
  CHECK(ids.front() == Tokenizer::kBos);
  CHECK(ids.back() == Tokenizer::kEos);
  CHECK(tok.decode(ids) == "xy");
  CHECK(tok.decode({Tokenizer::kPad, Tokenizer::kAnchor}).empty());
  try {
    tok.decode({260});
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::range);
  }
}

TEST_CASE("config validation rejects indivisible head width") {
  LMConfig cfg = tiny_cfg();
  cfg.d_model = 30;
  cfg.n_heads = 4;
  CHECK_THROWS_AS(ToyLM<float>{cfg}, GagError);
}

TEST_CASE("single BOS forward has T=1 shapes and layer-0 capture") {
  ToyLM<float> lm(tiny_cfg());
  auto trace = lm.forward({Tokenizer::kBos}, {0, 1, 2});
  CHECK(trace.logits.shape() == num::Shape{1, 260});
  CHECK(trace.layers.at(0).shape() == num::Shape{1, 32});
  CHECK(trace.layers.at(2).shape() == num::Shape{1, 32});
  CHECK_THROWS_AS(lm.forward({Tokenizer::kBos}, {3}), GagError);
}

TEST_CASE("embedding input reproduces the token path bit-exactly") {
  ToyLM<float> lm(tiny_cfg());
  Tokenizer tok;
  auto ids = tok.encode("the quick brown fox", true);
  auto from_ids = lm.forward(ids, {1});
  auto from_emb = lm.forward_embeddings(lm.embed(ids), {1});
  CHECK(same_values(from_ids.logits, from_emb.logits));
  CHECK(same_values(from_ids.layers.at(1), from_emb.layers.at(1)));
}

TEST_CASE("embedding rows are pure table lookups") {
  ToyLM<float> lm(tiny_cfg());
  auto e = lm.embed({5, 9, 5});
  CHECK(e.shape() == num::Shape{3, 32});
  for (int j = 0; j < 32; ++j) {
    CHECK(e.at(0, j) == e.at(2, j));
    CHECK(e.at(0, j) == lm.params().get("tok_emb").at(5, j));
  }
}

TEST_CASE("causal mask: future tokens never move past logits") {
  ToyLM<float> lm(tiny_cfg());
  std::vector<int> a{1, 10, 20, 30, 40, 50, 60, 70};
  std::vector<int> b = a;
  b[5] = 200;
  b[7] = 210;
  auto ta = lm.forward(a);
  auto tb = lm.forward(b);
  for (int t = 0; t < 5; ++t)
    for (int vcol = 0; vcol < 260; ++vcol) CHECK(ta.logits.at(t, vcol) == tb.logits.at(t, vcol));
}

TEST_CASE("captured states equal a truncated stack") {
  LMConfig full_cfg = tiny_cfg(3);
  full_cfg.n_layers = 3;
  ToyLM<float> full(full_cfg);
  LMConfig trunc_cfg = full_cfg;
  trunc_cfg.n_layers = 2;
  ToyLM<float> trunc(trunc_cfg);
  copy_shared_params(trunc, full);
  std::vector<int> ids{1, 42, 43, 44, 45};
  auto t_full = full.forward(ids, {2});
  auto t_trunc = trunc.forward(ids, {2});
  CHECK(same_values(t_full.layers.at(2), t_trunc.layers.at(2)));
}

TEST_CASE("decode budgets and determinism") {
  ToyLM<float> lm(tiny_cfg());
  std::vector<int> prefix{1, 50, 60};
  DecodingConfig cfg;
  cfg.max_new_tokens = 0;
  CHECK(lm.decode(prefix, cfg).empty());
  cfg.max_new_tokens = 8;
  auto g1 = lm.decode(prefix, cfg);
  auto g2 = lm.decode(prefix, cfg);
  CHECK(g1 == g2);
  DecodingConfig s;
  s.mode = DecodingConfig::Mode::sample;
  s.max_new_tokens = 8;
  s.seed = 31;
  CHECK(lm.decode(prefix, s) == lm.decode(prefix, s));
  s.min_new_tokens = 1;
  CHECK(!lm.decode(prefix, s).empty());
}

TEST_CASE("sampling config is validated") {
  ToyLM<float> lm(tiny_cfg());
  DecodingConfig s;
  s.mode = DecodingConfig::Mode::sample;
  s.temperature = 0.0;
  CHECK_THROWS_AS(lm.decode({1}, s), GagError);
  s.temperature = 0.7;
  s.top_p = 1.5;
  CHECK_THROWS_AS(lm.decode({1}, s), GagError);
  s.top_p = 0.8;
  s.top_k = 0;
  CHECK_THROWS_AS(lm.decode({1}, s), GagError);
}

TEST_CASE("over-length input raises a length error") {
  ToyLM<float> lm(tiny_cfg());
  std::vector<int> ids(49, 5);
  try {
    lm.forward(ids);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::length);
  }
}

TEST_CASE("zero epochs change nothing") {
  ToyLM<float> lm(tiny_cfg());
  std::vector<float> before(lm.params().get("head").values().begin(),
                            lm.params().get("head").values().end());
  Tokenizer tok;
  std::vector<LMExample> corpus{build_example(tok, "q: ", "a")};
  TrainHParams hp;
  hp.epochs = 0;
  auto curve = lm.train(corpus, hp);
  CHECK(curve.empty());
  auto after = lm.params().get("head").values();
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("training a frozen model raises frozen_discipline") {
  ToyLM<float> lm(tiny_cfg());
  lm.set_frozen(true);
  Tokenizer tok;
  std::vector<LMExample> corpus{build_example(tok, "q: ", "a")};
  try {
    lm.train(corpus, {});
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::frozen_discipline);
  }
}

TEST_CASE("a four-pair corpus overfits below 0.05 within 150 epochs") {
  ToyLM<float> lm(tiny_cfg(11));
  Tokenizer tok;
  std::vector<std::pair<std::string, std::string>> pairs{
      {"color of sky? ", "blue"},
      {"color of grass? ", "green"},
      {"two plus two? ", "four"},
      {"opposite of up? ", "down"},
  };
  std::vector<LMExample> corpus;
  for (const auto& [q, a] : pairs) corpus.push_back(build_example(tok, q, a));
  TrainHParams hp;
  hp.lr = 5e-3;
  hp.epochs = 150;
  hp.batch_size = 1;  // tiny corpora need per-example steps to accumulate
  hp.seed = 42;
  auto curve = lm.train(corpus, hp);
  REQUIRE(curve.size() == 150);
  double best = curve[0];
  for (double v : curve) best = std::min(best, v);
  CHECK(best < 0.05);

  // memorization shows up in greedy decoding, which stops at EOS
  DecodingConfig cfg;
  cfg.max_new_tokens = 16;
  auto out = lm.decode(tok.encode("color of sky? ", true), cfg);
  CHECK(tok.decode(out) == "blue");
}

TEST_CASE("build_example masks prompt positions and keeps answer + EOS") {
  Tokenizer tok;
  auto ex = build_example(tok, "pq", "rs");
  // ids: BOS p q r s EOS
  REQUIRE(ex.ids.size() == 6);
  CHECK(ex.ids[0] == Tokenizer::kBos);
  CHECK(ex.ids[5] == Tokenizer::kEos);
  REQUIRE(ex.target_mask.size() == 5);
  CHECK(ex.target_mask == std::vector<uint8_t>{0, 0, 1, 1, 1});
}
