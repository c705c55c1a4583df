// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
#include "gag/run_config.hpp"

#include <fstream>
#include <initializer_list>
#include <string>

#include "gag/errors.hpp"
#include "gag/hash.hpp"

namespace gag {
namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& ctx, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) raise(ErrorCode::config, ctx + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (item.key() == a) { known = true; break; }
    if (!known) raise(ErrorCode::config, "unknown key '" + item.key() + "' in " + ctx);
  }
}

template <class T>
void read_field(const json& j, const char* key, T& out, const std::string& ctx) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    raise(ErrorCode::config, std::string("bad value for '") + key + "' in " + ctx);
  }
}

json lm_to_json(const LMConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

LMConfig lm_from_json(const json& j, const std::string& ctx, LMConfig base) {
  check_keys(j, ctx, {"n_layers", "d_model", "n_heads", "d_ff", "max_seq_len", "seed"});
  read_field(j, "n_layers", base.n_layers, ctx);
  read_field(j, "d_model", base.d_model, ctx);
  read_field(j, "n_heads", base.n_heads, ctx);
  read_field(j, "d_ff", base.d_ff, ctx);
  read_field(j, "max_seq_len", base.max_seq_len, ctx);
  read_field(j, "seed", base.seed, ctx);
  base.validate();
  return base;
}

std::string decay_name(num::LrSchedule::Decay d) {
  switch (d) {
    case num::LrSchedule::Decay::cosine: return "cosine";
    case num::LrSchedule::Decay::linear: return "linear";
    case num::LrSchedule::Decay::constant: return "constant";
  }
  raise(ErrorCode::config, "unhandled decay");
}

num::LrSchedule::Decay decay_of(const std::string& s, const std::string& ctx) {
  if (s == "cosine") return num::LrSchedule::Decay::cosine;
  if (s == "linear") return num::LrSchedule::Decay::linear;
  if (s == "constant") return num::LrSchedule::Decay::constant;
  raise(ErrorCode::config, "decay '" + s + "' in " + ctx + " is not cosine|linear|constant");
}

json train_to_json(const TrainHParams& h) {
  return {{"lr", h.lr},
          {"beta1", h.beta1},
          {"beta2", h.beta2},
          {"eps", h.eps},
          {"weight_decay", h.weight_decay},
          {"decay", decay_name(h.decay)},
          {"warmup_ratio", h.warmup_ratio},
          {"epochs", h.epochs},
          {"batch_size", h.batch_size},
          {"seed", h.seed}};
}

TrainHParams train_from_json(const json& j, const std::string& ctx, TrainHParams h) {
  check_keys(j, ctx,
             {"lr", "beta1", "beta2", "eps", "weight_decay", "decay", "warmup_ratio", "epochs",
              "batch_size", "seed"});
  read_field(j, "lr", h.lr, ctx);
  read_field(j, "beta1", h.beta1, ctx);
  read_field(j, "beta2", h.beta2, ctx);
  read_field(j, "eps", h.eps, ctx);
  read_field(j, "weight_decay", h.weight_decay, ctx);
  if (j.contains("decay")) h.decay = decay_of(j.at("decay").get<std::string>(), ctx);
  read_field(j, "warmup_ratio", h.warmup_ratio, ctx);
  read_field(j, "epochs", h.epochs, ctx);
  read_field(j, "batch_size", h.batch_size, ctx);
  read_field(j, "seed", h.seed, ctx);
  if (h.lr <= 0 || h.epochs < 1 || h.batch_size < 1)
    raise(ErrorCode::config, ctx + ": lr must be positive, epochs/batch_size at least 1");
  return h;
}

json decoding_to_json(const DecodingConfig& d) {
  return {{"mode", d.mode == DecodingConfig::Mode::greedy ? "greedy" : "sample"},
          {"temperature", d.temperature},
          {"top_p", d.top_p},
          {"top_k", d.top_k},
          {"max_new_tokens", d.max_new_tokens},
          {"min_new_tokens", d.min_new_tokens},
          {"seed", d.seed}};
}

DecodingConfig decoding_from_json(const json& j, const std::string& ctx, DecodingConfig d) {
  check_keys(j, ctx,
             {"mode", "temperature", "top_p", "top_k", "max_new_tokens", "min_new_tokens", "seed"});
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m == "greedy") d.mode = DecodingConfig::Mode::greedy;
    else if (m == "sample") d.mode = DecodingConfig::Mode::sample;
    else raise(ErrorCode::config, "mode '" + m + "' in " + ctx + " is not greedy|sample");
  }
  read_field(j, "temperature", d.temperature, ctx);
  read_field(j, "top_p", d.top_p, ctx);
  read_field(j, "top_k", d.top_k, ctx);
  read_field(j, "max_new_tokens", d.max_new_tokens, ctx);
  read_field(j, "min_new_tokens", d.min_new_tokens, ctx);
  read_field(j, "seed", d.seed, ctx);
  d.validate();
  return d;
}

}  // namespace

RunConfig::RunConfig() {
  base.n_layers = 2;
  base.d_model = 48;
  base.n_heads = 4;
  base.d_ff = 192;
  base.max_seq_len = 160;
  base.seed = 1001;

  expert = base;
  expert.max_seq_len = 128;
  expert.seed = 2001;

  encoder.n_layers = 2;
  encoder.d_model = 32;
  encoder.n_heads = 4;
  encoder.d_ff = 128;
  encoder.max_seq_len = 128;
  encoder.seed = 3003;

  data = default_synthetic_config(2, 200, 0);

  train_base.lr = 3e-3;
  train_base.epochs = 50;
  train_base.batch_size = 8;
  train_base.seed = 42;

  expert_pretrain.lr = 3e-3;
  expert_pretrain.epochs = 6;
  expert_pretrain.batch_size = 8;
  expert_pretrain.seed = 7;

  stage1.lr = 5e-3;
  stage1.epochs = 8;
  stage1.batch_size = 1;
  stage1.seed = 42;

  stage2.cache_backgrounds = true;

  answer_decoding.max_new_tokens = 8;
  background_decoding.max_new_tokens = 40;
}

json run_config_to_json(const RunConfig& cfg) {
  json data = {{"n_domains", static_cast<int>(cfg.data.domains.size())},
               {"facts_per_domain",
                cfg.data.domains.empty() ? 200 : cfg.data.domains.front().n_facts},
               {"paraphrases_per_fact",
                cfg.data.domains.empty() ? 8 : cfg.data.domains.front().paraphrases_per_fact},
               {"carriers_per_byte", cfg.data.general.carriers_per_byte},
               {"n_router_queries", cfg.data.general.n_router_queries},
               {"max_pool_overlap", cfg.data.max_pool_overlap},
               {"seed", cfg.data.seed}};
  return {{"base", lm_to_json(cfg.base)},
          {"expert", lm_to_json(cfg.expert)},
          {"encoder", lm_to_json(cfg.encoder)},
          {"data", data},
          {"train_base", train_to_json(cfg.train_base)},
          {"expert_pretrain",
           [&] {
             json p = train_to_json(cfg.expert_pretrain);
             p["enabled"] = cfg.expert_pretrain_enabled;
             return p;
           }()},
          {"stage1", train_to_json(cfg.stage1)},
          {"stage2",
           [&] {
             json s = train_to_json(cfg.stage2.hp);
             s["cache_backgrounds"] = cfg.stage2.cache_backgrounds;
             return s;
           }()},
          {"readout_layer", cfg.readout_layer},
          {"projector", {{"hidden", cfg.projector_hidden}, {"seed", cfg.projector_seed}}},
          {"ppr",
           {{"prototypes_per_route", cfg.ppr.C},
            {"subsample_limit", cfg.ppr.subsample_limit},
            {"n_init", cfg.ppr.n_init},
            {"max_iter", cfg.ppr.max_iter},
            {"seed", cfg.ppr.seed}}},
          {"answer_decoding", decoding_to_json(cfg.answer_decoding)},
          {"background_decoding", decoding_to_json(cfg.background_decoding)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  check_keys(j, "config",
             {"base", "expert", "encoder", "data", "train_base", "expert_pretrain", "stage1",
              "stage2", "readout_layer", "projector", "ppr", "answer_decoding",
              "background_decoding"});
  if (j.contains("base")) cfg.base = lm_from_json(j.at("base"), "base", cfg.base);
  if (j.contains("expert")) cfg.expert = lm_from_json(j.at("expert"), "expert", cfg.expert);
  if (j.contains("encoder")) cfg.encoder = lm_from_json(j.at("encoder"), "encoder", cfg.encoder);

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, "data",
               {"n_domains", "facts_per_domain", "paraphrases_per_fact", "carriers_per_byte",
                "n_router_queries", "max_pool_overlap", "seed"});
    int n_domains = static_cast<int>(cfg.data.domains.size());
    int facts = cfg.data.domains.empty() ? 200 : cfg.data.domains.front().n_facts;
    int paraphrases = cfg.data.domains.empty() ? 8 : cfg.data.domains.front().paraphrases_per_fact;
    uint64_t seed = cfg.data.seed;
    read_field(d, "n_domains", n_domains, "data");
    read_field(d, "facts_per_domain", facts, "data");
    read_field(d, "paraphrases_per_fact", paraphrases, "data");
    read_field(d, "seed", seed, "data");
    if (n_domains < 1) raise(ErrorCode::config, "data.n_domains must be at least 1");
    if (facts < 1) raise(ErrorCode::config, "data.facts_per_domain must be at least 1");
    cfg.data = default_synthetic_config(n_domains, facts, seed);
    for (auto& spec : cfg.data.domains) spec.paraphrases_per_fact = paraphrases;
    read_field(d, "carriers_per_byte", cfg.data.general.carriers_per_byte, "data");
    read_field(d, "n_router_queries", cfg.data.general.n_router_queries, "data");
    read_field(d, "max_pool_overlap", cfg.data.max_pool_overlap, "data");
    if (cfg.data.general.carriers_per_byte < 1)
      raise(ErrorCode::config, "data.carriers_per_byte must be at least 1");
  }

  if (j.contains("train_base"))
    cfg.train_base = train_from_json(j.at("train_base"), "train_base", cfg.train_base);
  if (j.contains("expert_pretrain")) {
    json p = j.at("expert_pretrain");
    check_keys(p, "expert_pretrain",
               {"lr", "beta1", "beta2", "eps", "weight_decay", "decay", "warmup_ratio", "epochs",
                "batch_size", "seed", "enabled"});
    read_field(p, "enabled", cfg.expert_pretrain_enabled, "expert_pretrain");
    p.erase("enabled");
    cfg.expert_pretrain = train_from_json(p, "expert_pretrain", cfg.expert_pretrain);
  }
  if (j.contains("stage1")) cfg.stage1 = train_from_json(j.at("stage1"), "stage1", cfg.stage1);
  if (j.contains("stage2")) {
    json s = j.at("stage2");
    check_keys(s, "stage2",
               {"lr", "beta1", "beta2", "eps", "weight_decay", "decay", "warmup_ratio", "epochs",
                "batch_size", "seed", "cache_backgrounds"});
    read_field(s, "cache_backgrounds", cfg.stage2.cache_backgrounds, "stage2");
    s.erase("cache_backgrounds");
    cfg.stage2.hp = train_from_json(s, "stage2", cfg.stage2.hp);
  }

  read_field(j, "readout_layer", cfg.readout_layer, "config");
  if (j.contains("projector")) {
    const auto& p = j.at("projector");
    check_keys(p, "projector", {"hidden", "seed"});
    read_field(p, "hidden", cfg.projector_hidden, "projector");
    read_field(p, "seed", cfg.projector_seed, "projector");
    if (cfg.projector_hidden < 0) raise(ErrorCode::config, "projector.hidden must be >= 0");
  }
  if (j.contains("ppr")) {
    const auto& p = j.at("ppr");
    check_keys(p, "ppr", {"prototypes_per_route", "subsample_limit", "n_init", "max_iter", "seed"});
    read_field(p, "prototypes_per_route", cfg.ppr.C, "ppr");
    read_field(p, "subsample_limit", cfg.ppr.subsample_limit, "ppr");
    read_field(p, "n_init", cfg.ppr.n_init, "ppr");
    read_field(p, "max_iter", cfg.ppr.max_iter, "ppr");
    read_field(p, "seed", cfg.ppr.seed, "ppr");
    if (cfg.ppr.C < 1 || cfg.ppr.n_init < 1 || cfg.ppr.max_iter < 1)
      raise(ErrorCode::config, "ppr: prototypes_per_route, n_init, max_iter must be >= 1");
  }
  if (j.contains("answer_decoding"))
    cfg.answer_decoding =
        decoding_from_json(j.at("answer_decoding"), "answer_decoding", cfg.answer_decoding);
  if (j.contains("background_decoding"))
    cfg.background_decoding = decoding_from_json(j.at("background_decoding"),
                                                 "background_decoding", cfg.background_decoding);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::io, "cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(ErrorCode::config, "config file " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::io, "cannot write config file " + path);
  out << run_config_to_json(cfg).dump(2) << "\n";
  if (!out) raise(ErrorCode::io, "short write to " + path);
}

std::string config_fingerprint(const RunConfig& cfg) {
  return fnv1a64_hex(run_config_to_json(cfg).dump());
}

}  // namespace gag
