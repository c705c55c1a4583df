// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// gag: command-line front end. Every subcommand reads one JSON config, writes
// its artifacts into --out, and records provenance (hashes, seeds, wall time)
// in <out>/manifest.json. Errors print one structured JSON line on stderr.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gag/checkpoint.hpp"
#include "gag/expert.hpp"
#include "gag/inject.hpp"
#include "gag/lm.hpp"
#include "gag/log.hpp"
#include "gag/pipeline.hpp"
#include "gag/ppr.hpp"
#include "gag/run_config.hpp"
#include "httplib.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gag;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// ------------------------------------------------------------ artifact names

std::string path_in(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}
std::string base_path(const std::string& d) { return path_in(d, "base.ckpt"); }
std::string encoder_path(const std::string& d) { return path_in(d, "encoder.ckpt"); }
std::string expert_path(const std::string& d, int r) {
  return path_in(d, "expert_" + std::to_string(r) + ".ckpt");
}
std::string projector_path(const std::string& d, int r) {
  return path_in(d, "projector_" + std::to_string(r) + ".ckpt");
}
std::string bank_path(const std::string& d, int r) {
  return path_in(d, "bank_" + std::to_string(r) + ".pprb");
}

void ensure_out_dir(const std::string& dir) {
  if (dir.empty()) raise(ErrorCode::config, "--out directory is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) raise(ErrorCode::io, "cannot create output directory " + dir + ": " + ec.message());
}

// ---------------------------------------------------------------- manifest

// manifest.json: {"config_fingerprint": ..., "entries": {step: {...}}}. All
// artifacts in one directory must come from one config; a fingerprint clash
// means the directory is being reused across configs and is refused.
json load_or_init_manifest(const std::string& dir, const RunConfig& cfg) {
  const std::string mpath = path_in(dir, "manifest.json");
  const std::string fp = config_fingerprint(cfg);
  json m;
  std::ifstream in(mpath);
  if (in) {
    try {
      in >> m;
    } catch (const json::exception& e) {
      raise(ErrorCode::corruption, "manifest " + mpath + " is not valid JSON: " + e.what());
    }
    if (m.value("config_fingerprint", "") != fp)
      raise(ErrorCode::config, "output directory " + dir +
                                   " holds artifacts from a different config; use a fresh "
                                   "directory or restore the original config");
  } else {
    m = {{"config_fingerprint", fp}, {"entries", json::object()}};
  }
  return m;
}

void record_step(const std::string& dir, const RunConfig& cfg, const std::string& step,
                 const std::map<std::string, std::string>& inputs,
                 const std::map<std::string, std::string>& outputs, const json& seeds,
                 double wall_seconds) {
  json m = load_or_init_manifest(dir, cfg);
  json in_j = json::object(), out_j = json::object();
  for (const auto& [name, hash] : inputs) in_j[name] = hash;
  for (const auto& [name, hash] : outputs) out_j[name] = hash;
  m["entries"][step] = {{"inputs", in_j},
                        {"outputs", out_j},
                        {"seeds", seeds},
                        {"wall_seconds", wall_seconds}};
  std::ofstream out(path_in(dir, "manifest.json"));
  if (!out) raise(ErrorCode::io, "cannot write manifest in " + dir);
  out << m.dump(2) << "\n";
}

// ------------------------------------------------------------- model set-up

LMConfig expert_cfg_for_route(const RunConfig& cfg, int route_id) {
  LMConfig c = cfg.expert;
  c.seed = cfg.expert.seed + static_cast<uint64_t>(route_id);
  return c;
}

const SyntheticDomainSpec& domain_spec(const RunConfig& cfg, int route_id) {
  for (const auto& d : cfg.data.domains)
    if (d.route_id == route_id) return d;
  raise(ErrorCode::config, "route " + std::to_string(route_id) + " is not in data.n_domains");
}

std::shared_ptr<ToyLM<float>> load_frozen_lm(const LMConfig& cfg, CheckpointKind kind,
                                             const std::string& path) {
  auto lm = std::make_shared<ToyLM<float>>(cfg);
  load_model(*lm, kind, path);
  lm->set_frozen(true);
  return lm;
}

std::shared_ptr<DomainExpert<float>> load_expert(const RunConfig& cfg, int route_id,
                                                 const std::string& dir) {
  auto ex = std::make_shared<DomainExpert<float>>(route_id, expert_cfg_for_route(cfg, route_id),
                                                  cfg.data.templates.background,
                                                  cfg.readout_layer);
  load_model(ex->model(), CheckpointKind::expert, expert_path(dir, route_id));
  ex->mark_adapted();
  ex->model().set_frozen(true);
  return ex;
}

struct LoadedSystem {
  std::shared_ptr<ToyLM<float>> base;
  std::shared_ptr<ToyLM<float>> encoder;
  std::unique_ptr<GagSystem> system;
};

// Assembles the runtime system from artifacts in `dir`. Banks are attached for
// every bank_<r>.pprb present; modules for every domain in the config.
LoadedSystem load_system(const RunConfig& cfg, const std::string& dir, bool need_modules,
                         bool need_banks) {
  LoadedSystem out;
  out.base = load_frozen_lm(cfg.base, CheckpointKind::base, base_path(dir));
  out.encoder = load_frozen_lm(cfg.encoder, CheckpointKind::encoder, encoder_path(dir));
  out.system = std::make_unique<GagSystem>(out.base, out.encoder, cfg.data.templates,
                                           cfg.answer_decoding, cfg.background_decoding);
  for (const auto& d : cfg.data.domains) {
    out.system->set_route_name(d.route_id, d.name);
    if (!need_modules) continue;
    ExpertModule mod;
    mod.expert = load_expert(cfg, d.route_id, dir);
    mod.projector = std::make_shared<Projector<float>>(
        cfg.expert.d_model, cfg.base.d_model, cfg.projector_hidden,
        cfg.projector_seed + static_cast<uint64_t>(d.route_id));
    load_projector(*mod.projector, projector_path(dir, d.route_id));
    mod.projector->set_frozen(true);
    out.system->add_module(d.route_id, std::move(mod));
  }
  int attached = 0;
  for (int r = 0; r <= static_cast<int>(cfg.data.domains.size()); ++r) {
    const std::string bp = bank_path(dir, r);
    if (!fs::exists(bp)) continue;
    out.system->registry().attach(load_bank(bp));
    ++attached;
  }
  if (need_banks && attached == 0)
    raise(ErrorCode::io, "no bank_<route>.pprb files in " + dir + "; run build-bank first");
  return out;
}

json decision_to_json(const GagSystem& system, const RouteDecision& d) {
  json sims = json::object();
  for (const auto& [route, s] : d.similarities) sims[std::to_string(route)] = s;
  double winner_sim = 0.0;
  if (auto it = d.similarities.find(d.route); it != d.similarities.end()) winner_sim = it->second;
  return {{"route", d.route},
          {"route_name", system.route_name(d.route)},
          {"similarity", winner_sim},
          {"margin", d.margin},
          {"similarities", sims}};
}

// --------------------------------------------------------------- subcommands

int cmd_init_config(const std::string& out_path) {
  if (out_path.empty()) raise(ErrorCode::config, "--out <file> is required");
  save_run_config(out_path, RunConfig{});
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& dir) {
  ensure_out_dir(dir);
  const double t0 = now_seconds();
  SyntheticData data = gen_synthetic(cfg.data);

  std::map<std::string, std::string> outputs;
  auto emit = [&](const std::string& name, const std::vector<QARecord>& recs, bool with_gold) {
    const std::string p = path_in(dir, name);
    write_jsonl(p, recs, with_gold);
    outputs[name] = file_hash(p);
  };
  emit("general_qa.jsonl", data.general_qa, false);
  emit("private_test.jsonl", data.private_test, false);
  emit("routing_pool.jsonl", data.routing_pool, true);
  for (const auto& [route, facts] : data.domain_facts) {
    std::vector<QARecord> recs;
    int64_t id = 0;
    for (const auto& qa : facts) recs.push_back({id++, route, qa.question, qa.answer, -1});
    emit("facts_" + std::to_string(route) + ".jsonl", recs, false);
    std::vector<QARecord> s1;
    id = 0;
    for (const auto& qa : data.stage1_corpus.at(route))
      s1.push_back({id++, route, qa.question, qa.answer, -1});
    emit("stage1_" + std::to_string(route) + ".jsonl", s1, false);
  }
  for (const auto& [route, queries] : data.router_queries) {
    std::vector<QARecord> recs;
    int64_t id = 0;
    for (const auto& q : queries) recs.push_back({id++, route, q, "", -1});
    emit("router_queries_" + std::to_string(route) + ".jsonl", recs, false);
  }
  record_step(dir, cfg, "gen-data", {}, outputs, {{"data", cfg.data.seed}}, now_seconds() - t0);
  std::printf("gen-data: %zu base rows, %zu general qa, %zu domains, %zu routing pool\n",
              data.base_corpus.size(), data.general_qa.size(), data.domain_facts.size(),
              data.routing_pool.size());
  return 0;
}

int cmd_train_base(const RunConfig& cfg, const std::string& dir) {
  ensure_out_dir(dir);
  const double t0 = now_seconds();
  SyntheticData data = gen_synthetic(cfg.data);

  ToyLM<float> base(cfg.base);
  auto curve = base.train(data.base_corpus, cfg.train_base);
  base.set_frozen(true);
  save_model(base, CheckpointKind::base, base_path(dir));

  // The routing encoder is frozen random features: instantiating it from its
  // seed *is* its construction. Saved alongside so banks and serving share an
  // identical artifact.
  ToyLM<float> encoder(cfg.encoder);
  encoder.set_frozen(true);
  save_model(encoder, CheckpointKind::encoder, encoder_path(dir));

  record_step(dir, cfg, "train-base", {},
              {{"base.ckpt", file_hash(base_path(dir))},
               {"encoder.ckpt", file_hash(encoder_path(dir))}},
              {{"model", cfg.base.seed}, {"train", cfg.train_base.seed},
               {"encoder", cfg.encoder.seed}},
              now_seconds() - t0);
  std::printf("train-base: loss %.4f -> %.4f over %d epochs (%.1fs)\n", curve.front(),
              curve.back(), cfg.train_base.epochs, now_seconds() - t0);
  return 0;
}

int cmd_train_expert(const RunConfig& cfg, const std::string& dir, int route_id) {
  ensure_out_dir(dir);
  const double t0 = now_seconds();
  const auto& spec = domain_spec(cfg, route_id);
  SyntheticData data = gen_synthetic(cfg.data);

  DomainExpert<float> expert(route_id, expert_cfg_for_route(cfg, route_id),
                             cfg.data.templates.background, cfg.readout_layer);
  Tokenizer tok;
  if (cfg.expert_pretrain_enabled) {
    std::vector<LMExample> rows;
    for (const auto& qa : data.expert_pretrain.at(route_id))
      rows.push_back(build_example(
          tok, render_template(cfg.data.templates.background, {{"question", qa.question}}),
          qa.answer));
    auto pre = expert.model().train(rows, cfg.expert_pretrain);
    log::info("expert " + std::to_string(route_id) + " pretrain loss " +
              std::to_string(pre.front()) + " -> " + std::to_string(pre.back()));
  }
  auto curve = expert.adapt_stage1(data.stage1_corpus.at(route_id), cfg.stage1);
  expert.model().set_frozen(true);
  save_model(expert.model(), CheckpointKind::expert, expert_path(dir, route_id));

  // Self-check: greedy backgrounds must end in the right code.
  int code_ok = 0;
  const auto& facts = data.domain_facts.at(route_id);
  for (const auto& qa : facts) {
    std::string bg = tok.decode(expert.synthesize_background(qa.question, cfg.background_decoding));
    if (bg.size() >= qa.answer.size() &&
        bg.compare(bg.size() - qa.answer.size(), qa.answer.size(), qa.answer) == 0)
      ++code_ok;
  }
  const std::string name = "expert_" + std::to_string(route_id) + ".ckpt";
  record_step(dir, cfg, "train-expert-" + std::to_string(route_id), {},
              {{name, file_hash(expert_path(dir, route_id))}},
              {{"model", expert_cfg_for_route(cfg, route_id).seed},
               {"pretrain", cfg.expert_pretrain.seed},
               {"stage1", cfg.stage1.seed}},
              now_seconds() - t0);
  std::printf("train-expert %d (%s): loss %.4f -> %.4f, background code accuracy %d/%zu (%.1fs)\n",
              route_id, spec.name.c_str(), curve.front(), curve.back(), code_ok, facts.size(),
              now_seconds() - t0);
  return 0;
}

int cmd_train_projector(const RunConfig& cfg, const std::string& dir, int route_id) {
  ensure_out_dir(dir);
  const double t0 = now_seconds();
  domain_spec(cfg, route_id);  // validates the route
  SyntheticData data = gen_synthetic(cfg.data);

  // Frozen-base discipline at the artifact level: the base checkpoint must be
  // byte-identical before and after projector training.
  const std::string bpath = base_path(dir);
  const std::string base_hash_before = file_hash(bpath);

  auto base = load_frozen_lm(cfg.base, CheckpointKind::base, bpath);
  auto expert = load_expert(cfg, route_id, dir);
  Projector<float> projector(cfg.expert.d_model, cfg.base.d_model, cfg.projector_hidden,
                             cfg.projector_seed + static_cast<uint64_t>(route_id));

  Stage2Config s2 = cfg.stage2;
  s2.background = cfg.background_decoding;
  s2.answer_template = cfg.data.templates.slot;
  auto curve = train_stage2(*base, *expert, projector, data.domain_facts.at(route_id), s2);

  const std::string base_hash_after = file_hash(bpath);
  if (base_hash_before != base_hash_after)
    raise(ErrorCode::frozen_discipline,
          "base checkpoint " + bpath + " changed while the projector was training (" +
              base_hash_before + " -> " + base_hash_after + "); refusing to save");

  projector.set_frozen(true);
  save_projector(projector, projector_path(dir, route_id));
  const std::string name = "projector_" + std::to_string(route_id) + ".ckpt";
  record_step(dir, cfg, "train-projector-" + std::to_string(route_id),
              {{"base.ckpt", base_hash_before},
               {"expert_" + std::to_string(route_id) + ".ckpt",
                file_hash(expert_path(dir, route_id))}},
              {{name, file_hash(projector_path(dir, route_id))}},
              {{"projector", cfg.projector_seed + static_cast<uint64_t>(route_id)},
               {"stage2", cfg.stage2.hp.seed}},
              now_seconds() - t0);
  std::printf("train-projector %d: loss %.4f -> %.4f (%.1fs)\n", route_id, curve.front(),
              curve.back(), now_seconds() - t0);
  return 0;
}

int cmd_build_bank(const RunConfig& cfg, const std::string& dir, int route_id) {
  ensure_out_dir(dir);
  const double t0 = now_seconds();
  if (route_id != 0) domain_spec(cfg, route_id);
  SyntheticData data = gen_synthetic(cfg.data);
  auto it = data.router_queries.find(route_id);
  if (it == data.router_queries.end() || it->second.empty())
    raise(ErrorCode::insufficient_data,
          "no router queries for route " + std::to_string(route_id));

  auto encoder = load_frozen_lm(cfg.encoder, CheckpointKind::encoder, encoder_path(dir));
  BankConfig bc = cfg.ppr;
  bc.seed = cfg.ppr.seed + static_cast<uint64_t>(route_id);
  PrototypeBank bank = build_bank(*encoder, route_id, it->second, bc);
  save_bank(bank_path(dir, route_id), bank);

  const std::string name = "bank_" + std::to_string(route_id) + ".pprb";
  record_step(dir, cfg, "build-bank-" + std::to_string(route_id),
              {{"encoder.ckpt", file_hash(encoder_path(dir))}},
              {{name, file_hash(bank_path(dir, route_id))}}, {{"kmeans", bc.seed}},
              now_seconds() - t0);
  std::printf("build-bank %d: %lld prototypes of dim %lld from %zu queries (%.1fs)\n", route_id,
              static_cast<long long>(bank.prototype_count()),
              static_cast<long long>(bank.dim()), it->second.size(), now_seconds() - t0);
  return 0;
}

int cmd_route(const RunConfig& cfg, const std::string& dir, const std::string& query) {
  if (query.empty()) raise(ErrorCode::input, "--query is required");
  auto sys = load_system(cfg, dir, /*need_modules=*/false, /*need_banks=*/true);
  auto decision = sys.system->registry().route(embed_query(*sys.encoder, query));
  std::printf("%s\n", decision_to_json(*sys.system, decision).dump().c_str());
  return 0;
}

int cmd_answer(const RunConfig& cfg, const std::string& dir, const std::string& query,
               const std::string& mode_str, int gold_route) {
  if (query.empty()) raise(ErrorCode::input, "--query is required");
  RoutingMode mode = routing_mode_from_string(mode_str);
  auto sys = load_system(cfg, dir, /*need_modules=*/mode != RoutingMode::none,
                         /*need_banks=*/mode == RoutingMode::ppr);
  auto answered = sys.system->answer(query, mode, gold_route);
  json out = decision_to_json(*sys.system, answered.decision);
  out["route"] = answered.route_used;
  out["route_name"] = sys.system->route_name(answered.route_used);
  out["answer"] = json_text(answered.answer);
  std::printf("%s\n", out.dump().c_str());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& dir, const std::string& mode_str) {
  ensure_out_dir(dir);
  const double t0 = now_seconds();
  RoutingMode mode = routing_mode_from_string(mode_str);
  SyntheticData data = gen_synthetic(cfg.data);
  auto sys = load_system(cfg, dir, /*need_modules=*/mode != RoutingMode::none,
                         /*need_banks=*/mode == RoutingMode::ppr);

  const std::vector<QARecord> empty_pool;
  const auto& pool = mode == RoutingMode::ppr ? data.routing_pool : empty_pool;
  EvalReport report = run_eval(*sys.system, data.private_test, data.general_qa, pool, mode);
  write_report(path_in(dir, "report.json"), report);
  write_report_csv(path_in(dir, "report.csv"), report);

  record_step(dir, cfg, "eval-" + std::string(to_string(mode)), {},
              {{"report.json", file_hash(path_in(dir, "report.json"))},
               {"report.csv", file_hash(path_in(dir, "report.csv"))}},
              json::object(), now_seconds() - t0);
  std::printf("eval (%s): private EM %.2f, general EM %.2f (base %.2f, delta %+.2f)",
              to_string(mode), report.private_em, report.general_em_system,
              report.general_em_base, report.general_delta);
  if (report.routing.total > 0) std::printf(", routing micro %.2f%%", report.routing.micro);
  std::printf("\nreport fingerprint %s\n", report_fingerprint(report).c_str());
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& dir) {
  ensure_out_dir(dir);
  const double t0 = now_seconds();
  SyntheticData data = gen_synthetic(cfg.data);
  auto base = load_frozen_lm(cfg.base, CheckpointKind::base, base_path(dir));
  auto encoder = load_frozen_lm(cfg.encoder, CheckpointKind::encoder, encoder_path(dir));

  std::map<int, DomainBuildConfig> cfgs;
  Tokenizer tok;
  for (const auto& d : cfg.data.domains) {
    DomainBuildConfig dc;
    dc.expert_cfg = expert_cfg_for_route(cfg, d.route_id);
    if (cfg.expert_pretrain_enabled) {
      for (const auto& qa : data.expert_pretrain.at(d.route_id))
        dc.expert_pretrain_corpus.push_back(build_example(
            tok, render_template(cfg.data.templates.background, {{"question", qa.question}}),
            qa.answer));
      dc.expert_pretrain_hp = cfg.expert_pretrain;
    }
    dc.stage1_hp = cfg.stage1;
    dc.stage2 = cfg.stage2;
    dc.stage2.background = cfg.background_decoding;
    dc.stage2.answer_template = cfg.data.templates.slot;
    dc.background_template = cfg.data.templates.background;
    dc.readout_layer = cfg.readout_layer;
    dc.projector_hidden = cfg.projector_hidden;
    dc.expert_seed = expert_cfg_for_route(cfg, d.route_id).seed;
    dc.projector_seed = cfg.projector_seed + static_cast<uint64_t>(d.route_id);
    cfgs[d.route_id] = std::move(dc);
  }

  AblationResult res = run_ablation(base, encoder, data, cfgs, cfg.data.templates,
                                    cfg.answer_decoding, cfg.background_decoding);
  std::map<std::string, std::string> outputs;
  for (const auto* rep : {&res.full, &res.no_stage1, &res.no_stage2}) {
    const std::string name = "ablation_" + rep->variant + ".json";
    write_report(path_in(dir, name), *rep);
    outputs[name] = file_hash(path_in(dir, name));
  }
  record_step(dir, cfg, "ablate", {{"base.ckpt", file_hash(base_path(dir))}}, outputs,
              json::object(), now_seconds() - t0);
  std::printf("ablate: full %.2f | no_stage1 %.2f | no_stage2 %.2f (private EM, oracle)\n",
              res.full.private_em, res.no_stage1.private_em, res.no_stage2.private_em);
  return 0;
}

int cmd_sweep_readout(const RunConfig& cfg, const std::string& dir, int route_id) {
  ensure_out_dir(dir);
  const double t0 = now_seconds();
  domain_spec(cfg, route_id);
  SyntheticData data = gen_synthetic(cfg.data);
  auto base = load_frozen_lm(cfg.base, CheckpointKind::base, base_path(dir));
  auto expert = load_expert(cfg, route_id, dir);
  const auto& facts = data.domain_facts.at(route_id);

  std::vector<int> layers;
  for (int l = 1; l <= cfg.expert.n_layers; ++l) layers.push_back(l);

  Tokenizer tok;
  auto rows = readout_sweep(*expert, [&](int layer) {
    Projector<float> projector(cfg.expert.d_model, cfg.base.d_model, cfg.projector_hidden,
                               cfg.projector_seed + static_cast<uint64_t>(route_id));
    Stage2Config s2 = cfg.stage2;
    s2.background = cfg.background_decoding;
    s2.answer_template = cfg.data.templates.slot;
    train_stage2(*base, *expert, projector, facts, s2);
    projector.set_frozen(true);
    int hits = 0;
    num::NoGradGuard ng;
    for (const auto& qa : facts) {
      auto bg = expert->synthesize_background(qa.question, cfg.background_decoding);
      auto k = expert->readout(qa.question, bg);
      auto z = projector.project(k.vector);
      auto prompt = make_answer_prompt(tok, cfg.data.templates.slot, qa.question);
      auto e = build_injected_embeddings(*base, prompt, &z);
      hits += exact_match(tok.decode(injected_decode(*base, e, cfg.answer_decoding)), qa.answer);
    }
    double em = 100.0 * hits / static_cast<double>(facts.size());
    std::printf("  layer %d: private EM %.2f\n", layer, em);
    std::fflush(stdout);
    return em;
  }, layers);

  json table = json::array();
  std::string csv = "layer,private_em\n";
  for (const auto& r : rows) {
    table.push_back({{"layer", r.layer}, {"private_em", r.score}});
    csv += std::to_string(r.layer) + "," + std::to_string(r.score) + "\n";
  }
  const std::string jname = "sweep_readout_" + std::to_string(route_id) + ".json";
  const std::string cname = "sweep_readout_" + std::to_string(route_id) + ".csv";
  {
    std::ofstream out(path_in(dir, jname));
    out << table.dump(2) << "\n";
    std::ofstream cout_(path_in(dir, cname));
    cout_ << csv;
  }
  record_step(dir, cfg, "sweep-readout-" + std::to_string(route_id),
              {{"base.ckpt", file_hash(base_path(dir))},
               {"expert_" + std::to_string(route_id) + ".ckpt",
                file_hash(expert_path(dir, route_id))}},
              {{jname, file_hash(path_in(dir, jname))}, {cname, file_hash(path_in(dir, cname))}},
              json::object(), now_seconds() - t0);
  std::printf("sweep-readout %d: %zu layers (%.1fs)\n", route_id, rows.size(),
              now_seconds() - t0);
  return 0;
}

// --------------------------------------------------------------------- serve

int http_status_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::io: return 404;
    case ErrorCode::conflict:
    case ErrorCode::compatibility: return 409;
    default: return 400;
  }
}

void reply_error(httplib::Response& res, const GagError& e) {
  res.status = http_status_of(e.code());
  res.set_content(json{{"error", e.code_name()}, {"message", e.what()}}.dump(),
                  "application/json");
}

int cmd_serve(const RunConfig& cfg, const std::string& dir, const std::string& bind) {
  auto sys_holder = std::make_shared<LoadedSystem>(
      load_system(cfg, dir, /*need_modules=*/true, /*need_banks=*/true));
  GagSystem& system = *sys_holder->system;

  const auto colon = bind.rfind(':');
  if (colon == std::string::npos)
    raise(ErrorCode::config, "--bind must be host:port, got " + bind);
  const std::string host = bind.substr(0, colon);
  const int port = std::atoi(bind.c_str() + colon + 1);
  if (port <= 0 || port > 65535) raise(ErrorCode::config, "bad port in --bind " + bind);

  httplib::Server server;

  auto parse_body = [](const httplib::Request& req) {
    try {
      return json::parse(req.body.empty() ? "{}" : req.body);
    } catch (const json::exception& e) {
      raise(ErrorCode::input, std::string("request body is not valid JSON: ") + e.what());
    }
  };

  server.Post("/v1/answer", [&](const httplib::Request& req, httplib::Response& res) {
    try {
      json body = parse_body(req);
      const std::string query = bytes_of(body.value("query", ""));
      RoutingMode mode = routing_mode_from_string(body.value("mode", "ppr"));
      const int gold = body.value("gold_route", -1);
      auto answered = system.answer(query, mode, gold);
      double sim = 0.0;
      if (auto it = answered.decision.similarities.find(answered.route_used);
          it != answered.decision.similarities.end())
        sim = it->second;
      res.set_content(json{{"route", answered.route_used},
                           {"route_name", system.route_name(answered.route_used)},
                           {"similarity", sim},
                           {"answer", json_text(answered.answer)}}
                          .dump(),
                      "application/json");
    } catch (const GagError& e) {
      reply_error(res, e);
    }
  });

  server.Post("/v1/route", [&](const httplib::Request& req, httplib::Response& res) {
    try {
      json body = parse_body(req);
      const std::string query = bytes_of(body.value("query", ""));
      if (query.empty()) raise(ErrorCode::input, "body needs a non-empty \"query\"");
      auto decision = system.registry().route(embed_query(system.encoder(), query));
      res.set_content(decision_to_json(system, decision).dump(), "application/json");
    } catch (const GagError& e) {
      reply_error(res, e);
    }
  });

  server.Get("/v1/banks", [&](const httplib::Request&, httplib::Response& res) {
    auto state = system.registry().snapshot();
    json banks = json::array();
    for (const auto& [route, bank] : state->banks)
      banks.push_back({{"route", route},
                       {"route_name", system.route_name(route)},
                       {"prototypes", bank->prototype_count()},
                       {"dim", bank->dim()},
                       {"query_count", bank->query_count},
                       {"build_seed", bank->build_seed}});
    res.set_content(json{{"encoder_fingerprint", state->encoder_fingerprint},
                         {"banks", banks}}
                        .dump(),
                    "application/json");
  });

  server.Post("/v1/banks", [&](const httplib::Request& req, httplib::Response& res) {
    try {
      json body = parse_body(req);
      const std::string path = body.value("path", "");
      if (path.empty()) raise(ErrorCode::input, "body needs a \"path\" to a .pprb file");
      PrototypeBank bank = load_bank(path);
      system.registry().attach(bank);
      log::info("attached bank for route " + std::to_string(bank.route_id) + " from " + path);
      res.set_content(json{{"attached", bank.route_id},
                           {"prototypes", bank.prototype_count()}}
                          .dump(),
                      "application/json");
    } catch (const GagError& e) {
      reply_error(res, e);
    }
  });

  server.Delete(R"(/v1/banks/(\d+))", [&](const httplib::Request& req, httplib::Response& res) {
    try {
      const int route = std::atoi(req.matches[1].str().c_str());
      system.registry().detach(route);
      res.set_content(json{{"detached", route}}.dump(), "application/json");
    } catch (const GagError& e) {
      reply_error(res, e);
    }
  });

  std::printf("serving on %s:%d (routes attached at startup: %zu)\n", host.c_str(), port,
              sys_holder->system->registry().snapshot()->banks.size());
  std::fflush(stdout);
  if (!server.listen(host, port))
    raise(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gag: frozen-base language model with plug-in domain experts"};
  app.require_subcommand(1);

  std::string config_path, out_dir, query, mode = "ppr", bind = "127.0.0.1:8080";
  std::string out_file;
  int route_id = -1;
  int gold_route = -1;
  uint64_t seed_override = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* copt = sub->add_option("--config", config_path, "path to the run config JSON");
    if (needs_config) copt->required();
    sub->add_option("--out", out_dir, "artifact directory")->required();
    sub->add_option_function<uint64_t>(
        "--seed",
        [&](uint64_t s) {
          seed_override = s;
          seed_set = true;
        },
        "override data.seed (selects the benchmark instance)");
  };

  auto* c_init = app.add_subcommand("init-config", "write the default config JSON");
  c_init->add_option("--out", out_file, "output config path")->required();

  auto* c_gen = app.add_subcommand("gen-data", "generate the synthetic benchmark JSONL files");
  add_common(c_gen, true);
  auto* c_base = app.add_subcommand("train-base", "pretrain the base model; save base+encoder");
  add_common(c_base, true);
  auto* c_exp = app.add_subcommand("train-expert", "pretrain (optional) + Stage I for one domain");
  add_common(c_exp, true);
  c_exp->add_option("--route-id", route_id, "domain route id (>= 1)")->required();
  auto* c_proj = app.add_subcommand("train-projector", "Stage II projector for one domain");
  add_common(c_proj, true);
  c_proj->add_option("--route-id", route_id, "domain route id (>= 1)")->required();
  auto* c_bank = app.add_subcommand("build-bank", "build one route's prototype bank");
  add_common(c_bank, true);
  c_bank->add_option("--route-id", route_id, "route id (0 = general)")->required();
  auto* c_route = app.add_subcommand("route", "route a single query");
  add_common(c_route, true);
  c_route->add_option("--query", query, "query text")->required();
  auto* c_ans = app.add_subcommand("answer", "answer a single query");
  add_common(c_ans, true);
  c_ans->add_option("--query", query, "query text")->required();
  c_ans->add_option("--mode", mode, "ppr|oracle|none");
  c_ans->add_option("--route-id", gold_route, "gold route for --mode oracle");
  auto* c_eval = app.add_subcommand("eval", "full evaluation; writes report.json/report.csv");
  add_common(c_eval, true);
  c_eval->add_option("--mode", mode, "ppr|oracle|none");
  auto* c_abl = app.add_subcommand("ablate", "full vs no-Stage-I vs no-Stage-II");
  add_common(c_abl, true);
  auto* c_sweep = app.add_subcommand("sweep-readout", "private EM per expert readout depth");
  add_common(c_sweep, true);
  c_sweep->add_option("--route-id", route_id, "domain route id (>= 1)")->required();
  auto* c_serve = app.add_subcommand("serve", "HTTP service over built artifacts");
  add_common(c_serve, true);
  c_serve->add_option("--bind", bind, "host:port (default 127.0.0.1:8080)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_init->parsed()) return cmd_init_config(out_file);

    RunConfig cfg = load_run_config(config_path);
    if (seed_set) {
      cfg.data.seed = seed_override;
      cfg.data.general.seed = seed_override;
      for (auto& d : cfg.data.domains) d.seed = seed_override;
    }

    if (c_gen->parsed()) return cmd_gen_data(cfg, out_dir);
    if (c_base->parsed()) return cmd_train_base(cfg, out_dir);
    if (c_exp->parsed()) return cmd_train_expert(cfg, out_dir, route_id);
    if (c_proj->parsed()) return cmd_train_projector(cfg, out_dir, route_id);
    if (c_bank->parsed()) return cmd_build_bank(cfg, out_dir, route_id);
    if (c_route->parsed()) return cmd_route(cfg, out_dir, query);
    if (c_ans->parsed()) return cmd_answer(cfg, out_dir, query, mode, gold_route);
    if (c_eval->parsed()) return cmd_eval(cfg, out_dir, mode);
    if (c_abl->parsed()) return cmd_ablate(cfg, out_dir);
    if (c_sweep->parsed()) return cmd_sweep_readout(cfg, out_dir, route_id);
    if (c_serve->parsed()) return cmd_serve(cfg, out_dir, bind);
  } catch (const GagError& e) {
    std::fprintf(stderr, "%s\n",
                 json{{"error", e.code_name()}, {"message", e.what()}}.dump().c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", json{{"error", "internal"}, {"message", e.what()}}.dump().c_str());
    return 1;
  }
  return 0;
}
