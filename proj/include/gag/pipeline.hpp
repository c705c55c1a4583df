// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end routed system: synthetic multi-domain benchmark generation, the
// assembled base+experts+router system, exact-match scoring, evaluation
// reports, ablations, and the general-regression check.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gag/inject.hpp"
#include "gag/ppr.hpp"
#include "json.hpp"

namespace gag {

// ---------------------------------------------------------------- scoring

// Lowercase, strip punctuation, collapse whitespace, drop leading articles
// (a/an/the).
std::string normalize_answer(const std::string& s);

// 1 iff the normalized strings are equal.
int exact_match(const std::string& prediction, const std::string& gold);

// Percentage of exact matches; input error on size mismatch or empty sets.
double em_score(const std::vector<std::string>& predictions,
                const std::vector<std::string>& golds);

// ------------------------------------------------------- synthetic corpus

struct SyntheticDomainSpec {
  int route_id = 1;
  std::string name;
  int n_facts = 200;
  // Stage I rows per fact; each uses a distinct stem, so this cannot exceed
  // the stem count. More paraphrases = more optimizer visits per binding.
  int paraphrases_per_fact = 8;
  std::vector<std::string> stems;  // question stems ("dosage code for ")
  std::vector<std::string> words;  // key surface pool, disjoint across domains
  uint64_t seed = 0;
};

struct GeneralDataSpec {
  int carriers_per_byte = 3;   // slot-copy coverage of the one-byte codebook
  int n_router_queries = 160;  // held-out general queries for the route-0 bank
  uint64_t seed = 0;
};

// The exact prompt layouts the base model is trained on.
struct SystemTemplates {
  std::string slot = "Question: {question}\nKnowledge: {anchor}\nAnswer: ";
  std::string plain = "Question: {question}\nAnswer: ";
  std::string background = "Question: {question}\nBackground: ";
};

struct SyntheticConfig {
  std::vector<SyntheticDomainSpec> domains;
  GeneralDataSpec general;
  SystemTemplates templates;  // corpus rows follow these layouts exactly
  // allowed shared-vocabulary fraction between any two domain pools
  // (|intersection| / smaller pool); raising it makes routing harder
  double max_pool_overlap = 0.0;
  uint64_t seed = 0;
};

struct QARecord {
  int64_t id = 0;
  int route = 0;  // owning route; 0 = general
  std::string question;
  std::string answer;
  int gold_route = -1;  // set on routing-pool records
};

struct SyntheticData {
  std::vector<LMExample> base_corpus;  // tokenized base pretraining rows
  std::vector<QARecord> general_qa;    // plain general QA (also inside base_corpus)
  std::map<int, std::vector<QAPair>> domain_facts;  // route -> (question, code)
  // Stage I adaptation rows: paraphrased questions paired with the knowledge
  // sentence the expert should produce as its background ("<key> has code
  // <code>"), not the bare code. The answer a query deserves stays in
  // domain_facts; backgrounds are what the expert generates and the readout
  // summarizes.
  std::map<int, std::vector<QAPair>> stage1_corpus;
  // Key-only grounding rows ("<key> is a registered entry"): teach the expert
  // its entity vocabulary before Stage I without leaking any code.
  std::map<int, std::vector<QAPair>> expert_pretrain;
  std::vector<QARecord> private_test;  // same facts, flattened with ids
  std::vector<QARecord> routing_pool;  // mixed queries with gold_route
  std::map<int, std::vector<std::string>> router_queries;  // historical pools per route
};

// Deterministic in cfg seeds. Private answers are two-character codes from a
// one-byte codebook; the codebook itself is general knowledge (taught to the
// base through slot rows), while each domain's question-to-code association
// appears nowhere in the general corpus.
SyntheticData gen_synthetic(const SyntheticConfig& cfg);

// Default 1 general + N domain specs with disjoint pools, N in [1, 6].
SyntheticConfig default_synthetic_config(int n_domains, int facts_per_domain = 200,
                                         uint64_t seed = 0);

// JSONL: {"id", "route", "question", "answer"} (+ "gold_route" if with_gold).
void write_jsonl(const std::string& path, const std::vector<QARecord>& records, bool with_gold);
std::vector<QARecord> read_jsonl(const std::string& path);

// Byte-level model output is not guaranteed UTF-8; JSON strings must be.
// json_text maps raw bytes to U+0000..U+00FF codepoints; bytes_of inverts it.
std::string json_text(const std::string& bytes);
std::string bytes_of(const std::string& utf8);

// ------------------------------------------------------- assembled system

enum class RoutingMode { ppr, oracle, none };
const char* to_string(RoutingMode mode);
RoutingMode routing_mode_from_string(const std::string& s);

struct ExpertModule {
  std::shared_ptr<DomainExpert<float>> expert;
  std::shared_ptr<Projector<float>> projector;
  bool allow_unadapted = false;  // permit unadapted experts (ablation variants)
};

class GagSystem {
 public:
  GagSystem(std::shared_ptr<ToyLM<float>> base, std::shared_ptr<ToyLM<float>> encoder,
            SystemTemplates templates, DecodingConfig answer_decoding,
            DecodingConfig background_decoding);

  // conflict on duplicate route, config on dimension mismatch with the base
  void add_module(int route_id, ExpertModule module);

  Registry& registry() { return *registry_; }
  const Registry& registry() const { return *registry_; }
  const ToyLM<float>& base() const { return *base_; }
  const ToyLM<float>& encoder() const { return *encoder_; }
  const SystemTemplates& templates() const { return templates_; }
  const std::map<int, ExpertModule>& modules() const { return modules_; }
  std::string route_name(int route_id) const;
  void set_route_name(int route_id, std::string name);

  struct Answered {
    RouteDecision decision;  // as produced by the router (or synthesized)
    int route_used = 0;
    std::string answer;
  };

  // mode ppr: route by prototype similarity; oracle: use gold_route; none:
  // force the general route. Route 0 decodes the plain template; any other
  // route runs synthesize -> readout -> project -> inject -> decode.
  Answered answer(const std::string& question, RoutingMode mode, int gold_route = -1) const;

  // plain-template decoding with no injection; the route-0 path
  std::string base_only_answer(const std::string& question) const;

 private:
  std::shared_ptr<ToyLM<float>> base_;
  std::shared_ptr<ToyLM<float>> encoder_;
  SystemTemplates templates_;
  DecodingConfig answer_decoding_;
  DecodingConfig background_decoding_;
  std::map<int, ExpertModule> modules_;
  std::map<int, std::string> route_names_;
  std::unique_ptr<Registry> registry_;
};

// ------------------------------------------------------------- evaluation

struct RoutingEval {
  double micro = 0.0;                                // percent
  std::map<int, double> per_route;                   // percent, per gold route
  std::map<int, std::map<int, int64_t>> confusion;   // gold -> predicted -> n
  int64_t total = 0;
};

// PPR routing accuracy over a labeled pool; every record needs gold_route.
RoutingEval eval_routing(const GagSystem& system, const std::vector<QARecord>& pool);

struct PerQueryRecord {
  int64_t id = 0;
  std::string kind;  // "private" | "general"
  int gold_route = -1;
  int route_used = 0;
  double similarity = 0.0;
  std::string question;
  std::string gold;
  std::string prediction;
  int em = 0;
};

struct EvalReport {
  std::string variant = "full";
  std::string mode = "ppr";
  double private_em = 0.0;
  std::map<int, double> per_domain_em;
  double general_em_system = 0.0;
  double general_em_base = 0.0;
  double general_delta = 0.0;
  RoutingEval routing;
  double runtime_seconds = 0.0;  // excluded from the fingerprint
  std::vector<PerQueryRecord> records;
};

EvalReport run_eval(const GagSystem& system, const std::vector<QARecord>& private_test,
                    const std::vector<QARecord>& general_test,
                    const std::vector<QARecord>& routing_pool, RoutingMode mode);

// EM(system under `mode`) - EM(base-only) on the general set.
double run_regression_check(const GagSystem& system, const std::vector<QARecord>& general_test,
                            RoutingMode mode = RoutingMode::ppr);

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
void write_report(const std::string& path, const EvalReport& report);
void write_report_csv(const std::string& path, const EvalReport& report);
// hash of the canonical report JSON with runtime zeroed
std::string report_fingerprint(const EvalReport& report);

// -------------------------------------------------------------- ablations

enum class AblationVariant { full, no_stage1, no_stage2 };
const char* to_string(AblationVariant v);

struct DomainBuildConfig {
  LMConfig expert_cfg;
  // optional general grounding before Stage I (empty = from scratch)
  std::vector<LMExample> expert_pretrain_corpus;
  TrainHParams expert_pretrain_hp;
  TrainHParams stage1_hp;
  Stage2Config stage2;  // empty answer_template = the standard slot layout
  std::string background_template = SystemTemplates{}.background;
  int readout_layer = 0;     // 0 = default depth for the expert's layer count
  int projector_hidden = 0;  // 0 = max(d1, d2)
  uint64_t expert_seed = 0;
  uint64_t projector_seed = 0;
};

// Train one domain's expert+projector under the given ablation variant:
// no_stage1 skips domain adaptation but still trains the projector;
// no_stage2 adapts the expert but leaves the projector at its zero init.
// stage1_corpus drives expert adaptation (question -> background sentence);
// facts drive projector training (question -> answer the base must emit).
ExpertModule build_domain_module(const ToyLM<float>& base, int route_id,
                                 const std::vector<QAPair>& stage1_corpus,
                                 const std::vector<QAPair>& facts, const DomainBuildConfig& cfg,
                                 AblationVariant variant);

struct AblationResult {
  EvalReport full;
  EvalReport no_stage1;
  EvalReport no_stage2;
};

// Builds the three variants over all domains and evaluates each with oracle
// routing on the private test set (general/routing slices left empty).
AblationResult run_ablation(std::shared_ptr<ToyLM<float>> base,
                            std::shared_ptr<ToyLM<float>> encoder, const SyntheticData& data,
                            const std::map<int, DomainBuildConfig>& domain_cfgs,
                            const SystemTemplates& templates, const DecodingConfig& answer_decoding,
                            const DecodingConfig& background_decoding);

}  // namespace gag
