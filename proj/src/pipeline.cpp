// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0

#include "gag/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "gag/hash.hpp"

namespace gag {

namespace {

// codebook alphabets: first char by high nibble, second by low nibble
const std::string kCode1 = "bcdfghjklmnpqrst";
const std::string kCode2 = "aeiouwxyz0123456";

std::string code_of(int byte_value) {
  return std::string(1, kCode1[static_cast<size_t>((byte_value >> 4) & 15)]) +
         std::string(1, kCode2[static_cast<size_t>(byte_value & 15)]);
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

bool is_stopword(const std::string& w) {
  static const std::set<std::string> kStop = {"a",  "an", "the", "of", "for", "to",
                                              "in", "on", "at",  "by", "with"};
  return kStop.count(w) != 0;
}

std::set<std::string> pool_vocab(const SyntheticDomainSpec& spec) {
  std::set<std::string> vocab;
  for (const auto& s : spec.stems)
    for (auto& w : words_of(s))
      if (!is_stopword(w)) vocab.insert(w);
  for (const auto& w : spec.words)
    for (auto& t : words_of(w)) vocab.insert(t);
  return vocab;
}

}  // namespace

// The byte-level models can emit arbitrary bytes; JSON strings must be valid
// UTF-8. Map bytes to U+0000..U+00FF (and back) so serialization is lossless.
std::string json_text(const std::string& bytes) {
  std::string out;
  for (unsigned char c : bytes) {
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

std::string bytes_of(const std::string& utf8) {
  std::string out;
  for (size_t i = 0; i < utf8.size();) {
    unsigned char c = static_cast<unsigned char>(utf8[i]);
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
      ++i;
    } else {
      unsigned char c2 = i + 1 < utf8.size() ? static_cast<unsigned char>(utf8[i + 1]) : 0;
      out.push_back(static_cast<char>(((c & 0x1F) << 6) | (c2 & 0x3F)));
      i += 2;
    }
  }
  return out;
}

// ---------------------------------------------------------------- scoring

std::string normalize_answer(const std::string& s) {
  std::string lowered;
  lowered.reserve(s.size());
  for (char ch : s) {
    unsigned char u = static_cast<unsigned char>(ch);
    if (std::ispunct(u)) continue;  // strip punctuation
    lowered.push_back(static_cast<char>(std::tolower(u)));
  }
  std::istringstream iss(lowered);
  std::vector<std::string> tokens;
  for (std::string w; iss >> w;) tokens.push_back(w);
  size_t start = 0;
  while (start < tokens.size() &&
         (tokens[start] == "a" || tokens[start] == "an" || tokens[start] == "the"))
    ++start;
  std::string out;
  for (size_t i = start; i < tokens.size(); ++i) {
    if (!out.empty()) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

int exact_match(const std::string& prediction, const std::string& gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1 : 0;
}

double em_score(const std::vector<std::string>& predictions,
                const std::vector<std::string>& golds) {
  if (predictions.empty() || predictions.size() != golds.size())
    raise(ErrorCode::input, "em_score needs equally sized, non-empty sets");
  int64_t hits = 0;
  for (size_t i = 0; i < predictions.size(); ++i) hits += exact_match(predictions[i], golds[i]);
  return 100.0 * static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// ------------------------------------------------------- synthetic corpus

SyntheticData gen_synthetic(const SyntheticConfig& cfg) {
  if (cfg.domains.empty()) raise(ErrorCode::config, "need at least one domain spec");
  std::set<int> seen_routes;
  for (const auto& d : cfg.domains) {
    if (d.route_id < 1) raise(ErrorCode::config, "domain route ids start at 1");
    if (!seen_routes.insert(d.route_id).second)
      raise(ErrorCode::config, "duplicate domain route id " + std::to_string(d.route_id));
    if (d.n_facts < 1 || d.stems.empty() || d.words.empty())
      raise(ErrorCode::config, "domain " + d.name + " has an empty pool or no facts");
    if (d.paraphrases_per_fact < 1 ||
        d.paraphrases_per_fact > static_cast<int>(d.stems.size()))
      raise(ErrorCode::config, "domain " + d.name + " wants " +
                                   std::to_string(d.paraphrases_per_fact) +
                                   " paraphrases but has only " + std::to_string(d.stems.size()) +
                                   " stems");
  }
  // pairwise pool-overlap check (the separability dial)
  for (size_t a = 0; a < cfg.domains.size(); ++a) {
    for (size_t b = a + 1; b < cfg.domains.size(); ++b) {
      auto va = pool_vocab(cfg.domains[a]);
      auto vb = pool_vocab(cfg.domains[b]);
      std::vector<std::string> inter;
      std::set_intersection(va.begin(), va.end(), vb.begin(), vb.end(),
                            std::back_inserter(inter));
      double frac = static_cast<double>(inter.size()) /
                    static_cast<double>(std::min(va.size(), vb.size()));
      if (frac > cfg.max_pool_overlap + 1e-12)
        raise(ErrorCode::spec, "domain pools '" + cfg.domains[a].name + "' and '" +
                                   cfg.domains[b].name + "' overlap at " + std::to_string(frac) +
                                   " > allowed " + std::to_string(cfg.max_pool_overlap));
    }
  }

  Tokenizer tok;
  SyntheticData data;
  int64_t next_id = 0;

  // ---- domain fact tables
  int64_t q_len_lo = std::numeric_limits<int64_t>::max(), q_len_hi = 0;
  for (const auto& spec : cfg.domains) {
    num::RandomStream brng(mix_seed(cfg.seed, tag_from_string("bytes") +
                                                  static_cast<uint64_t>(spec.route_id) +
                                                  spec.seed));
    std::vector<int> bytes(256);
    for (int i = 0; i < 256; ++i) bytes[i] = i;
    brng.shuffle(bytes);

    const int m = spec.paraphrases_per_fact;
    std::vector<QAPair> facts, stage1, pretrain;
    for (int f = 0; f < spec.n_facts; ++f) {
      std::string key = spec.words[static_cast<size_t>(f) % spec.words.size()] + "-" +
                        std::to_string(f);
      std::string code = code_of(bytes[static_cast<size_t>(f % 256)]);
      std::string background = key + " has code " + code;
      // The fact a query deserves (bare code); the question is always one of
      // the Stage I paraphrase stems.
      std::string q = spec.stems[static_cast<size_t>(f % m)] + key + "?";
      facts.push_back({q, code});
      for (int s = 0; s < m; ++s)
        stage1.push_back({spec.stems[static_cast<size_t>(s)] + key + "?", background});
      for (size_t s = 0; s < spec.stems.size(); ++s)
        pretrain.push_back({spec.stems[s] + key + "?", key + " is a registered entry"});
      q_len_lo = std::min<int64_t>(q_len_lo, static_cast<int64_t>(q.size()));
      q_len_hi = std::max<int64_t>(q_len_hi, static_cast<int64_t>(q.size()));
    }
    for (const auto& qa : facts) data.router_queries[spec.route_id].push_back(qa.question);
    data.domain_facts[spec.route_id] = std::move(facts);
    data.stage1_corpus[spec.route_id] = std::move(stage1);
    data.expert_pretrain[spec.route_id] = std::move(pretrain);
  }

  // ---- general QA (plain template; answers are ordinary words)
  {
    static const char* kSubjects[25] = {
        "sky",   "grass", "coal",  "milk",  "lemon", "brick", "cloud", "night", "leaf",
        "snow",  "rose",  "sea",   "sand",  "ash",   "gold",  "plum",  "fog",   "moss",
        "clay",  "pearl", "wheat", "ivy",   "ruby",  "slate", "corn"};
    static const char* kAnswers[25] = {
        "blue",  "green", "black", "white", "yellow", "red",   "white", "dark",  "green",
        "white", "red",   "blue",  "beige", "gray",   "gold",  "purple", "gray", "green",
        "brown", "white", "gold",  "green", "red",    "gray",  "yellow"};
    static const char* kForms[8] = {
        "what color is the %s?",      "which shade suits the %s?", "name the hue of the %s?",
        "usual color of the %s?",     "what tint has the %s?",     "color linked with the %s?",
        "shade people call the %s?",  "typical tone of the %s?"};
    char buf[96];
    for (int i = 0; i < 25; ++i) {
      for (int f = 0; f < 8; ++f) {
        std::snprintf(buf, sizeof buf, kForms[f], kSubjects[i]);
        QARecord rec;
        rec.id = next_id++;
        rec.route = 0;
        rec.question = buf;
        rec.answer = kAnswers[i];
        data.general_qa.push_back(std::move(rec));
      }
    }
  }

  // ---- carriers for slot rows, length-matched to the domain questions
  const char* kCarrierStems[6] = {"what is entry ",   "value of item ", "tell me about ",
                                  "lookup record ",   "figure for slot ", "note under tag "};
  auto make_carrier = [&](num::RandomStream& rng) {
    const std::string stem = kCarrierStems[rng.uniform_index(6)];
    int64_t target = q_len_lo + rng.uniform_index(std::max<int64_t>(1, q_len_hi - q_len_lo + 1));
    int64_t fill = std::max<int64_t>(2, target - static_cast<int64_t>(stem.size()) - 1);
    std::string w;
    for (int64_t c = 0; c < fill; ++c)
      w.push_back(static_cast<char>('a' + rng.uniform_index(26)));
    return stem + w + "?";
  };
  std::vector<std::string> carriers;
  {
    num::RandomStream crng(mix_seed(cfg.seed, tag_from_string("carriers") + cfg.general.seed));
    for (int i = 0; i < 48; ++i) carriers.push_back(make_carrier(crng));
  }

  // ---- base pretraining corpus: slot-copy rows covering the whole codebook,
  //      then the general QA rows
  {
    num::RandomStream pick(mix_seed(cfg.seed, tag_from_string("slot-rows") + cfg.general.seed));
    for (int b = 0; b < 256; ++b) {
      for (int r = 0; r < cfg.general.carriers_per_byte; ++r) {
        const auto& q = carriers[static_cast<size_t>(pick.uniform_index(
            static_cast<int64_t>(carriers.size())))];
        std::string prompt = render_template(
            cfg.templates.slot, {{"question", q}, {"anchor", std::string(1, static_cast<char>(b))}});
        data.base_corpus.push_back(build_example(tok, prompt, code_of(b)));
      }
    }
    for (const auto& rec : data.general_qa) {
      std::string prompt = render_template(cfg.templates.plain, {{"question", rec.question}});
      data.base_corpus.push_back(build_example(tok, prompt, rec.answer));
    }
  }

  // ---- held-out general queries for the route-0 prototype bank
  {
    num::RandomStream hrng(mix_seed(cfg.seed, tag_from_string("router-general") +
                                                  cfg.general.seed));
    for (int i = 0; i < cfg.general.n_router_queries; ++i)
      data.router_queries[0].push_back(make_carrier(hrng));
    for (const auto& rec : data.general_qa) data.router_queries[0].push_back(rec.question);
  }

  // ---- flattened private test + labeled routing pool
  for (const auto& [route, facts] : data.domain_facts) {
    for (const auto& qa : facts) {
      QARecord rec;
      rec.id = next_id++;
      rec.route = route;
      rec.question = qa.question;
      rec.answer = qa.answer;
      data.private_test.push_back(rec);
      rec.gold_route = route;
      data.routing_pool.push_back(std::move(rec));
    }
  }
  for (const auto& rec : data.general_qa) {
    QARecord pool_rec = rec;
    pool_rec.gold_route = 0;
    data.routing_pool.push_back(std::move(pool_rec));
  }
  return data;
}

SyntheticConfig default_synthetic_config(int n_domains, int facts_per_domain, uint64_t seed) {
  if (n_domains < 1 || n_domains > 6)
    raise(ErrorCode::config, "default synthetic setup supports 1..6 domains");
  struct Pool {
    const char* name;
    const char* metric;                  // domain-unique measurement word
    std::array<const char*, 16> nouns;   // stem prefixes, disjoint across pools
    std::vector<std::string> words;      // key surfaces, disjoint across pools
  };
  static const Pool kPools[6] = {
      {"materials",
       "rating",
       {"tensile", "hardness", "anneal", "forge", "yield", "temper", "alloy", "mill", "creep",
        "shear", "grain", "weld", "bend", "fatigue", "quench", "polish"},
       {"ingot", "billet", "flange", "girder", "rivet", "chassis", "lathe", "spindle", "bracket",
        "gusset"}},
      {"pharma",
       "code",
       {"dosage", "trial", "assay", "titration", "solvent", "purity", "batch", "shelf",
        "compound", "potency", "storage", "dilution", "binding", "expiry", "intake",
        "clearance"},
       {"serum", "capsule", "tablet", "tincture", "enzyme", "peptide", "reagent", "vial",
        "buffer", "culture"}},
      {"astronomy",
       "reading",
       {"orbital", "albedo", "flux", "parallax", "magnitude", "redshift", "spin", "drift",
        "luminous", "spectral", "epoch", "apogee", "aphelion", "declination", "azimuth",
        "sidereal"},
       {"nebula", "quasar", "pulsar", "comet", "asteroid", "corona", "perigee", "zenith",
        "transit", "eclipse"}},
      {"cuisine",
       "score",
       {"simmer", "spice", "proof", "plating", "braise", "glaze", "knead", "ferment", "sear",
        "whisk", "marinade", "broil", "poach", "garnish", "zest", "caramel"},
       {"brioche", "consomme", "ganache", "gnocchi", "harissa", "miso", "polenta", "risotto",
        "tagine", "velout"}},
      {"law",
       "index",
       {"statute", "filing", "clause", "docket", "appeal", "verdict", "hearing", "motion",
        "witness", "ruling", "charter", "amendment", "plea", "custody", "parole", "bail"},
       {"affidavit", "brief", "counsel", "deposition", "estoppel", "indemnity", "lien",
        "probate", "subpoena", "tort"}},
      {"marine",
       "gauge",
       {"draft", "ballast", "mooring", "hull", "bilge", "buoy", "cargo", "compass", "current",
        "harbor", "jetty", "knot", "lagoon", "tide", "wake", "voyage"},
       {"anchorage", "bowsprit", "capstan", "dinghy", "fathom", "galleon", "keelson", "mast",
        "rudder", "spinnaker"}}};

  SyntheticConfig cfg;
  cfg.seed = seed;
  cfg.general.seed = seed;
  for (int i = 0; i < n_domains; ++i) {
    SyntheticDomainSpec spec;
    spec.route_id = i + 1;
    spec.name = kPools[i].name;
    spec.n_facts = facts_per_domain;
    for (size_t n = 0; n < kPools[i].nouns.size(); ++n)
      spec.stems.push_back(std::string(kPools[i].nouns[n]) + " " + kPools[i].metric +
                           (n % 2 ? " for " : " of "));
    spec.words = kPools[i].words;
    spec.seed = seed;
    cfg.domains.push_back(std::move(spec));
  }
  return cfg;
}

void write_jsonl(const std::string& path, const std::vector<QARecord>& records, bool with_gold) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::io, "cannot open " + path + " for writing");
  for (const auto& rec : records) {
    nlohmann::json j;
    j["id"] = rec.id;
    j["route"] = rec.route;
    j["question"] = json_text(rec.question);
    j["answer"] = json_text(rec.answer);
    if (with_gold) j["gold_route"] = rec.gold_route;
    out << j.dump() << "\n";
  }
  if (!out) raise(ErrorCode::io, "short write to " + path);
}

std::vector<QARecord> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::io, "cannot open " + path);
  std::vector<QARecord> records;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("id") || !j.contains("route") ||
        !j.contains("question") || !j.contains("answer"))
      raise(ErrorCode::data, path + ":" + std::to_string(line_no) + ": malformed JSONL record");
    QARecord rec;
    rec.id = j["id"].get<int64_t>();
    rec.route = j["route"].get<int>();
    rec.question = bytes_of(j["question"].get<std::string>());
    rec.answer = bytes_of(j["answer"].get<std::string>());
    if (j.contains("gold_route")) rec.gold_route = j["gold_route"].get<int>();
    records.push_back(std::move(rec));
  }
  return records;
}

// ------------------------------------------------------- assembled system

const char* to_string(RoutingMode mode) {
  switch (mode) {
    case RoutingMode::ppr: return "ppr";
    case RoutingMode::oracle: return "oracle";
    case RoutingMode::none: return "none";
  }
  return "?";
}

RoutingMode routing_mode_from_string(const std::string& s) {
  if (s == "ppr") return RoutingMode::ppr;
  if (s == "oracle") return RoutingMode::oracle;
  if (s == "none") return RoutingMode::none;
  raise(ErrorCode::config, "unknown routing mode '" + s + "' (want ppr|oracle|none)");
}

GagSystem::GagSystem(std::shared_ptr<ToyLM<float>> base, std::shared_ptr<ToyLM<float>> encoder,
                     SystemTemplates templates, DecodingConfig answer_decoding,
                     DecodingConfig background_decoding)
    : base_(std::move(base)),
      encoder_(std::move(encoder)),
      templates_(std::move(templates)),
      answer_decoding_(answer_decoding),
      background_decoding_(background_decoding) {
  if (!base_ || !encoder_) raise(ErrorCode::config, "system needs a base and an encoder");
  if (!base_->frozen()) raise(ErrorCode::frozen_discipline, "the base model must be frozen");
  if (!encoder_->frozen()) raise(ErrorCode::frozen_discipline, "the encoder must be frozen");
  registry_ = std::make_unique<Registry>(encoder_fingerprint(*encoder_));
  route_names_[0] = "general";
}

void GagSystem::add_module(int route_id, ExpertModule module) {
  if (route_id < 1) raise(ErrorCode::config, "expert modules use route ids >= 1");
  if (!module.expert || !module.projector) raise(ErrorCode::config, "incomplete module");
  if (modules_.count(route_id))
    raise(ErrorCode::conflict, "route " + std::to_string(route_id) + " already has a module");
  if (module.projector->out_dim() != base_->config().d_model)
    raise(ErrorCode::config, "projector output does not match the base embedding width");
  if (module.projector->in_dim() != module.expert->model().config().d_model)
    raise(ErrorCode::config, "projector input does not match the expert width");
  modules_.emplace(route_id, std::move(module));
}

std::string GagSystem::route_name(int route_id) const {
  auto it = route_names_.find(route_id);
  return it == route_names_.end() ? ("route-" + std::to_string(route_id)) : it->second;
}

void GagSystem::set_route_name(int route_id, std::string name) {
  route_names_[route_id] = std::move(name);
}

std::string GagSystem::base_only_answer(const std::string& question) const {
  Tokenizer tok;
  auto prompt = make_answer_prompt(tok, templates_.plain, question);
  return tok.decode(base_->decode(prompt.tokens, answer_decoding_));
}

GagSystem::Answered GagSystem::answer(const std::string& question, RoutingMode mode,
                                      int gold_route) const {
  Answered out;
  switch (mode) {
    case RoutingMode::ppr:
      out.decision = registry_->route(embed_query(*encoder_, question));
      break;
    case RoutingMode::oracle:
      if (gold_route < 0)
        raise(ErrorCode::input, "oracle routing needs a gold route label");
      out.decision.route = gold_route;
      out.decision.similarities[gold_route] = 1.0;
      break;
    case RoutingMode::none:
      out.decision.route = 0;
      out.decision.similarities[0] = 1.0;
      break;
  }
  out.route_used = out.decision.route;

  if (out.route_used == 0) {
    out.answer = base_only_answer(question);
    return out;
  }
  auto it = modules_.find(out.route_used);
  if (it == modules_.end())
    raise(ErrorCode::routing_integrity,
          "route " + std::to_string(out.route_used) + " has no attached expert module");
  const ExpertModule& m = it->second;
  Tokenizer tok;
  auto background =
      m.expert->synthesize_background(question, background_decoding_, m.allow_unadapted);
  auto readout = m.expert->readout(question, background);
  num::NoGradGuard ng;
  auto z = m.projector->project(readout.vector);
  auto prompt = make_answer_prompt(tok, templates_.slot, question);
  out.answer = tok.decode(injected_decode(*base_, build_injected_embeddings(*base_, prompt, &z),
                                          answer_decoding_));
  return out;
}

// ------------------------------------------------------------- evaluation

RoutingEval eval_routing(const GagSystem& system, const std::vector<QARecord>& pool) {
  if (pool.empty()) raise(ErrorCode::input, "routing evaluation needs a non-empty pool");
  auto snapshot = system.registry().snapshot();
  RoutingEval ev;
  for (const auto& rec : pool) {
    if (rec.gold_route < 0)
      raise(ErrorCode::data, "routing pool record " + std::to_string(rec.id) +
                                 " carries no gold route");
    if (!snapshot->banks.count(rec.gold_route))
      raise(ErrorCode::data, "gold route " + std::to_string(rec.gold_route) +
                                 " has no attached bank");
    auto dec = route_query(embed_query(system.encoder(), rec.question), *snapshot);
    ev.confusion[rec.gold_route][dec.route]++;
    ++ev.total;
  }
  int64_t correct = 0;
  for (const auto& [gold, row] : ev.confusion) {
    int64_t row_total = 0, row_correct = 0;
    for (const auto& [pred, n] : row) {
      row_total += n;
      if (pred == gold) row_correct += n;
    }
    correct += row_correct;
    ev.per_route[gold] = 100.0 * static_cast<double>(row_correct) /
                         static_cast<double>(row_total);
  }
  ev.micro = 100.0 * static_cast<double>(correct) / static_cast<double>(ev.total);
  return ev;
}

EvalReport run_eval(const GagSystem& system, const std::vector<QARecord>& private_test,
                    const std::vector<QARecord>& general_test,
                    const std::vector<QARecord>& routing_pool, RoutingMode mode) {
  const double t0 = now_seconds();
  EvalReport report;
  report.mode = to_string(mode);

  std::map<int, std::pair<int64_t, int64_t>> per_domain;  // route -> (hits, total)
  int64_t private_hits = 0;
  for (const auto& rec : private_test) {
    auto ans = system.answer(rec.question, mode, rec.route);
    int em = exact_match(ans.answer, rec.answer);
    private_hits += em;
    per_domain[rec.route].first += em;
    per_domain[rec.route].second += 1;
    PerQueryRecord r;
    r.id = rec.id;
    r.kind = "private";
    r.gold_route = rec.route;
    r.route_used = ans.route_used;
    auto sim = ans.decision.similarities.find(ans.route_used);
    r.similarity = sim == ans.decision.similarities.end() ? 0.0 : sim->second;
    r.question = rec.question;
    r.gold = rec.answer;
    r.prediction = ans.answer;
    r.em = em;
    report.records.push_back(std::move(r));
  }
  if (!private_test.empty())
    report.private_em = 100.0 * static_cast<double>(private_hits) /
                        static_cast<double>(private_test.size());
  for (const auto& [route, ht] : per_domain)
    report.per_domain_em[route] = 100.0 * static_cast<double>(ht.first) /
                                  static_cast<double>(ht.second);

  if (!general_test.empty()) {
    int64_t sys_hits = 0, base_hits = 0;
    for (const auto& rec : general_test) {
      auto ans = system.answer(rec.question, mode, 0);
      int em = exact_match(ans.answer, rec.answer);
      sys_hits += em;
      base_hits += exact_match(system.base_only_answer(rec.question), rec.answer);
      PerQueryRecord r;
      r.id = rec.id;
      r.kind = "general";
      r.gold_route = 0;
      r.route_used = ans.route_used;
      auto sim = ans.decision.similarities.find(ans.route_used);
      r.similarity = sim == ans.decision.similarities.end() ? 0.0 : sim->second;
      r.question = rec.question;
      r.gold = rec.answer;
      r.prediction = ans.answer;
      r.em = em;
      report.records.push_back(std::move(r));
    }
    report.general_em_system = 100.0 * static_cast<double>(sys_hits) /
                               static_cast<double>(general_test.size());
    report.general_em_base = 100.0 * static_cast<double>(base_hits) /
                             static_cast<double>(general_test.size());
    report.general_delta = report.general_em_system - report.general_em_base;
  }

  if (!routing_pool.empty() && !system.registry().snapshot()->banks.empty())
    report.routing = eval_routing(system, routing_pool);

  report.runtime_seconds = now_seconds() - t0;
  return report;
}

double run_regression_check(const GagSystem& system, const std::vector<QARecord>& general_test,
                            RoutingMode mode) {
  if (general_test.empty()) raise(ErrorCode::input, "regression check needs general queries");
  int64_t sys_hits = 0, base_hits = 0;
  for (const auto& rec : general_test) {
    sys_hits += exact_match(system.answer(rec.question, mode, 0).answer, rec.answer);
    base_hits += exact_match(system.base_only_answer(rec.question), rec.answer);
  }
  return 100.0 * static_cast<double>(sys_hits - base_hits) /
         static_cast<double>(general_test.size());
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["variant"] = report.variant;
  j["mode"] = report.mode;
  j["private_em"] = report.private_em;
  j["per_domain_em"] = nlohmann::json::object();
  for (const auto& [route, em] : report.per_domain_em)
    j["per_domain_em"][std::to_string(route)] = em;
  j["general_em_system"] = report.general_em_system;
  j["general_em_base"] = report.general_em_base;
  j["general_delta"] = report.general_delta;
  j["routing"] = {{"micro", report.routing.micro},
                  {"total", report.routing.total},
                  {"per_route", nlohmann::json::object()},
                  {"confusion", nlohmann::json::object()}};
  for (const auto& [route, acc] : report.routing.per_route)
    j["routing"]["per_route"][std::to_string(route)] = acc;
  for (const auto& [gold, row] : report.routing.confusion) {
    nlohmann::json r = nlohmann::json::object();
    for (const auto& [pred, n] : row) r[std::to_string(pred)] = n;
    j["routing"]["confusion"][std::to_string(gold)] = std::move(r);
  }
  j["runtime_seconds"] = report.runtime_seconds;
  j["records"] = nlohmann::json::array();
  for (const auto& r : report.records) {
    j["records"].push_back({{"id", r.id},
                            {"kind", r.kind},
                            {"gold_route", r.gold_route},
                            {"route_used", r.route_used},
                            {"similarity", r.similarity},
                            {"question", json_text(r.question)},
                            {"gold", json_text(r.gold)},
                            {"prediction", json_text(r.prediction)},
                            {"em", r.em}});
  }
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport report;
  report.variant = j.at("variant").get<std::string>();
  report.mode = j.at("mode").get<std::string>();
  report.private_em = j.at("private_em").get<double>();
  for (const auto& [k, v] : j.at("per_domain_em").items())
    report.per_domain_em[std::stoi(k)] = v.get<double>();
  report.general_em_system = j.at("general_em_system").get<double>();
  report.general_em_base = j.at("general_em_base").get<double>();
  report.general_delta = j.at("general_delta").get<double>();
  report.routing.micro = j.at("routing").at("micro").get<double>();
  report.routing.total = j.at("routing").at("total").get<int64_t>();
  for (const auto& [k, v] : j.at("routing").at("per_route").items())
    report.routing.per_route[std::stoi(k)] = v.get<double>();
  for (const auto& [gold, row] : j.at("routing").at("confusion").items())
    for (const auto& [pred, n] : row.items())
      report.routing.confusion[std::stoi(gold)][std::stoi(pred)] = n.get<int64_t>();
  report.runtime_seconds = j.at("runtime_seconds").get<double>();
  for (const auto& r : j.at("records")) {
    PerQueryRecord q;
    q.id = r.at("id").get<int64_t>();
    q.kind = r.at("kind").get<std::string>();
    q.gold_route = r.at("gold_route").get<int>();
    q.route_used = r.at("route_used").get<int>();
    q.similarity = r.at("similarity").get<double>();
    q.question = bytes_of(r.at("question").get<std::string>());
    q.gold = bytes_of(r.at("gold").get<std::string>());
    q.prediction = bytes_of(r.at("prediction").get<std::string>());
    q.em = r.at("em").get<int>();
    report.records.push_back(std::move(q));
  }
  return report;
}

void write_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::io, "cannot open " + path + " for writing");
  out << report_to_json(report).dump(2) << "\n";
  if (!out) raise(ErrorCode::io, "short write to " + path);
}

namespace {
std::string csv_escape(const std::string& s) {
  bool needs_quote = s.find_first_of(",\"\n") != std::string::npos;
  if (!needs_quote) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  out.push_back('"');
  return out;
}
}  // namespace

void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::io, "cannot open " + path + " for writing");
  out << "id,kind,gold_route,route_used,similarity,em,question,gold,prediction\n";
  char sim[32];
  for (const auto& r : report.records) {
    std::snprintf(sim, sizeof sim, "%.6f", r.similarity);
    out << r.id << ',' << r.kind << ',' << r.gold_route << ',' << r.route_used << ',' << sim
        << ',' << r.em << ',' << csv_escape(r.question) << ',' << csv_escape(r.gold) << ','
        << csv_escape(r.prediction) << "\n";
  }
  if (!out) raise(ErrorCode::io, "short write to " + path);
}

std::string report_fingerprint(const EvalReport& report) {
  EvalReport copy = report;
  copy.runtime_seconds = 0.0;
  return fnv1a64_hex(report_to_json(copy).dump());
}

// -------------------------------------------------------------- ablations

const char* to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::full: return "full";
    case AblationVariant::no_stage1: return "no_stage1";
    case AblationVariant::no_stage2: return "no_stage2";
  }
  return "?";
}

ExpertModule build_domain_module(const ToyLM<float>& base, int route_id,
                                 const std::vector<QAPair>& stage1_corpus,
                                 const std::vector<QAPair>& facts, const DomainBuildConfig& cfg,
                                 AblationVariant variant) {
  ExpertModule module;
  LMConfig expert_cfg = cfg.expert_cfg;
  expert_cfg.seed = cfg.expert_seed ? cfg.expert_seed : expert_cfg.seed;
  module.expert = std::make_shared<DomainExpert<float>>(route_id, expert_cfg,
                                                        cfg.background_template,
                                                        cfg.readout_layer);
  if (!cfg.expert_pretrain_corpus.empty())
    module.expert->model().train(cfg.expert_pretrain_corpus, cfg.expert_pretrain_hp);
  if (variant != AblationVariant::no_stage1) {
    module.expert->adapt_stage1(stage1_corpus, cfg.stage1_hp);
  } else {
    module.allow_unadapted = true;
  }
  module.expert->model().set_frozen(true);

  module.projector = std::make_shared<Projector<float>>(
      expert_cfg.d_model, base.config().d_model, cfg.projector_hidden, cfg.projector_seed);
  if (variant != AblationVariant::no_stage2) {
    Stage2Config s2 = cfg.stage2;
    if (s2.answer_template.empty()) s2.answer_template = SystemTemplates{}.slot;
    s2.allow_unadapted = variant == AblationVariant::no_stage1;
    train_stage2(base, *module.expert, *module.projector, facts, s2);
  }
  module.projector->set_frozen(true);
  return module;
}

AblationResult run_ablation(std::shared_ptr<ToyLM<float>> base,
                            std::shared_ptr<ToyLM<float>> encoder, const SyntheticData& data,
                            const std::map<int, DomainBuildConfig>& domain_cfgs,
                            const SystemTemplates& templates, const DecodingConfig& answer_decoding,
                            const DecodingConfig& background_decoding) {
  AblationResult result;
  for (AblationVariant variant :
       {AblationVariant::full, AblationVariant::no_stage1, AblationVariant::no_stage2}) {
    GagSystem system(base, encoder, templates, answer_decoding, background_decoding);
    for (const auto& [route, facts] : data.domain_facts) {
      auto it = domain_cfgs.find(route);
      if (it == domain_cfgs.end())
        raise(ErrorCode::config, "no build config for route " + std::to_string(route));
      auto s1 = data.stage1_corpus.find(route);
      const auto& stage1 = s1 == data.stage1_corpus.end() ? facts : s1->second;
      system.add_module(route,
                        build_domain_module(*base, route, stage1, facts, it->second, variant));
    }
    auto report = run_eval(system, data.private_test, {}, {}, RoutingMode::oracle);
    report.variant = to_string(variant);
    switch (variant) {
      case AblationVariant::full: result.full = std::move(report); break;
      case AblationVariant::no_stage1: result.no_stage1 = std::move(report); break;
      case AblationVariant::no_stage2: result.no_stage2 = std::move(report); break;
    }
  }
  return result;
}

}  // namespace gag
