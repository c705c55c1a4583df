// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// The single JSON configuration consumed by every CLI subcommand. Parsing is
// strict: unknown keys anywhere are rejected so typos cannot silently fall
// back to defaults.
#pragma once

#include <string>

#include "gag/pipeline.hpp"
#include "json.hpp"

namespace gag {

struct RunConfig {
  LMConfig base;         // the frozen deployment model
  LMConfig expert;       // per-domain expert shape (seed offset by route id)
  LMConfig encoder;      // frozen routing encoder
  SyntheticConfig data;  // benchmark generator settings

  TrainHParams train_base;  // base pretraining on the general corpus
  // Key-only expert grounding before Stage I (code-free rows); the expert
  // analogue of starting from a pretrained model rather than random weights.
  bool expert_pretrain_enabled = true;
  TrainHParams expert_pretrain;
  TrainHParams stage1;      // expert QA adaptation
  Stage2Config stage2;      // projector alignment (answer template filled late)

  int readout_layer = 0;      // 0 = default depth for the expert layer count
  int projector_hidden = 0;   // 0 = max(d1, d2)
  uint64_t projector_seed = 5005;

  BankConfig ppr;             // prototype bank construction

  DecodingConfig answer_decoding;      // defaults tuned for two-char codes
  DecodingConfig background_decoding;  // covers the full background sentence

  RunConfig();  // desk-scale defaults that satisfy the shipped benchmarks
};

nlohmann::json run_config_to_json(const RunConfig& cfg);
// config error on unknown keys, wrong types, or out-of-range values.
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);

// Hash of the canonical JSON serialization (manifest provenance).
std::string config_fingerprint(const RunConfig& cfg);

}  // namespace gag
