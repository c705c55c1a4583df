// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Bit-exact model persistence: a "GAG1" binary with a JSON header (kind,
// config echo, seed, content hash, tensor manifest) and a float32
// little-endian payload. Loading verifies the hash and the expected kind.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gag/inject.hpp"
#include "gag/lm.hpp"
#include "json.hpp"

namespace gag {

enum class CheckpointKind { base, expert, projector, encoder };
const char* to_string(CheckpointKind kind);
CheckpointKind checkpoint_kind_from_string(const std::string& s);

struct CheckpointMeta {
  CheckpointKind kind = CheckpointKind::base;
  nlohmann::json config;  // model-shape echo (LMConfig or projector dims)
  uint64_t seed = 0;
};

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<std::string> names;          // manifest order
  std::vector<num::Tensor<float>> tensors;  // parallel to names
  std::string content_hash;                // hash of the raw payload bytes
};

// JSON echoes for the config field.
nlohmann::json lm_config_to_json(const LMConfig& cfg);
LMConfig lm_config_from_json(const nlohmann::json& j);

void save_checkpoint(const num::ParamSet<float>& params, const CheckpointMeta& meta,
                     const std::string& path);

// io on missing file, corruption on malformed/truncated/hash-mismatched
// content, kind when expected_kind is set and disagrees with the header.
LoadedCheckpoint load_checkpoint(const std::string& path);
LoadedCheckpoint load_checkpoint(const std::string& path, CheckpointKind expected_kind);

// Copies loaded tensors into an existing parameter set by name; every
// parameter must be present with an identical shape (corruption otherwise).
// Frozen sets stay frozen: only values change.
void load_into(num::ParamSet<float>& params, const LoadedCheckpoint& ckpt);

// Convenience round trips for whole models.
void save_model(const ToyLM<float>& model, CheckpointKind kind, const std::string& path);
// Validates the header config against the model's own shape before loading.
void load_model(ToyLM<float>& model, CheckpointKind kind, const std::string& path);
void save_projector(const Projector<float>& proj, const std::string& path);
void load_projector(Projector<float>& proj, const std::string& path);

// Hash of an entire file's bytes (checkpoint identity for the frozen-base
// and determinism checks).
std::string file_hash(const std::string& path);

}  // namespace gag
