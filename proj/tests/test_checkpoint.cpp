// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format: bit-exact round trips, integrity verification,
// and kind/config guards.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "gag/checkpoint.hpp"

using namespace gag;

namespace {

LMConfig cfg_of(int d_model, uint64_t seed) {
  LMConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = d_model;
  cfg.n_heads = 2;
  cfg.d_ff = d_model * 2;
  cfg.max_seq_len = 48;
  cfg.seed = seed;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool same_params(const num::ParamSet<float>& a, const num::ParamSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    auto va = a.at(i).values();
    auto vb = b.at(i).values();
    if (va.size() != vb.size()) return false;
    for (size_t j = 0; j < va.size(); ++j)
      if (va[j] != vb[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("model checkpoints round-trip bit-exactly") {
  ToyLM<float> model(cfg_of(16, 3));
  auto path = temp_path("gag_ckpt_model.bin");
  save_model(model, CheckpointKind::base, path);

  // different seed, then overwritten by the load
  ToyLM<float> restored(cfg_of(16, 99));
  REQUIRE_FALSE(same_params(model.params(), restored.params()));
  load_model(restored, CheckpointKind::base, path);
  CHECK(same_params(model.params(), restored.params()));

  // loading into a frozen model only changes values, not the frozen flag
  ToyLM<float> frozen(cfg_of(16, 98));
  frozen.set_frozen(true);
  load_model(frozen, CheckpointKind::base, path);
  CHECK(frozen.frozen());
  CHECK(same_params(model.params(), frozen.params()));

  // the header echoes the config and the content hash matches the payload
  auto ckpt = load_checkpoint(path, CheckpointKind::base);
  CHECK(lm_config_from_json(ckpt.meta.config).d_model == 16);
  CHECK(ckpt.meta.seed == 3);
  CHECK(ckpt.names.size() == model.params().size());
  std::filesystem::remove(path);
}

TEST_CASE("saving twice yields byte-identical files") {
  ToyLM<float> model(cfg_of(16, 7));
  auto p1 = temp_path("gag_ckpt_a.bin");
  auto p2 = temp_path("gag_ckpt_b.bin");
  save_model(model, CheckpointKind::encoder, p1);
  save_model(model, CheckpointKind::encoder, p2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(file_hash(p1) == file_hash(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("projector checkpoints round-trip and validate dimensions") {
  Projector<float> proj(12, 24, 0, 5);
  // give the zero-init tensors distinctive values
  for (size_t i = 0; i < proj.params().size(); ++i) {
    auto raw = proj.params().at(i).raw();
    for (size_t j = 0; j < raw.size(); ++j)
      raw[j] = static_cast<float>(i) + static_cast<float>(j) * 0.25f;
  }
  auto path = temp_path("gag_ckpt_proj.bin");
  save_projector(proj, path);

  Projector<float> restored(12, 24, 0, 6);
  load_projector(restored, path);
  CHECK(same_params(proj.params(), restored.params()));

  Projector<float> wrong(12, 20, 0, 6);
  try {
    load_projector(wrong, path);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::config);
  }
  std::filesystem::remove(path);
}

TEST_CASE("kind tags are enforced on load and save") {
  ToyLM<float> model(cfg_of(16, 1));
  auto path = temp_path("gag_ckpt_kind.bin");
  save_model(model, CheckpointKind::expert, path);
  try {
    load_checkpoint(path, CheckpointKind::projector);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::kind);
  }
  try {
    save_model(model, CheckpointKind::projector, path);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::kind);
  }
  try {
    checkpoint_kind_from_string("banana");
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::kind);
  }
  std::filesystem::remove(path);
}

TEST_CASE("corrupted files are rejected without partial loads") {
  ToyLM<float> model(cfg_of(16, 2));
  auto path = temp_path("gag_ckpt_corrupt.bin");
  save_model(model, CheckpointKind::base, path);
  const std::string good = slurp(path);

  auto expect_corruption = [&](const std::string& bytes) {
    spit(path, bytes);
    try {
      load_checkpoint(path);
      CHECK(false);
    } catch (const GagError& e) {
      CHECK(e.code() == ErrorCode::corruption);
    }
  };

  expect_corruption(good.substr(0, good.size() / 2));      // truncated payload
  expect_corruption(good.substr(0, 6));                    // shorter than prologue
  {
    std::string flipped = good;
    flipped[flipped.size() - 1] = static_cast<char>(flipped[flipped.size() - 1] ^ 0x41);
    expect_corruption(flipped);                            // payload bit flip
  }
  {
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    expect_corruption(bad_magic);
  }
  expect_corruption(std::string("GAG1") + std::string(4, '\0') + "junk");  // empty header

  std::filesystem::remove(path);
  try {
    load_checkpoint(path);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::io);
  }
}

TEST_CASE("config mismatches are caught before any copy") {
  ToyLM<float> model(cfg_of(16, 2));
  auto path = temp_path("gag_ckpt_cfgmismatch.bin");
  save_model(model, CheckpointKind::base, path);
  ToyLM<float> wider(cfg_of(24, 2));
  try {
    load_model(wider, CheckpointKind::base, path);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::config);
  }
  std::filesystem::remove(path);
}

TEST_CASE("load_into validates names and shapes") {
  num::ParamSet<float> src;
  src.add("w", num::Tensor<float>::from_vector({2, 2}, {1, 2, 3, 4}));
  CheckpointMeta meta;
  meta.kind = CheckpointKind::projector;
  auto path = temp_path("gag_ckpt_names.bin");
  save_checkpoint(src, meta, path);
  auto ckpt = load_checkpoint(path);

  num::ParamSet<float> renamed;
  renamed.add("v", num::Tensor<float>::from_vector({2, 2}, {0, 0, 0, 0}));
  try {
    load_into(renamed, ckpt);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::corruption);
  }
  num::ParamSet<float> reshaped;
  reshaped.add("w", num::Tensor<float>::from_vector({4}, {0, 0, 0, 0}));
  try {
    load_into(reshaped, ckpt);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::corruption);
  }
  std::filesystem::remove(path);
}
