// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0

#include "gag/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "gag/hash.hpp"

namespace gag {

namespace {

constexpr char kMagic[4] = {'G', 'A', 'G', '1'};
constexpr uint32_t kMaxHeaderBytes = 16u << 20;

void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t get_u32(const std::string& bytes, size_t pos) {
  return static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos])) |
         static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + 1])) << 8 |
         static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + 2])) << 16 |
         static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + 3])) << 24;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::io, "cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

[[noreturn]] void corrupt(const std::string& path, const std::string& why) {
  raise(ErrorCode::corruption, path + ": " + why);
}

}  // namespace

const char* to_string(CheckpointKind kind) {
  switch (kind) {
    case CheckpointKind::base: return "base";
    case CheckpointKind::expert: return "expert";
    case CheckpointKind::projector: return "projector";
    case CheckpointKind::encoder: return "encoder";
  }
  return "?";
}

CheckpointKind checkpoint_kind_from_string(const std::string& s) {
  if (s == "base") return CheckpointKind::base;
  if (s == "expert") return CheckpointKind::expert;
  if (s == "projector") return CheckpointKind::projector;
  if (s == "encoder") return CheckpointKind::encoder;
  raise(ErrorCode::kind, "unknown checkpoint kind '" + s + "'");
}

nlohmann::json lm_config_to_json(const LMConfig& cfg) {
  return {{"vocab_size", cfg.vocab_size}, {"n_layers", cfg.n_layers},
          {"d_model", cfg.d_model},       {"n_heads", cfg.n_heads},
          {"d_ff", cfg.d_ff},             {"max_seq_len", cfg.max_seq_len},
          {"seed", cfg.seed}};
}

LMConfig lm_config_from_json(const nlohmann::json& j) {
  LMConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_ff = j.at("d_ff").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.validate();
  return cfg;
}

void save_checkpoint(const num::ParamSet<float>& params, const CheckpointMeta& meta,
                     const std::string& path) {
  if (params.size() == 0) raise(ErrorCode::input, "refusing to save an empty parameter set");

  std::string payload;
  nlohmann::json manifest = nlohmann::json::array();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.at(i);
    nlohmann::json entry;
    entry["name"] = params.names()[i];
    entry["dtype"] = "f32";
    entry["shape"] = std::vector<int64_t>(t.shape().begin(), t.shape().end());
    manifest.push_back(std::move(entry));
    const auto vals = t.values();
    const size_t bytes = vals.size() * sizeof(float);
    const size_t off = payload.size();
    payload.resize(off + bytes);
    std::memcpy(payload.data() + off, vals.data(), bytes);
  }

  nlohmann::json header;
  header["magic_version"] = 1;
  header["kind"] = to_string(meta.kind);
  header["config"] = meta.config.is_null() ? nlohmann::json::object() : meta.config;
  header["seed"] = meta.seed;
  header["content_hash"] = fnv1a64_hex(payload.data(), payload.size());
  header["tensors"] = std::move(manifest);
  const std::string header_text = header.dump();

  std::string blob;
  blob.append(kMagic, sizeof kMagic);
  put_u32(blob, static_cast<uint32_t>(header_text.size()));
  blob += header_text;
  blob += payload;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::io, "cannot open " + path + " for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) raise(ErrorCode::io, "short write to " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < sizeof(kMagic) + 4) corrupt(path, "file shorter than the fixed prologue");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) corrupt(path, "bad magic");
  const uint32_t header_len = get_u32(bytes, sizeof kMagic);
  if (header_len > kMaxHeaderBytes) corrupt(path, "implausible header length");
  const size_t header_off = sizeof(kMagic) + 4;
  if (bytes.size() < header_off + header_len) corrupt(path, "truncated header");

  nlohmann::json header =
      nlohmann::json::parse(bytes.substr(header_off, header_len), nullptr, false);
  if (header.is_discarded()) corrupt(path, "header is not valid JSON");
  for (const char* key : {"kind", "config", "seed", "content_hash", "tensors"})
    if (!header.contains(key)) corrupt(path, std::string("header lacks '") + key + "'");

  LoadedCheckpoint out;
  out.meta.kind = checkpoint_kind_from_string(header["kind"].get<std::string>());
  out.meta.config = header["config"];
  out.meta.seed = header["seed"].get<uint64_t>();

  const std::string payload = bytes.substr(header_off + header_len);
  out.content_hash = fnv1a64_hex(payload.data(), payload.size());
  if (out.content_hash != header["content_hash"].get<std::string>())
    corrupt(path, "content hash mismatch");

  size_t cursor = 0;
  if (!header["tensors"].is_array() || header["tensors"].empty())
    corrupt(path, "empty tensor manifest");
  for (const auto& entry : header["tensors"]) {
    if (!entry.contains("name") || !entry.contains("dtype") || !entry.contains("shape"))
      corrupt(path, "malformed tensor manifest entry");
    if (entry["dtype"].get<std::string>() != "f32") corrupt(path, "unsupported dtype");
    auto shape = entry["shape"].get<std::vector<int64_t>>();
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 1) corrupt(path, "non-positive tensor dimension");
      n *= d;
    }
    const size_t nbytes = static_cast<size_t>(n) * sizeof(float);
    if (payload.size() - cursor < nbytes) corrupt(path, "truncated tensor payload");
    std::vector<float> data(static_cast<size_t>(n));
    std::memcpy(data.data(), payload.data() + cursor, nbytes);
    cursor += nbytes;
    out.names.push_back(entry["name"].get<std::string>());
    out.tensors.push_back(num::Tensor<float>::from_vector(
        num::Shape(shape.begin(), shape.end()), std::move(data)));
  }
  if (cursor != payload.size()) corrupt(path, "trailing bytes after the last tensor");
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path, CheckpointKind expected_kind) {
  auto ckpt = load_checkpoint(path);
  if (ckpt.meta.kind != expected_kind)
    raise(ErrorCode::kind, path + ": holds a '" + to_string(ckpt.meta.kind) +
                               "' checkpoint where '" + to_string(expected_kind) +
                               "' was expected");
  return ckpt;
}

void load_into(num::ParamSet<float>& params, const LoadedCheckpoint& ckpt) {
  if (ckpt.names.size() != params.size())
    raise(ErrorCode::corruption, "checkpoint carries " + std::to_string(ckpt.names.size()) +
                                     " tensors for a model with " +
                                     std::to_string(params.size()) + " parameters");
  for (size_t i = 0; i < ckpt.names.size(); ++i) {
    if (!params.has(ckpt.names[i]))
      raise(ErrorCode::corruption, "checkpoint tensor '" + ckpt.names[i] +
                                       "' has no matching model parameter");
    auto& dst = params.get(ckpt.names[i]);
    const auto& src = ckpt.tensors[i];
    if (dst.shape() != src.shape())
      raise(ErrorCode::corruption, "shape mismatch on '" + ckpt.names[i] + "': model " +
                                       num::shape_str(dst.shape()) + " vs checkpoint " +
                                       num::shape_str(src.shape()));
    auto out = dst.raw();
    const auto in = src.values();
    std::memcpy(out.data(), in.data(), in.size() * sizeof(float));
  }
}

void save_model(const ToyLM<float>& model, CheckpointKind kind, const std::string& path) {
  if (kind == CheckpointKind::projector)
    raise(ErrorCode::kind, "projector checkpoints use save_projector");
  CheckpointMeta meta;
  meta.kind = kind;
  meta.config = lm_config_to_json(model.config());
  meta.seed = model.config().seed;
  save_checkpoint(model.params(), meta, path);
}

void load_model(ToyLM<float>& model, CheckpointKind kind, const std::string& path) {
  auto ckpt = load_checkpoint(path, kind);
  const LMConfig stored = lm_config_from_json(ckpt.meta.config);
  const LMConfig& own = model.config();
  if (stored.vocab_size != own.vocab_size || stored.n_layers != own.n_layers ||
      stored.d_model != own.d_model || stored.n_heads != own.n_heads ||
      stored.d_ff != own.d_ff || stored.max_seq_len != own.max_seq_len)
    raise(ErrorCode::config, path + ": checkpoint shape does not match the model's config");
  load_into(model.params(), ckpt);
}

void save_projector(const Projector<float>& proj, const std::string& path) {
  CheckpointMeta meta;
  meta.kind = CheckpointKind::projector;
  meta.config = {{"d2", proj.in_dim()}, {"hidden", proj.hidden_dim()}, {"d1", proj.out_dim()}};
  save_checkpoint(proj.params(), meta, path);
}

void load_projector(Projector<float>& proj, const std::string& path) {
  auto ckpt = load_checkpoint(path, CheckpointKind::projector);
  if (ckpt.meta.config.at("d2").get<int>() != proj.in_dim() ||
      ckpt.meta.config.at("hidden").get<int>() != proj.hidden_dim() ||
      ckpt.meta.config.at("d1").get<int>() != proj.out_dim())
    raise(ErrorCode::config, path + ": projector dimensions do not match");
  load_into(proj.params(), ckpt);
}

std::string file_hash(const std::string& path) { return fnv1a64_hex(read_file(path)); }

}  // namespace gag
