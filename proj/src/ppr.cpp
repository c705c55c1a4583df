// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0

#include "gag/ppr.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "gag/hash.hpp"
#include "gag/log.hpp"
#include "gag/tokenizer.hpp"
#include "json.hpp"

namespace gag {

namespace {

std::vector<double> normalize_or_throw(std::vector<double> v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  double n = std::sqrt(n2);
  if (!(n > 1e-12)) raise(ErrorCode::numeric, "cannot normalize a zero vector");
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

std::string encoder_fingerprint(const ToyLM<float>& encoder) {
  Fnv1a64 h;
  const auto& cfg = encoder.config();
  int64_t dims[6] = {cfg.vocab_size, cfg.n_layers, cfg.d_model,
                     cfg.n_heads,    cfg.d_ff,     cfg.max_seq_len};
  h.update(dims, sizeof(dims));
  const auto& ps = encoder.params();
  for (size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = ps.names()[i];
    h.update(name.data(), name.size());
    const auto& vals = ps.at(i).values();
    h.update(vals.data(), vals.size() * sizeof(float));
  }
  return h.hex();
}

QueryEmbedding embed_query(const ToyLM<float>& encoder, const std::vector<int>& ids) {
  if (ids.empty()) raise(ErrorCode::input, "cannot embed an empty query");
  if (!encoder.frozen()) raise(ErrorCode::frozen_discipline, "query encoder must be frozen");
  num::NoGradGuard ng;
  const int last = static_cast<int>(encoder.config().n_layers);
  auto trace = encoder.forward(ids, {last});
  const auto& states = trace.layers.at(last);  // {T, d}
  const int64_t d = states.shape()[1];
  std::vector<double> mean(d, 0.0);
  int64_t kept = 0;
  for (size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] == Tokenizer::kPad) continue;
    for (int64_t c = 0; c < d; ++c) mean[c] += states.at(static_cast<int64_t>(t), c);
    ++kept;
  }
  if (kept == 0) raise(ErrorCode::input, "query contains only PAD tokens");
  for (double& x : mean) x /= static_cast<double>(kept);
  mean = normalize_or_throw(std::move(mean));
  std::vector<float> out(mean.begin(), mean.end());
  return {num::Tensor<float>::from_vector({d}, out)};
}

QueryEmbedding embed_query(const ToyLM<float>& encoder, const std::string& query) {
  Tokenizer tok;
  return embed_query(encoder, tok.encode(query));
}

KMeansResult kmeans(const num::Tensor<float>& points, int C, int n_init, int max_iter,
                    uint64_t seed) {
  if (points.shape().size() != 2)
    raise(ErrorCode::config, "kmeans expects a {N, d} point matrix");
  const int64_t n = points.shape()[0];
  const int64_t d = points.shape()[1];
  if (C < 1) raise(ErrorCode::config, "kmeans needs C >= 1");
  if (n < C)
    raise(ErrorCode::insufficient_data,
          "kmeans needs at least C points: have " + std::to_string(n) + ", want " +
              std::to_string(C));
  if (n_init < 1 || max_iter < 1) raise(ErrorCode::config, "kmeans needs n_init, max_iter >= 1");

  // work in double for stable SSE comparisons across restarts
  std::vector<double> pts(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n * d; ++i) pts[static_cast<size_t>(i)] = points.values()[i];
  auto point = [&](int64_t i) { return pts.data() + i * d; };
  auto dist2 = [&](const double* a, const double* b) {
    double s = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      double t = a[c] - b[c];
      s += t * t;
    }
    return s;
  };

  std::vector<double> best_centroids;
  double best_sse = std::numeric_limits<double>::infinity();
  std::vector<double> best_trace;

  for (int restart = 0; restart < n_init; ++restart) {
    num::RandomStream rng(mix_seed(seed, tag_from_string("kmeans") + static_cast<uint64_t>(restart)));

    // k-means++ seeding
    std::vector<double> centroids(static_cast<size_t>(C) * d);
    std::vector<double> d2(static_cast<size_t>(n));
    int64_t first = rng.uniform_index(n);
    std::copy_n(point(first), d, centroids.begin());
    for (int64_t i = 0; i < n; ++i) d2[static_cast<size_t>(i)] = dist2(point(i), centroids.data());
    for (int j = 1; j < C; ++j) {
      double total = 0.0;
      for (double w : d2) total += w;
      int64_t chosen;
      if (total > 0.0) {
        double u = rng.uniform() * total;
        double cum = 0.0;
        chosen = n - 1;
        for (int64_t i = 0; i < n; ++i) {
          cum += d2[static_cast<size_t>(i)];
          if (cum > u) {
            chosen = i;
            break;
          }
        }
      } else {
        chosen = rng.uniform_index(n);  // all remaining points coincide
      }
      double* cj = centroids.data() + static_cast<int64_t>(j) * d;
      std::copy_n(point(chosen), d, cj);
      for (int64_t i = 0; i < n; ++i)
        d2[static_cast<size_t>(i)] = std::min(d2[static_cast<size_t>(i)], dist2(point(i), cj));
    }

    std::vector<int> assign(static_cast<size_t>(n), -1);
    std::vector<double> trace;
    for (int it = 0; it < max_iter; ++it) {
      // assignment step; ties toward the lower cluster index
      bool changed = false;
      double sse = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        int arg = 0;
        double best = dist2(point(i), centroids.data());
        for (int j = 1; j < C; ++j) {
          double dj = dist2(point(i), centroids.data() + static_cast<int64_t>(j) * d);
          if (dj < best) {
            best = dj;
            arg = j;
          }
        }
        if (assign[static_cast<size_t>(i)] != arg) changed = true;
        assign[static_cast<size_t>(i)] = arg;
        sse += best;
      }
      trace.push_back(sse);
      if (!changed && it > 0) break;

      // update step: means of assigned points
      std::vector<double> sums(static_cast<size_t>(C) * d, 0.0);
      std::vector<int64_t> counts(static_cast<size_t>(C), 0);
      for (int64_t i = 0; i < n; ++i) {
        double* s = sums.data() + static_cast<int64_t>(assign[static_cast<size_t>(i)]) * d;
        const double* p = point(i);
        for (int64_t c = 0; c < d; ++c) s[c] += p[c];
        ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
      }
      for (int j = 0; j < C; ++j) {
        if (counts[static_cast<size_t>(j)] == 0) continue;
        double* cj = centroids.data() + static_cast<int64_t>(j) * d;
        for (int64_t c = 0; c < d; ++c)
          cj[c] = sums[static_cast<size_t>(j) * d + static_cast<size_t>(c)] /
                  static_cast<double>(counts[static_cast<size_t>(j)]);
      }
      // empty clusters re-seed from the point farthest from its centroid
      for (int j = 0; j < C; ++j) {
        if (counts[static_cast<size_t>(j)] != 0) continue;
        int64_t far_i = 0;
        double far_d = -1.0;
        for (int64_t i = 0; i < n; ++i) {
          double di = dist2(point(i),
                            centroids.data() + static_cast<int64_t>(assign[static_cast<size_t>(i)]) * d);
          if (di > far_d) {
            far_d = di;
            far_i = i;
          }
        }
        std::copy_n(point(far_i), d, centroids.begin() + static_cast<int64_t>(j) * d);
        assign[static_cast<size_t>(far_i)] = j;
        counts[static_cast<size_t>(j)] = 1;
      }
    }

    if (trace.back() < best_sse) {
      best_sse = trace.back();
      best_centroids = centroids;
      best_trace = trace;
    }
  }

  // unit-norm the winning centroids
  std::vector<float> out(static_cast<size_t>(C) * d);
  for (int j = 0; j < C; ++j) {
    std::vector<double> row(best_centroids.begin() + static_cast<int64_t>(j) * d,
                            best_centroids.begin() + static_cast<int64_t>(j + 1) * d);
    row = normalize_or_throw(std::move(row));
    for (int64_t c = 0; c < d; ++c)
      out[static_cast<size_t>(j) * d + static_cast<size_t>(c)] = static_cast<float>(row[c]);
  }
  return {num::Tensor<float>::from_vector({C, d}, out), best_sse, best_trace};
}

PrototypeBank build_bank(const ToyLM<float>& encoder, int route_id,
                         const std::vector<std::string>& queries, const BankConfig& cfg) {
  if (route_id < 0) raise(ErrorCode::config, "route id must be >= 0");
  if (queries.empty()) raise(ErrorCode::input, "cannot build a bank from zero queries");
  if (cfg.C < 1 || cfg.subsample_limit < 1) raise(ErrorCode::config, "bad bank config");

  std::vector<size_t> idx(queries.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (static_cast<int64_t>(queries.size()) > cfg.subsample_limit) {
    num::RandomStream rng(mix_seed(cfg.seed, tag_from_string("bank-subsample") +
                                                 static_cast<uint64_t>(route_id)));
    rng.shuffle(idx);
    idx.resize(static_cast<size_t>(cfg.subsample_limit));
    std::sort(idx.begin(), idx.end());
  }

  const int64_t d = encoder.config().d_model;
  std::vector<float> rows(idx.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < idx.size(); ++i) {
    auto e = embed_query(encoder, queries[idx[i]]);
    std::copy(e.vector.values().begin(), e.vector.values().end(),
              rows.begin() + static_cast<int64_t>(i) * d);
  }
  auto points =
      num::Tensor<float>::from_vector({static_cast<int64_t>(idx.size()), d}, rows);

  int c_eff = cfg.C;
  if (static_cast<int64_t>(idx.size()) < c_eff) {
    c_eff = static_cast<int>(idx.size());
    log::warn("route " + std::to_string(route_id) + ": clipping C from " +
              std::to_string(cfg.C) + " to " + std::to_string(c_eff) +
              " (only that many queries)");
  }
  auto km = kmeans(points, c_eff, cfg.n_init, cfg.max_iter,
                   mix_seed(cfg.seed, tag_from_string("bank") + static_cast<uint64_t>(route_id)));

  PrototypeBank bank;
  bank.route_id = route_id;
  bank.prototypes = km.centroids;
  bank.build_seed = cfg.seed;
  bank.encoder_fingerprint = encoder_fingerprint(encoder);
  bank.query_count = static_cast<int64_t>(idx.size());
  return bank;
}

RouteDecision route_query(const QueryEmbedding& e, const RegistryState& state) {
  if (state.banks.empty()) raise(ErrorCode::config, "routing with an empty registry");
  if (state.banks.find(0) == state.banks.end())
    raise(ErrorCode::config, "registry must hold the general route 0");
  const int64_t d = e.vector.shape()[0];

  RouteDecision dec;
  double best = -std::numeric_limits<double>::infinity();
  double runner = -std::numeric_limits<double>::infinity();
  for (const auto& [id, bank] : state.banks) {  // std::map: ascending id
    if (bank->dim() != d)
      raise(ErrorCode::dimension_mismatch, "bank dimension does not match the embedding");
    double s = -std::numeric_limits<double>::infinity();
    for (int64_t r = 0; r < bank->prototype_count(); ++r) {
      double dot = 0.0;
      for (int64_t c = 0; c < d; ++c)
        dot += static_cast<double>(e.vector.values()[c]) * bank->prototypes.at(r, c);
      s = std::max(s, dot);
    }
    dec.similarities[id] = s;
    if (s > best) {  // strict: ties keep the earlier (lower) id
      runner = best;
      best = s;
      dec.route = id;
    } else if (s > runner) {
      runner = s;
    }
  }
  dec.margin = state.banks.size() > 1 ? best - runner : 0.0;
  return dec;
}

Registry::Registry(std::string encoder_fp)
    : fingerprint_(std::move(encoder_fp)),
      state_(std::make_shared<RegistryState>(RegistryState{fingerprint_, {}})) {}

void Registry::attach(const PrototypeBank& bank) {
  if (bank.encoder_fingerprint != fingerprint_)
    raise(ErrorCode::compatibility,
          "bank was built under a different encoder (fingerprint mismatch)");
  if (bank.prototypes.shape().size() != 2 || bank.prototype_count() < 1)
    raise(ErrorCode::data, "bank holds no prototypes");
  for (int64_t r = 0; r < bank.prototype_count(); ++r) {
    double n2 = 0.0;
    for (int64_t c = 0; c < bank.dim(); ++c) n2 += static_cast<double>(bank.prototypes.at(r, c)) *
                                                   bank.prototypes.at(r, c);
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
      raise(ErrorCode::data, "bank prototype is not unit-norm");
  }
  std::lock_guard<std::mutex> lock(mu_);
  if (state_->banks.count(bank.route_id))
    raise(ErrorCode::conflict, "route " + std::to_string(bank.route_id) + " already attached");
  auto next = std::make_shared<RegistryState>(*state_);
  next->banks[bank.route_id] = std::make_shared<const PrototypeBank>(bank);
  state_ = std::move(next);
}

void Registry::detach(int route_id) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = state_->banks.find(route_id);
  if (it == state_->banks.end())
    raise(ErrorCode::range, "route " + std::to_string(route_id) + " is not attached");
  auto next = std::make_shared<RegistryState>(*state_);
  next->banks.erase(route_id);
  state_ = std::move(next);
}

std::shared_ptr<const RegistryState> Registry::snapshot() const {
  std::lock_guard<std::mutex> lock(mu_);
  return state_;
}

RouteDecision Registry::route(const QueryEmbedding& e) const { return route_query(e, *snapshot()); }

void save_bank(const std::string& path, const PrototypeBank& bank) {
  nlohmann::json j;
  j["C"] = bank.prototype_count();
  j["d"] = bank.dim();
  j["encoder"] = bank.encoder_fingerprint;
  j["queries"] = bank.query_count;
  j["route"] = bank.route_id;
  j["seed"] = bank.build_seed;
  const std::string header = j.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::io, "cannot open " + path + " for writing");
  out.write("PPRB", 4);
  uint32_t len = static_cast<uint32_t>(header.size());
  unsigned char len_le[4] = {static_cast<unsigned char>(len & 0xff),
                             static_cast<unsigned char>((len >> 8) & 0xff),
                             static_cast<unsigned char>((len >> 16) & 0xff),
                             static_cast<unsigned char>((len >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(len_le), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  static_assert(sizeof(float) == 4);
  const auto& vals = bank.prototypes.values();
  out.write(reinterpret_cast<const char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(float)));
  if (!out) raise(ErrorCode::io, "short write to " + path);
}

PrototypeBank load_bank(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::io, "cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PPRB", 4) != 0)
    raise(ErrorCode::corruption, path + ": bad bank magic");
  unsigned char len_le[4];
  if (!in.read(reinterpret_cast<char*>(len_le), 4))
    raise(ErrorCode::corruption, path + ": truncated header length");
  uint32_t len = static_cast<uint32_t>(len_le[0]) | (static_cast<uint32_t>(len_le[1]) << 8) |
                 (static_cast<uint32_t>(len_le[2]) << 16) |
                 (static_cast<uint32_t>(len_le[3]) << 24);
  if (len == 0 || len > (1u << 20)) raise(ErrorCode::corruption, path + ": implausible header");
  std::string header(len, '\0');
  if (!in.read(header.data(), len)) raise(ErrorCode::corruption, path + ": truncated header");

  nlohmann::json j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded()) raise(ErrorCode::corruption, path + ": bank header is not valid JSON");
  for (const char* key : {"C", "d", "encoder", "queries", "route", "seed"})
    if (!j.contains(key)) raise(ErrorCode::corruption, path + ": bank header misses " + key);

  PrototypeBank bank;
  bank.route_id = j["route"].get<int>();
  bank.build_seed = j["seed"].get<uint64_t>();
  bank.encoder_fingerprint = j["encoder"].get<std::string>();
  bank.query_count = j["queries"].get<int64_t>();
  const int64_t C = j["C"].get<int64_t>();
  const int64_t d = j["d"].get<int64_t>();
  if (C < 1 || d < 1) raise(ErrorCode::corruption, path + ": bad bank dimensions");

  std::vector<float> vals(static_cast<size_t>(C * d));
  if (!in.read(reinterpret_cast<char*>(vals.data()),
               static_cast<std::streamsize>(vals.size() * sizeof(float))))
    raise(ErrorCode::corruption, path + ": truncated prototype payload");
  if (in.peek() != std::char_traits<char>::eof())
    raise(ErrorCode::corruption, path + ": trailing bytes after prototypes");
  bank.prototypes = num::Tensor<float>::from_vector({C, d}, vals);

  for (int64_t r = 0; r < C; ++r) {
    double n2 = 0.0;
    for (int64_t c = 0; c < d; ++c)
      n2 += static_cast<double>(bank.prototypes.at(r, c)) * bank.prototypes.at(r, c);
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
      raise(ErrorCode::corruption, path + ": prototype row is not unit-norm");
  }
  return bank;
}

}  // namespace gag
