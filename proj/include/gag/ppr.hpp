// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Prototype plug-and-play routing: frozen-encoder query embeddings, per-route
// prototype banks built by k-means over historical queries, and
// nearest-prototype cosine routing. Banks attach and detach at runtime
// without touching existing routes.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "gag/lm.hpp"

namespace gag {

// Unit-norm pooled embedding of one query.
struct QueryEmbedding {
  num::Tensor<float> vector;  // shape {d}, ||vector|| = 1 within 1e-6
};

// Frozen set of unit-norm prototypes for one route. Route 0 is the general
// route and is treated as a peer of the domain routes.
struct PrototypeBank {
  int route_id = 0;
  num::Tensor<float> prototypes;  // shape {C, d}, rows unit-norm
  uint64_t build_seed = 0;
  std::string encoder_fingerprint;
  int64_t query_count = 0;  // queries actually clustered (after subsampling)

  int64_t prototype_count() const { return prototypes.shape()[0]; }
  int64_t dim() const { return prototypes.shape()[1]; }
};

struct RouteDecision {
  int route = -1;
  std::map<int, double> similarities;  // per route: max cosine over prototypes
  double margin = 0.0;                 // winner minus runner-up; 0 if only one route
};

struct KMeansResult {
  num::Tensor<float> centroids;   // shape {C, d}, rows re-normalized to unit
  double sse = 0.0;               // winning restart, Euclidean, pre-normalization
  std::vector<double> sse_trace;  // winning restart, one entry per Lloyd iteration
};

struct BankConfig {
  int C = 32;
  int64_t subsample_limit = 10000;
  int n_init = 10;
  int max_iter = 100;
  uint64_t seed = 0;
};

// Content hash of the encoder (config + every parameter byte). Banks carry it
// so that prototypes built under a different encoder are rejected.
std::string encoder_fingerprint(const ToyLM<float>& encoder);

// Mean of the encoder's last-layer states over non-PAD positions, then
// l2-normalized. The encoder must be frozen; the query must be non-empty.
QueryEmbedding embed_query(const ToyLM<float>& encoder, const std::string& query);
QueryEmbedding embed_query(const ToyLM<float>& encoder, const std::vector<int>& ids);

// Lloyd's algorithm with k-means++ seeding, best of n_init restarts by
// within-cluster SSE, ties toward the earlier restart. Empty clusters are
// re-seeded from the point farthest from its assigned centroid. Centroids are
// re-normalized to unit length after convergence.
KMeansResult kmeans(const num::Tensor<float>& points, int C, int n_init, int max_iter,
                    uint64_t seed);

// Subsample (deterministic in cfg.seed), embed, cluster, stamp provenance.
// C is clipped to the number of available queries, with a warning.
PrototypeBank build_bank(const ToyLM<float>& encoder, int route_id,
                         const std::vector<std::string>& queries, const BankConfig& cfg = {});

// An immutable snapshot of the attached banks. route() reads one snapshot for
// its whole decision, so concurrent attach/detach can never tear a decision.
struct RegistryState {
  std::string encoder_fingerprint;
  std::map<int, std::shared_ptr<const PrototypeBank>> banks;
};

// Pure function of (embedding, snapshot). The registry must hold at least the
// general route 0. s_i = max dot(e, p) over bank i's prototypes; the chosen
// route is the argmax, ties broken toward the lowest route id.
RouteDecision route_query(const QueryEmbedding& e, const RegistryState& state);

class Registry {
 public:
  explicit Registry(std::string encoder_fp);

  void attach(const PrototypeBank& bank);
  void detach(int route_id);

  std::shared_ptr<const RegistryState> snapshot() const;
  RouteDecision route(const QueryEmbedding& e) const;
  const std::string& fingerprint() const { return fingerprint_; }

 private:
  std::string fingerprint_;
  mutable std::mutex mu_;
  std::shared_ptr<const RegistryState> state_;
};

// Bank file: magic "PPRB", uint32 little-endian header length, UTF-8 JSON
// header, then C*d little-endian float32 prototype values, row-major.
void save_bank(const std::string& path, const PrototypeBank& bank);
PrototypeBank load_bank(const std::string& path);

}  // namespace gag
