// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0

#include "gag/tokenizer.hpp"

#include "gag/errors.hpp"

namespace gag {

std::vector<int> Tokenizer::encode(const std::string& text, bool add_bos, bool add_eos) const {
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  if (add_bos) ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(kByteBase + static_cast<int>(c));
  if (add_eos) ids.push_back(kEos);
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= kVocabSize)
      raise(ErrorCode::range, "token id " + std::to_string(id) + " outside vocabulary");
    if (id >= kByteBase) out.push_back(static_cast<char>(id - kByteBase));
  }
  return out;
}

}  // namespace gag
