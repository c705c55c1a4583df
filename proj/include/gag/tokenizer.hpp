// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenizer: 256 byte tokens plus PAD/BOS/EOS/ANCHOR specials.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gag {

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kAnchor = 3;
  static constexpr int kByteBase = 4;
  static constexpr int kVocabSize = 260;

  int vocab_size() const { return kVocabSize; }

  static bool is_special(int id) { return id >= 0 && id < kByteBase; }

  // Bytes of `text` mapped 1:1 to token ids; optional BOS/EOS framing.
  std::vector<int> encode(const std::string& text, bool add_bos = false, bool add_eos = false) const;

  // Inverse of encode. Special tokens produce no bytes, so decode(encode(t))
  // round-trips any byte string exactly.
  std::string decode(const std::vector<int>& ids) const;
};

}  // namespace gag
