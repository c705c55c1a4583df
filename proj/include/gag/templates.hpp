// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Prompt-template rendering and QA-example construction shared by training
// and inference. Templates are plain UTF-8 assets with {name} placeholders.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gag/errors.hpp"
#include "gag/lm.hpp"
#include "gag/tokenizer.hpp"

namespace gag {

struct QAPair {
  std::string question;
  std::string answer;
};

// Replaces every "{key}" occurrence for the given fields; placeholders not
// listed (e.g. {anchor}) pass through untouched for later structural handling.
inline std::string render_template(const std::string& tmpl,
                                   const std::vector<std::pair<std::string, std::string>>& fields) {
  std::string out = tmpl;
  for (const auto& [key, value] : fields) {
    const std::string needle = "{" + key + "}";
    size_t pos = 0;
    while ((pos = out.find(needle, pos)) != std::string::npos) {
      out.replace(pos, needle.size(), value);
      pos += value.size();
    }
  }
  return out;
}

// BOS + prompt bytes + answer bytes + EOS, with loss over answer bytes and
// the closing EOS only (prompt positions masked out).
inline LMExample build_example(const Tokenizer& tok, const std::string& prompt,
                               const std::string& answer) {
  if (prompt.empty()) raise(ErrorCode::input, "example prompt is empty");
  std::vector<int> ids = tok.encode(prompt, /*add_bos=*/true, /*add_eos=*/false);
  const size_t prompt_len = ids.size();  // BOS + prompt bytes
  for (int id : tok.encode(answer)) ids.push_back(id);
  ids.push_back(Tokenizer::kEos);
  LMExample ex;
  ex.ids = std::move(ids);
  ex.target_mask.assign(ex.ids.size() - 1, 0);
  for (size_t t = 0; t + 1 < ex.ids.size(); ++t)
    if (t + 1 >= prompt_len) ex.target_mask[t] = 1;
  return ex;
}

}  // namespace gag
