// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace gag::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

// Level comes from GAG_LOG_LEVEL (error|warn|info|debug), default warn.
inline Level& threshold() {
  static Level lvl = [] {
    const char* env = std::getenv("GAG_LOG_LEVEL");
    if (env == nullptr) return Level::warn;
    if (std::strcmp(env, "error") == 0) return Level::error;
    if (std::strcmp(env, "warn") == 0) return Level::warn;
    if (std::strcmp(env, "info") == 0) return Level::info;
    if (std::strcmp(env, "debug") == 0) return Level::debug;
    return Level::warn;
  }();
  return lvl;
}

inline void write(Level lvl, const std::string& msg) {
  if (static_cast<int>(lvl) > static_cast<int>(threshold())) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::fprintf(stderr, "[gag:%s] %s\n", names[static_cast<int>(lvl)], msg.c_str());
}

inline void error(const std::string& m) { write(Level::error, m); }
inline void warn(const std::string& m) { write(Level::warn, m); }
inline void info(const std::string& m) { write(Level::info, m); }
inline void debug(const std::string& m) { write(Level::debug, m); }

}  // namespace gag::log
