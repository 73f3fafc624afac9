#include "core/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>

namespace ulfb::log {
namespace {
std::atomic<int> g_level{static_cast<int>(Level::Info)};
std::mutex g_mutex;
}  // namespace

void set_level(Level l) { g_level.store(static_cast<int>(l)); }

Level level() { return static_cast<Level>(g_level.load()); }

bool parse_level(std::string_view text, Level& out) {
  if (text == "debug") out = Level::Debug;
  else if (text == "info") out = Level::Info;
  else if (text == "warn") out = Level::Warn;
  else return false;
  return true;
}

void init_from_env() {
  if (const char* env = std::getenv("ULFBRIDGE_LOG")) {
    Level l;
    if (parse_level(env, l)) set_level(l);
  }
}

void write(Level l, const std::string& message) {
  static constexpr const char* tags[] = {"debug", "info", "warn"};
  std::lock_guard lock(g_mutex);
  std::cerr << "[ulfbridge:" << tags[static_cast<int>(l)] << "] " << message << '\n';
}

}  // namespace ulfb::log
