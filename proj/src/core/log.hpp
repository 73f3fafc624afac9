#pragma once

#include <sstream>
#include <string>
#include <string_view>

namespace ulfb::log {

enum class Level { Debug = 0, Info = 1, Warn = 2 };

void set_level(Level level);
Level level();
// Reads ULFBRIDGE_LOG={debug|info|warn}; unknown values leave the level unchanged.
void init_from_env();
bool parse_level(std::string_view text, Level& out);
void write(Level level, const std::string& message);

namespace detail {
template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

template <typename... Args>
void debug(const Args&... args) {
  if (level() <= Level::Debug) write(Level::Debug, detail::concat(args...));
}
template <typename... Args>
void info(const Args&... args) {
  if (level() <= Level::Info) write(Level::Info, detail::concat(args...));
}
template <typename... Args>
void warn(const Args&... args) {
  write(Level::Warn, detail::concat(args...));
}

}  // namespace ulfb::log
