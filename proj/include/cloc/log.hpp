#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <utility>

namespace cloc {

using WarningSink = std::function<void(const std::string&)>;

namespace detail {
inline WarningSink& warning_sink_slot() {
  static WarningSink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}
}  // namespace detail

inline void warn(const std::string& message) {
  if (auto& sink = detail::warning_sink_slot()) sink(message);
}

/// Redirects warnings for the lifetime of the guard.
class ScopedWarningSink {
 public:
  explicit ScopedWarningSink(WarningSink sink) : previous_(std::move(detail::warning_sink_slot())) {
    detail::warning_sink_slot() = std::move(sink);
  }
  ~ScopedWarningSink() { detail::warning_sink_slot() = std::move(previous_); }
  ScopedWarningSink(const ScopedWarningSink&) = delete;
  ScopedWarningSink& operator=(const ScopedWarningSink&) = delete;

 private:
  WarningSink previous_;
};

}  // namespace cloc
