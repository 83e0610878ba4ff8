#pragma once

namespace cloc {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace cloc
