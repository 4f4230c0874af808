#pragma once

namespace jscc {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace jscc
