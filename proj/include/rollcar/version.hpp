#pragma once

namespace rollcar {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace rollcar
