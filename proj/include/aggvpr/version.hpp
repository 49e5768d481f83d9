#pragma once

namespace aggvpr {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace aggvpr
