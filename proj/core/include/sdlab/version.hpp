#pragma once

namespace sdlab {
inline constexpr const char* kVersion = "0.1.0";
}
