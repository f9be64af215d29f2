#pragma once

namespace stit {
inline constexpr const char* kVersion = "0.1.0";
}
