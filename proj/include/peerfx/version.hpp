#pragma once

namespace peerfx {
inline constexpr const char* kVersion = "0.1.0";
}
