#pragma once

namespace cst {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace cst
