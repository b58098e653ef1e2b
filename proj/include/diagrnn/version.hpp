#pragma once

namespace diagrnn {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace diagrnn
