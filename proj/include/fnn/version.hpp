#pragma once

namespace fnn {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace fnn
