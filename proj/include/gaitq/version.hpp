#pragma once

namespace gaitq {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace gaitq
