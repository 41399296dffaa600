#pragma once

namespace advcaptcha {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace advcaptcha
