#pragma once

namespace bladca {

inline constexpr const char* version_string = "0.1.0";

} // namespace bladca
