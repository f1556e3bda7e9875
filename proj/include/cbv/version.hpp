#pragma once

namespace cbv {

inline constexpr const char kToolVersion[] = "0.1.0";

}  // namespace cbv
