#pragma once

namespace nsgp::detail {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};

inline constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace nsgp::detail
