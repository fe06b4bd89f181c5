#pragma once

#include <array>
#include <cstdint>

namespace attn_distill {

using Rgb = std::array<std::uint8_t, 3>;

/// Attention color scale: 0.0 blue, 0.25 cyan, 0.5 green, 0.75 yellow,
/// 1.0 red, linear between stops. Inputs are clamped to [0,1].
Rgb attention_color(double weight);

/// Alpha blend of `over` onto `base`.
Rgb blend(const Rgb& base, const Rgb& over, double alpha);

}  // namespace attn_distill
