#include "attn_distill/colormap.hpp"

#include <algorithm>
#include <cmath>

namespace attn_distill {

namespace {

constexpr std::array<Rgb, 5> kStops{{{0, 0, 255}, {0, 255, 255}, {0, 255, 0}, {255, 255, 0}, {255, 0, 0}}};

}  // namespace

Rgb attention_color(double weight) {
  const double w = std::isnan(weight) ? 0.0 : std::clamp(weight, 0.0, 1.0);
  const double pos = w * (kStops.size() - 1);
  const auto lo = std::min<std::size_t>(static_cast<std::size_t>(pos), kStops.size() - 2);
  const double t = pos - static_cast<double>(lo);
  Rgb out{};
  for (int c = 0; c < 3; ++c) {
    out[c] = static_cast<std::uint8_t>(std::lround((1.0 - t) * kStops[lo][c] + t * kStops[lo + 1][c]));
  }
  return out;
}

Rgb blend(const Rgb& base, const Rgb& over, double alpha) {
  Rgb out{};
  for (int c = 0; c < 3; ++c) {
    out[c] = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * base[c] + alpha * over[c]));
  }
  return out;
}

}  // namespace attn_distill
