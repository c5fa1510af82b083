// Overlay rendering for grounding output; plain binary PPM, no dependencies.
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace evl {

inline void write_ppm(const std::string& path, std::int64_t h, std::int64_t w,
                      const std::vector<std::uint8_t>& rgb) {
  if (static_cast<std::int64_t>(rgb.size()) != 3 * h * w)
    throw std::runtime_error("write_ppm: pixel buffer size mismatch");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

// Fixed overlay palette, indexed by entity slot modulo size.
inline const std::array<std::array<std::uint8_t, 3>, 6>& overlay_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 6> p = {{
      {{255, 0, 255}},
      {{0, 255, 255}},
      {{255, 160, 0}},
      {{128, 255, 0}},
      {{255, 64, 64}},
      {{64, 64, 255}},
  }};
  return p;
}

// frame: 3*H*W channel-major u8; mask: H*W values in [0,1]. 50% alpha blend
// of the palette color, weighted by the mask value.
inline std::vector<std::uint8_t> blend_overlay(const std::vector<std::uint8_t>& frame,
                                               const std::vector<float>& mask,
                                               std::int64_t h, std::int64_t w,
                                               std::size_t entity) {
  const auto& color = overlay_palette()[entity % overlay_palette().size()];
  std::vector<std::uint8_t> out(static_cast<std::size_t>(3 * h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const float a = 0.5f * mask[static_cast<std::size_t>(y * w + x)];
      for (int c = 0; c < 3; ++c) {
        const float src = static_cast<float>(frame[static_cast<std::size_t>((c * h + y) * w + x)]);
        const float v = src * (1.0f - a) + static_cast<float>(color[static_cast<std::size_t>(c)]) * a;
        // interleaved RGB for PPM
        out[static_cast<std::size_t>((y * w + x) * 3 + c)] = static_cast<std::uint8_t>(v + 0.5f);
      }
    }
  return out;
}

}  // namespace evl
