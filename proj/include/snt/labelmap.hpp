#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "snt/error.hpp"

namespace snt {

// Pixel value reserved for "ignore" in label maps (and the PGM on-disk cap).
inline constexpr std::int32_t kIgnoreLabel = 255;

// Dense H×W integer raster; used for both category labels and instance ids.
struct IntMap {
  int h = 0;
  int w = 0;
  std::vector<std::int32_t> v;

  IntMap() = default;
  IntMap(int height, int width, std::int32_t fill = 0)
      : h(height), w(width), v(static_cast<std::size_t>(height) * width, fill) {}

  std::int32_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
  std::int32_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
  std::size_t size() const { return v.size(); }
  bool same_dims(const IntMap& o) const { return h == o.h && w == o.w; }

  bool operator==(const IntMap&) const = default;
};

using LabelMap = IntMap;
using InstanceMap = IntMap;

}  // namespace snt
