#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace segkey {

// Per-pixel class ids, row-major height x width.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), data(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const {
    return data[y * width + x];
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace segkey
