#include "segkey/dataio.hpp"

#include <algorithm>
#include <cmath>

#include "segkey/error.hpp"

namespace segkey {

SegSample crop_resize(const SegSample& sample, std::size_t top,
                      std::size_t left, std::size_t crop_h, std::size_t crop_w,
                      std::size_t out_size) {
  const std::size_t c = sample.image.dim(0);
  const std::size_t h = sample.image.dim(1), w = sample.image.dim(2);
  if (crop_h == 0 || crop_w == 0 || top + crop_h > h || left + crop_w > w ||
      out_size == 0) {
    throw ShapeError("crop_resize: window outside image");
  }
  SegSample out{Tensor({c, out_size, out_size}), LabelMap(out_size, out_size)};
  const double sy = static_cast<double>(crop_h) / static_cast<double>(out_size);
  const double sx = static_cast<double>(crop_w) / static_cast<double>(out_size);
  for (std::size_t oy = 0; oy < out_size; ++oy) {
    double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(crop_h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, crop_h - 1);
    const double ty = fy - static_cast<double>(y0);
    const std::size_t ny = std::min(
        static_cast<std::size_t>((static_cast<double>(oy) + 0.5) * sy), crop_h - 1);
    for (std::size_t ox = 0; ox < out_size; ++ox) {
      double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(crop_w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, crop_w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* plane = sample.image.raw() + ch * h * w;
        auto px = [&](std::size_t yy, std::size_t xx) {
          return plane[(top + yy) * w + left + xx];
        };
        const double a = px(y0, x0) * (1 - tx) + px(y0, x1) * tx;
        const double b = px(y1, x0) * (1 - tx) + px(y1, x1) * tx;
        out.image[(ch * out_size + oy) * out_size + ox] = a * (1 - ty) + b * ty;
      }
      const std::size_t nx = std::min(
          static_cast<std::size_t>((static_cast<double>(ox) + 0.5) * sx), crop_w - 1);
      out.label.at(oy, ox) = sample.label.at(top + ny, left + nx);
    }
  }
  return out;
}

SegSample random_resized_crop(const SegSample& sample, double scale_lo,
                              double scale_hi, std::size_t out_size, Rng& rng) {
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0)) {
    throw ShapeError("random_resized_crop: need 0 < lo <= hi <= 1");
  }
  const std::size_t h = sample.image.dim(1), w = sample.image.dim(2);
  const double area = static_cast<double>(h * w);
  std::uniform_real_distribution<double> scale(scale_lo, scale_hi);
  std::uniform_real_distribution<double> log_ratio(std::log(3.0 / 4.0),
                                                   std::log(4.0 / 3.0));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale(rng);
    const double ratio = std::exp(log_ratio(rng));
    const auto cw = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto ch = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (cw == 0 || ch == 0 || cw > w || ch > h) continue;
    std::uniform_int_distribution<std::size_t> top(0, h - ch);
    std::uniform_int_distribution<std::size_t> left(0, w - cw);
    const std::size_t t = top(rng);
    const std::size_t l = left(rng);
    return crop_resize(sample, t, l, ch, cw, out_size);
  }
  return crop_resize(sample, 0, 0, h, w, out_size);
}

SegSample hflip(const SegSample& sample) {
  SegSample out = sample;
  const std::size_t c = sample.image.dim(0);
  const std::size_t h = sample.image.dim(1), w = sample.image.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out.image[(ch * h + y) * w + x] = sample.image[(ch * h + y) * w + (w - 1 - x)];
      }
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out.label.at(y, x) = sample.label.at(y, w - 1 - x);
    }
  }
  return out;
}

SegSample hflip(const SegSample& sample, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ShapeError("hflip: p must be in [0,1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Always draw so the stream advances identically for any p.
  const bool flip = unit(rng) < p;
  return flip ? hflip(sample) : sample;
}

}  // namespace segkey
