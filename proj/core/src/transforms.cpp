#include "segkey/transforms.hpp"

#include <algorithm>

#include "segkey/error.hpp"
#include "segkey/ops.hpp"

namespace segkey {
namespace {

struct Layout {
  std::size_t n, c, h, w;
};

Layout layout_of(const Tensor& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw ShapeError(std::string(op) + ": expected (c,h,w) or (n,c,h,w), got " +
                   shape_string(x.shape()));
}

std::size_t channels_of(const Shape& shape) {
  if (shape.size() == 3) return shape[0];
  if (shape.size() == 4) return shape[1];
  throw ShapeError("expected rank 3 or 4 tensor, got " + shape_string(shape));
}

}  // namespace

std::string to_string(EncryptionMethod method) {
  return method == EncryptionMethod::kShfInput ? "shf" : "cp";
}

EncryptionMethod parse_encryption_method(const std::string& text) {
  if (text == "shf" || text == "SHF") return EncryptionMethod::kShfInput;
  if (text == "cp" || text == "CP") return EncryptionMethod::kCpTap;
  throw FormatError("unknown encryption method '" + text + "'");
}

std::size_t required_key_length(const EncryptionSpec& spec,
                                std::size_t channels) {
  if (spec.method == EncryptionMethod::kCpTap) return channels;
  return channels * spec.block_size * spec.block_size;
}

void validate_encryption(const EncryptionSpec& spec, const PermutationKey& key,
                         const Shape& shape) {
  const std::size_t c = channels_of(shape);
  const KeyMethod expected = spec.method == EncryptionMethod::kCpTap
                                 ? KeyMethod::kCp
                                 : KeyMethod::kShf;
  if (key.method != expected) {
    throw ShapeError(to_string(key.method) + " key used for " +
                     to_string(spec.method) + " encryption");
  }
  if (spec.method == EncryptionMethod::kCpTap) {
    if (spec.tap < 1 || spec.tap > 6) {
      throw ShapeError("tap must be in 1..6, got " + std::to_string(spec.tap));
    }
  } else {
    const std::size_t m = spec.block_size;
    const std::size_t h = shape[shape.size() - 2], w = shape.back();
    if (m == 0 || h % m != 0 || w % m != 0) {
      throw ShapeError("SHF block size " + std::to_string(m) +
                       " does not divide image " + shape_string(shape));
    }
  }
  const std::size_t need = required_key_length(spec, c);
  if (key.length() != need) {
    throw ShapeError(to_string(spec.method) + " key of length " +
                     std::to_string(key.length()) + " for tensor " +
                     shape_string(shape) + " (needs " + std::to_string(need) +
                     ")");
  }
  if (!is_bijection(key.perm)) throw ShapeError("key is not a bijection");
}

Tensor shf_apply(const Tensor& x, const PermutationKey& key,
                 std::size_t block_size, Direction direction) {
  const Layout d = layout_of(x, "shf_apply");
  validate_encryption({EncryptionMethod::kShfInput, 0, block_size}, key,
                      x.shape());
  const std::size_t m = block_size;
  const std::size_t len = d.c * m * m;
  // offsets[i]: position of flattened block element i relative to the
  // block's top-left corner in channel 0.
  std::vector<std::size_t> offsets(len);
  for (std::size_t ch = 0; ch < d.c; ++ch) {
    for (std::size_t dy = 0; dy < m; ++dy) {
      for (std::size_t dx = 0; dx < m; ++dx) {
        offsets[(ch * m + dy) * m + dx] = (ch * d.h + dy) * d.w + dx;
      }
    }
  }
  const std::vector<std::size_t> alpha = key.zero_based();
  Tensor out(x.shape());
  const std::size_t sample = d.c * d.h * d.w;
  for (std::size_t s = 0; s < d.n; ++s) {
    const double* src = x.raw() + s * sample;
    double* dst = out.raw() + s * sample;
    for (std::size_t by = 0; by < d.h; by += m) {
      for (std::size_t bx = 0; bx < d.w; bx += m) {
        const std::size_t corner = by * d.w + bx;
        for (std::size_t i = 0; i < len; ++i) {
          if (direction == Direction::kEncrypt) {
            dst[corner + offsets[i]] = src[corner + offsets[alpha[i]]];
          } else {
            dst[corner + offsets[alpha[i]]] = src[corner + offsets[i]];
          }
        }
      }
    }
  }
  return out;
}

Tensor cp_apply(const Tensor& x, const PermutationKey& key,
                Direction direction) {
  const Layout d = layout_of(x, "cp_apply");
  validate_encryption({EncryptionMethod::kCpTap, 1, 1}, key, x.shape());
  const std::vector<std::size_t> beta = key.zero_based();
  const std::size_t plane = d.h * d.w;
  Tensor out(x.shape());
  for (std::size_t s = 0; s < d.n; ++s) {
    for (std::size_t j = 0; j < d.c; ++j) {
      const std::size_t from = direction == Direction::kEncrypt ? beta[j] : j;
      const std::size_t to = direction == Direction::kEncrypt ? j : beta[j];
      const double* src = x.raw() + (s * d.c + from) * plane;
      std::copy(src, src + plane, out.raw() + (s * d.c + to) * plane);
    }
  }
  return out;
}

Var tap_forward(GradTape& tape, Var x, const PermutationKey& key) {
  validate_encryption({EncryptionMethod::kCpTap, 1, 1}, key,
                      tape.value(x).shape());
  const std::vector<std::size_t> beta = key.zero_based();
  return ops::channel_gather(tape, x, beta);
}

}  // namespace segkey
