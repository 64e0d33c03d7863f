#include "segkey/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "segkey/error.hpp"

namespace segkey::ops {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct ConvGeometry {
  std::size_t in_c, h, w, k, stride, pad, oh, ow;
  std::size_t rows() const { return in_c * k * k; }
  std::size_t cols() const { return oh * ow; }
};

// Unfolds one (in_c, h, w) sample into a (in_c*k*k, oh*ow) matrix.
void im2col(const double* src, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.cols();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) -
                          static_cast<long>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* line = src + (c * g.h + iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) -
                            static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : line[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dst) {
  const std::size_t p = g.cols();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) -
                          static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* line = dst + (c * g.h + iy) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) -
                            static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

void require_rank4(const Tensor& t, const char* op) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected rank-4 input, got " +
                     shape_string(t.shape()));
  }
}

}  // namespace

Var conv2d(GradTape& tape, Var x, Var weight, Var bias, std::size_t stride,
           std::size_t padding) {
  const Tensor& in = tape.value(x);
  const Tensor& wt = tape.value(weight);
  const Tensor& bs = tape.value(bias);
  require_rank4(in, "conv2d");
  if (wt.rank() != 4 || wt.dim(2) != wt.dim(3)) {
    throw ShapeError("conv2d: weight must be (out_c, in_c, k, k), got " +
                     shape_string(wt.shape()));
  }
  if (wt.dim(1) != in.dim(1)) {
    throw ShapeError("conv2d: input " + shape_string(in.shape()) + " has " +
                     std::to_string(in.dim(1)) + " channels but weight " +
                     shape_string(wt.shape()) + " expects " +
                     std::to_string(wt.dim(1)));
  }
  if (bs.size() != wt.dim(0)) {
    throw ShapeError("conv2d: bias " + shape_string(bs.shape()) +
                     " does not match " + std::to_string(wt.dim(0)) +
                     " output channels");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t k = wt.dim(2);
  if (in.dim(2) + 2 * padding < k || in.dim(3) + 2 * padding < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) +
                     " larger than padded input " + shape_string(in.shape()));
  }
  ConvGeometry g{in.dim(1), in.dim(2), in.dim(3), k, stride, padding, 0, 0};
  g.oh = (g.h + 2 * padding - k) / stride + 1;
  g.ow = (g.w + 2 * padding - k) / stride + 1;
  const std::size_t n = in.dim(0);
  const std::size_t out_c = wt.dim(0);

  Tensor out({n, out_c, g.oh, g.ow});
  std::vector<double> cols(g.rows() * g.cols());
  ConstMatrixMap w_mat(wt.raw(), out_c, g.rows());
  ConstMatrixMap cols_mat(cols.data(), g.rows(), g.cols());
  for (std::size_t s = 0; s < n; ++s) {
    im2col(in.raw() + s * g.in_c * g.h * g.w, g, cols.data());
    MatrixMap o(out.raw() + s * out_c * g.cols(), out_c, g.cols());
    o.noalias() = w_mat * cols_mat;
    for (std::size_t c = 0; c < out_c; ++c) o.row(c).array() += bs[c];
  }

  return tape.record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, g, n, out_c](GradTape& t, const Tensor& dy) {
        const Tensor& in = t.value(x);
        const Tensor& wt = t.value(weight);
        const bool need_x = t.requires_grad(x);
        const bool need_w = t.requires_grad(weight);
        const bool need_b = t.requires_grad(bias);
        std::vector<double> cols(g.rows() * g.cols());
        std::vector<double> dcols(need_x ? g.rows() * g.cols() : 0);
        ConstMatrixMap w_mat(wt.raw(), out_c, g.rows());
        Tensor* dw = need_w ? &t.grad_buffer(weight) : nullptr;
        Tensor* db = need_b ? &t.grad_buffer(bias) : nullptr;
        Tensor* dx = need_x ? &t.grad_buffer(x) : nullptr;
        for (std::size_t s = 0; s < n; ++s) {
          ConstMatrixMap dy_mat(dy.raw() + s * out_c * g.cols(), out_c,
                                g.cols());
          if (dw) {
            im2col(in.raw() + s * g.in_c * g.h * g.w, g, cols.data());
            ConstMatrixMap cols_mat(cols.data(), g.rows(), g.cols());
            MatrixMap dw_mat(dw->raw(), out_c, g.rows());
            dw_mat.noalias() += dy_mat * cols_mat.transpose();
          }
          if (db) {
            // Plain loop: Eigen's vectorised sum groups terms by address
            // alignment, which would make training runs differ in the last bit.
            const std::size_t cols_n = g.cols();
            for (std::size_t c = 0; c < out_c; ++c) {
              const double* row = dy.raw() + (s * out_c + c) * cols_n;
              double acc = 0.0;
              for (std::size_t k = 0; k < cols_n; ++k) acc += row[k];
              (*db)[c] += acc;
            }
          }
          if (dx) {
            MatrixMap dcols_mat(dcols.data(), g.rows(), g.cols());
            dcols_mat.noalias() = w_mat.transpose() * dy_mat;
            col2im_add(dcols.data(), g, dx->raw() + s * g.in_c * g.h * g.w);
          }
        }
      });
}

Var relu(GradTape& tape, Var x) {
  const Tensor& in = tape.value(x);
  Tensor out = in;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(out), {x}, [x](GradTape& t, const Tensor& dy) {
    const Tensor& in = t.value(x);
    Tensor& dx = t.grad_buffer(x);
    // Subgradient at exactly 0 is 0.
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (in[i] > 0.0) dx[i] += dy[i];
    }
  });
}

Var add(GradTape& tape, Var a, Var b) {
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  if (ta.shape() != tb.shape()) {
    throw ShapeError("add: shapes " + shape_string(ta.shape()) + " and " +
                     shape_string(tb.shape()) + " differ");
  }
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](GradTape& t, const Tensor& dy) {
                       t.accumulate(a, dy);
                       t.accumulate(b, dy);
                     });
}

Var batch_norm(GradTape& tape, Var x, Var gamma, Var beta,
               BatchNormState& state, BnMode mode) {
  const Tensor& in = tape.value(x);
  require_rank4(in, "batch_norm");
  const std::size_t n = in.dim(0), c = in.dim(1);
  const std::size_t plane = in.dim(2) * in.dim(3);
  const Tensor& g = tape.value(gamma);
  const Tensor& b = tape.value(beta);
  if (g.size() != c || b.size() != c || state.running_mean.size() != c ||
      state.running_var.size() != c) {
    throw ShapeError("batch_norm: parameters do not match " +
                     std::to_string(c) + " channels");
  }
  const double count = static_cast<double>(n * plane);

  // Normalised values are kept for the backward pass.
  Tensor xhat(in.shape());
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (mode == BnMode::kTrain) {
      double sum = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double* p = in.raw() + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      mean = sum / count;
      double sq = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double* p = in.raw() + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / count;
      const double unbiased = count > 1.0 ? sq / (count - 1.0) : var;
      state.running_mean[ch] =
          (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean;
      state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] +
                              state.momentum * unbiased;
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t s = 0; s < n; ++s) {
      const double* p = in.raw() + (s * c + ch) * plane;
      double* q = xhat.raw() + (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) q[i] = (p[i] - mean) * inv_std[ch];
    }
  }

  Tensor out(in.shape());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* q = xhat.raw() + (s * c + ch) * plane;
      double* o = out.raw() + (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) o[i] = g[ch] * q[i] + b[ch];
    }
  }

  return tape.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, mode, n, c, plane, count, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](GradTape& t, const Tensor& dy) {
        const Tensor& g = t.value(gamma);
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* d = dy.raw() + (s * c + ch) * plane;
            const double* q = xhat.raw() + (s * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy[ch] += d[i];
              sum_dy_xhat[ch] += d[i] * q[i];
            }
          }
        }
        if (t.requires_grad(gamma)) {
          Tensor& dg = t.grad_buffer(gamma);
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += sum_dy_xhat[ch];
        }
        if (t.requires_grad(beta)) {
          Tensor& db = t.grad_buffer(beta);
          for (std::size_t ch = 0; ch < c; ++ch) db[ch] += sum_dy[ch];
        }
        if (!t.requires_grad(x)) return;
        Tensor& dx = t.grad_buffer(x);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* d = dy.raw() + (s * c + ch) * plane;
            const double* q = xhat.raw() + (s * c + ch) * plane;
            double* o = dx.raw() + (s * c + ch) * plane;
            const double scale = g[ch] * inv_std[ch];
            if (mode == BnMode::kTrain) {
              const double mean_dy = sum_dy[ch] / count;
              const double mean_dy_xhat = sum_dy_xhat[ch] / count;
              for (std::size_t i = 0; i < plane; ++i) {
                o[i] += scale * (d[i] - mean_dy - q[i] * mean_dy_xhat);
              }
            } else {
              for (std::size_t i = 0; i < plane; ++i) o[i] += scale * d[i];
            }
          }
        }
      });
}

namespace {

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel-centre source coordinates, clamped at the low edge.
std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Var bilinear_upsample(GradTape& tape, Var x, std::size_t out_h,
                      std::size_t out_w) {
  const Tensor& in = tape.value(x);
  require_rank4(in, "bilinear_upsample");
  const std::size_t n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  if (out_h < h || out_w < w) {
    throw ShapeError("bilinear_upsample: target " + std::to_string(out_h) +
                     "x" + std::to_string(out_w) + " smaller than input " +
                     shape_string(in.shape()));
  }
  auto ys = lerp_taps(h, out_h);
  auto xs = lerp_taps(w, out_w);
  Tensor out({n, c, out_h, out_w});
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = in.raw() + plane * h * w;
    double* dst = out.raw() + plane * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ty = ys[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& tx = xs[ox];
        const double top = src[ty.lo * w + tx.lo] * (1.0 - tx.frac) +
                           src[ty.lo * w + tx.hi] * tx.frac;
        const double bottom = src[ty.hi * w + tx.lo] * (1.0 - tx.frac) +
                              src[ty.hi * w + tx.hi] * tx.frac;
        dst[oy * out_w + ox] = top * (1.0 - ty.frac) + bottom * ty.frac;
      }
    }
  }
  return tape.record(
      std::move(out), {x},
      [x, n, c, h, w, out_h, out_w, ys = std::move(ys),
       xs = std::move(xs)](GradTape& t, const Tensor& dy) {
        Tensor& dx = t.grad_buffer(x);
        for (std::size_t plane = 0; plane < n * c; ++plane) {
          const double* g = dy.raw() + plane * out_h * out_w;
          double* d = dx.raw() + plane * h * w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& ty = ys[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto& tx = xs[ox];
              const double v = g[oy * out_w + ox];
              d[ty.lo * w + tx.lo] += v * (1.0 - ty.frac) * (1.0 - tx.frac);
              d[ty.lo * w + tx.hi] += v * (1.0 - ty.frac) * tx.frac;
              d[ty.hi * w + tx.lo] += v * ty.frac * (1.0 - tx.frac);
              d[ty.hi * w + tx.hi] += v * ty.frac * tx.frac;
            }
          }
        }
      });
}

Var softmax_cross_entropy(GradTape& tape, Var logits,
                          std::span<const LabelMap> labels,
                          std::optional<std::uint8_t> ignore_label) {
  const Tensor& z = tape.value(logits);
  require_rank4(z, "softmax_cross_entropy");
  const std::size_t n = z.dim(0), k = z.dim(1), h = z.dim(2), w = z.dim(3);
  const std::size_t plane = h * w;
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " label maps for batch of " + std::to_string(n));
  }
  for (const LabelMap& l : labels) {
    if (l.height != h || l.width != w) {
      throw ShapeError("softmax_cross_entropy: label map " +
                       std::to_string(l.height) + "x" + std::to_string(l.width) +
                       " does not match logits " + shape_string(z.shape()));
    }
  }

  // Softmax probabilities are kept for the gradient.
  Tensor prob(z.shape());
  double total = 0.0;
  std::size_t support = 0;
  std::vector<double> col(k);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::uint8_t label = labels[s].data[p];
      const bool ignored = ignore_label && label == *ignore_label;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        col[c] = z.raw()[(s * k + c) * plane + p];
        mx = std::max(mx, col[c]);
      }
      double denom = 0.0;
      for (std::size_t c = 0; c < k; ++c) denom += std::exp(col[c] - mx);
      for (std::size_t c = 0; c < k; ++c) {
        prob.raw()[(s * k + c) * plane + p] = std::exp(col[c] - mx) / denom;
      }
      if (ignored) continue;
      if (label >= k) {
        throw ShapeError("softmax_cross_entropy: label " +
                         std::to_string(label) + " outside " +
                         std::to_string(k) + " classes");
      }
      total += (mx + std::log(denom)) - col[label];
      ++support;
    }
  }
  if (support == 0) throw ShapeError("empty loss support");
  const double inv = 1.0 / static_cast<double>(support);

  std::vector<LabelMap> saved(labels.begin(), labels.end());
  return tape.record(
      Tensor::scalar(total * inv), {logits},
      [logits, n, k, plane, inv, ignore_label, prob = std::move(prob),
       saved = std::move(saved)](GradTape& t, const Tensor& dy) {
        Tensor& dz = t.grad_buffer(logits);
        const double scale = dy[0] * inv;
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t p = 0; p < plane; ++p) {
            const std::uint8_t label = saved[s].data[p];
            if (ignore_label && label == *ignore_label) continue;
            for (std::size_t c = 0; c < k; ++c) {
              const std::size_t i = (s * k + c) * plane + p;
              const double onehot = c == label ? 1.0 : 0.0;
              dz[i] += scale * (prob[i] - onehot);
            }
          }
        }
      });
}

Var channel_gather(GradTape& tape, Var x, std::span<const std::size_t> source) {
  const Tensor& in = tape.value(x);
  require_rank4(in, "channel_gather");
  const std::size_t n = in.dim(0), c = in.dim(1);
  const std::size_t plane = in.dim(2) * in.dim(3);
  if (source.size() != c) {
    throw ShapeError("channel_gather: index of length " +
                     std::to_string(source.size()) + " for " +
                     std::to_string(c) + " channels");
  }
  for (std::size_t j : source) {
    if (j >= c) throw ShapeError("channel_gather: index out of range");
  }
  Tensor out(in.shape());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < c; ++j) {
      const double* src = in.raw() + (s * c + source[j]) * plane;
      std::copy(src, src + plane, out.raw() + (s * c + j) * plane);
    }
  }
  std::vector<std::size_t> index(source.begin(), source.end());
  return tape.record(
      std::move(out), {x},
      [x, n, c, plane, index = std::move(index)](GradTape& t,
                                                 const Tensor& dy) {
        // Adjoint of a gather is the matching scatter.
        Tensor& dx = t.grad_buffer(x);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t j = 0; j < c; ++j) {
            const double* g = dy.raw() + (s * c + j) * plane;
            double* d = dx.raw() + (s * c + index[j]) * plane;
            for (std::size_t i = 0; i < plane; ++i) d[i] += g[i];
          }
        }
      });
}

Var weighted_sum(GradTape& tape, Var x, const Tensor& weights) {
  const Tensor& in = tape.value(x);
  if (in.size() != weights.size()) {
    throw ShapeError("weighted_sum: weights " + shape_string(weights.shape()) +
                     " do not match " + shape_string(in.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) s += in[i] * weights[i];
  return tape.record(Tensor::scalar(s), {x},
                     [x, weights](GradTape& t, const Tensor& dy) {
                       Tensor& dx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < dx.size(); ++i) {
                         dx[i] += dy[0] * weights[i];
                       }
                     });
}

}  // namespace segkey::ops
