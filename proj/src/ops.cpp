#include "mtlnet/ops.hpp"

#include <cmath>
#include <limits>

namespace mtlnet {

namespace {

thread_local BranchProbe* tl_probe = nullptr;

}  // namespace

BranchProbe::BranchProbe() : previous_(tl_probe) { tl_probe = this; }
BranchProbe::~BranchProbe() { tl_probe = previous_; }
BranchProbe* active_branch_probe() { return tl_probe; }

namespace {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Slots = std::span<Buffer<Scalar>* const>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_4d(const Shape& s, const char* op) {
  require(s.size() == 4, std::string(op) + " expects an NCHW tensor, got " + shape_str(s));
}

// Sliding-window layout shared by conv (gather) and deconv (scatter). The
// "image" side is the padded-input side of a convolution; the "column" side
// has one column per output location.
struct PatchGeometry {
  Index channels, height, width;
  Index kh, kw, sh, sw, ph, pw;
  Index out_h, out_w;
  Index rows() const { return channels * kh * kw; }
  Index cols() const { return out_h * out_w; }
};

template <typename Scalar>
void im2col(const Scalar* image, const PatchGeometry& g, Scalar* col) {
  const Index cols = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* dst = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.sh - g.ph + ki;
          Scalar* row = dst + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(row, row + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = image + (c * g.height + iy) * g.width;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.sw - g.pw + kj;
            row[ox] = (ix >= 0 && ix < g.width) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* col, const PatchGeometry& g, Scalar* image) {
  const Index cols = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* src = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.sh - g.ph + ki;
          if (iy < 0 || iy >= g.height) continue;
          Scalar* dst = image + (c * g.height + iy) * g.width;
          const Scalar* row = src + oy * g.out_w;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.sw - g.pw + kj;
            if (ix >= 0 && ix < g.width) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

// Sums per-item partial results in item order so the total never depends on
// how the items were distributed over workers.
template <typename Scalar>
void reduce_in_order(const std::vector<Buffer<Scalar>>& partials, Buffer<Scalar>& out) {
  for (const auto& p : partials) out += p;
}

}  // namespace

std::array<Index, 2> ConvSpec::output_size(Index height, Index width) const {
  require(in_ch > 0 && out_ch > 0, "conv channels must be positive");
  require(kernel[0] > 0 && kernel[1] > 0 && stride[0] > 0 && stride[1] > 0 && padding[0] >= 0 &&
              padding[1] >= 0,
          "conv kernel/stride must be positive and padding non-negative");
  const Index oh = (height + 2 * padding[0] - kernel[0]) / stride[0] + 1;
  const Index ow = (width + 2 * padding[1] - kernel[1]) / stride[1] + 1;
  if (height + 2 * padding[0] < kernel[0] || width + 2 * padding[1] < kernel[1] || oh < 1 ||
      ow < 1) {
    throw ShapeError("conv output would be empty for input " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  return {oh, ow};
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      const Tensor<Scalar>& bias, const ConvSpec& spec) {
  require_4d(x.shape(), "conv2d");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  require(c == spec.in_ch, "conv2d input has " + std::to_string(c) + " channels, spec says " +
                               std::to_string(spec.in_ch));
  require(w.shape() == Shape{spec.out_ch, spec.in_ch, spec.kernel[0], spec.kernel[1]},
          "conv2d weight shape " + shape_str(w.shape()) + " does not match spec");
  require(spec.has_bias == bias.defined(), "conv2d bias presence does not match spec");
  if (bias.defined()) require(bias.shape() == Shape{spec.out_ch}, "conv2d bias shape mismatch");
  const auto [oh, ow] = spec.output_size(h, wd);

  const PatchGeometry g{c, h, wd, spec.kernel[0], spec.kernel[1], spec.stride[0], spec.stride[1],
                        spec.padding[0], spec.padding[1], oh, ow};
  const Index out_ch = spec.out_ch, k = g.rows(), p = g.cols();
  const bool pointwise = spec.kernel == std::array<Index, 2>{1, 1} &&
                         spec.stride == std::array<Index, 2>{1, 1} &&
                         spec.padding == std::array<Index, 2>{0, 0};

  Buffer<Scalar> out(n * out_ch * p);
  const Eigen::Map<const RowMat<Scalar>> wmat(w.ptr(), out_ch, k);
  parallel_for(n, [&](Index i) {
    const Scalar* xi = x.ptr() + i * c * h * wd;
    Eigen::Map<RowMat<Scalar>> oi(out.data() + i * out_ch * p, out_ch, p);
    if (pointwise) {
      oi.noalias() = wmat * Eigen::Map<const RowMat<Scalar>>(xi, k, p);
    } else {
      RowMat<Scalar> col(k, p);
      im2col(xi, g, col.data());
      oi.noalias() = wmat * col;
    }
    if (bias.defined()) {
      for (Index o = 0; o < out_ch; ++o) oi.row(o).array() += bias.data()[o];
    }
  });

  auto backward = [x, w, bias, g, n, out_ch, k, p, pointwise](const Buffer<Scalar>& gout,
                                                               Slots<Scalar> slots) {
    const Index in_size = g.channels * g.height * g.width;
    const Eigen::Map<const RowMat<Scalar>> wmat(w.ptr(), out_ch, k);
    std::vector<Buffer<Scalar>> dw_parts(slots[1] ? n : 0);
    parallel_for(n, [&](Index i) {
      const Eigen::Map<const RowMat<Scalar>> gi(gout.data() + i * out_ch * p, out_ch, p);
      const Scalar* xi = x.ptr() + i * in_size;
      RowMat<Scalar> col;
      if (!pointwise && slots[1]) {
        col.resize(k, p);
        im2col(xi, g, col.data());
      }
      if (slots[0]) {
        if (pointwise) {
          Eigen::Map<RowMat<Scalar>>(slots[0]->data() + i * in_size, k, p).noalias() +=
              wmat.transpose() * gi;
        } else {
          RowMat<Scalar> dcol = wmat.transpose() * gi;
          col2im(dcol.data(), g, slots[0]->data() + i * in_size);
        }
      }
      if (slots[1]) {
        dw_parts[i].resize(out_ch * k);
        Eigen::Map<RowMat<Scalar>> dwi(dw_parts[i].data(), out_ch, k);
        if (pointwise) {
          dwi.noalias() = gi * Eigen::Map<const RowMat<Scalar>>(xi, k, p).transpose();
        } else {
          dwi.noalias() = gi * col.transpose();
        }
      }
    });
    if (slots[1]) reduce_in_order(dw_parts, *slots[1]);
    if (slots.size() > 2 && slots[2]) {
      for (Index i = 0; i < n; ++i) {
        for (Index o = 0; o < out_ch; ++o) {
          (*slots[2])[o] += gout.segment((i * out_ch + o) * p, p).sum();
        }
      }
    }
  };

  std::vector<Tensor<Scalar>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<Scalar>({n, out_ch, oh, ow}, std::move(out), "conv2d", std::move(inputs),
                             std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> deconv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Index stride) {
  require_4d(x.shape(), "deconv2d");
  require(w.ndim() == 4 && w.dim(0) == x.dim(1) && w.dim(2) == w.dim(3),
          "deconv2d weight must be [C_in, C_out, k, k] with C_in = " + std::to_string(x.dim(1)));
  const Index kernel = w.dim(2);
  require(stride >= 1, "deconv2d stride must be >= 1");
  require(kernel >= stride && (kernel - stride) % 2 == 0,
          "deconv2d needs kernel >= stride with (kernel - stride) even, got k=" +
              std::to_string(kernel) + " s=" + std::to_string(stride));
  const Index crop = (kernel - stride) / 2;
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), out_ch = w.dim(1);
  const Index oh = h * stride, ow = wd * stride;

  // The output plays the padded-image role; each input pixel is one column.
  const PatchGeometry g{out_ch, oh, ow, kernel, kernel, stride, stride, crop, crop, h, wd};
  const Index k = g.rows(), p = g.cols(), out_size = out_ch * oh * ow;

  Buffer<Scalar> out = Buffer<Scalar>::Zero(n * out_size);
  const Eigen::Map<const RowMat<Scalar>> wmat(w.ptr(), c, k);
  parallel_for(n, [&](Index i) {
    const Eigen::Map<const RowMat<Scalar>> xi(x.ptr() + i * c * p, c, p);
    RowMat<Scalar> cols = wmat.transpose() * xi;
    col2im(cols.data(), g, out.data() + i * out_size);
  });

  auto backward = [x, w, g, n, c, k, p, out_size](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    const Eigen::Map<const RowMat<Scalar>> wmat(w.ptr(), c, k);
    std::vector<Buffer<Scalar>> dw_parts(slots[1] ? n : 0);
    parallel_for(n, [&](Index i) {
      RowMat<Scalar> gcol(k, p);
      im2col(gout.data() + i * out_size, g, gcol.data());
      if (slots[0]) {
        Eigen::Map<RowMat<Scalar>>(slots[0]->data() + i * c * p, c, p).noalias() += wmat * gcol;
      }
      if (slots[1]) {
        dw_parts[i].resize(c * k);
        const Eigen::Map<const RowMat<Scalar>> xi(x.ptr() + i * c * p, c, p);
        Eigen::Map<RowMat<Scalar>>(dw_parts[i].data(), c, k).noalias() = xi * gcol.transpose();
      }
    });
    if (slots[1]) reduce_in_order(dw_parts, *slots[1]);
  };
  return make_result<Scalar>({n, out_ch, oh, ow}, std::move(out), "deconv2d", {x, w},
                             std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                           const Tensor<Scalar>& beta, BatchNormState<Scalar>& state,
                           BatchNormMode mode, double eps, double momentum) {
  require_4d(x.shape(), "batchnorm2d");
  if (!(eps > 0)) throw std::invalid_argument("batchnorm2d eps must be positive");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Index count = n * hw;
  require(count >= 1, "batchnorm2d channel has no elements");
  const Shape cshape{c};
  require(gamma.shape() == cshape && beta.shape() == cshape,
          "batchnorm2d gamma/beta must have shape [C]");
  require(state.running_mean.defined() && state.running_mean.shape() == cshape &&
              state.running_var.defined() && state.running_var.shape() == cshape,
          "batchnorm2d running stats must have shape [C]");

  Buffer<Scalar> mean_c(c), inv_std(c);
  if (mode == BatchNormMode::train) {
    auto& rm = state.running_mean.mutable_data();
    auto& rv = state.running_var.mutable_data();
    for (Index ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (Index i = 0; i < n; ++i) acc += x.data().segment((i * c + ch) * hw, hw).template cast<double>().sum();
      const double mu = acc / static_cast<double>(count);
      double sq = 0;
      for (Index i = 0; i < n; ++i) {
        sq += (x.data().segment((i * c + ch) * hw, hw).template cast<double>() - mu).square().sum();
      }
      const double var = sq / static_cast<double>(count);
      mean_c[ch] = static_cast<Scalar>(mu);
      inv_std[ch] = static_cast<Scalar>(1.0 / std::sqrt(var + eps));
      rm[ch] = static_cast<Scalar>((1 - momentum) * rm[ch] + momentum * mu);
      rv[ch] = static_cast<Scalar>((1 - momentum) * rv[ch] + momentum * var);
    }
  } else {
    for (Index ch = 0; ch < c; ++ch) {
      mean_c[ch] = state.running_mean.data()[ch];
      inv_std[ch] = static_cast<Scalar>(1.0 / std::sqrt(double(state.running_var.data()[ch]) + eps));
    }
  }

  Buffer<Scalar> xhat(x.numel()), out(x.numel());
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * hw;
      xhat.segment(off, hw) = (x.data().segment(off, hw) - mean_c[ch]) * inv_std[ch];
      out.segment(off, hw) = xhat.segment(off, hw) * gamma.data()[ch] + beta.data()[ch];
    }
  }

  const bool batch_stats = mode == BatchNormMode::train;
  auto backward = [gamma, xhat = std::move(xhat), inv_std, n, c, hw, count, batch_stats](
                      const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    for (Index ch = 0; ch < c; ++ch) {
      Scalar sum_g = 0, sum_gx = 0;
      for (Index i = 0; i < n; ++i) {
        const Index off = (i * c + ch) * hw;
        sum_g += gout.segment(off, hw).sum();
        sum_gx += (gout.segment(off, hw) * xhat.segment(off, hw)).sum();
      }
      if (slots[1]) (*slots[1])[ch] += sum_gx;
      if (slots[2]) (*slots[2])[ch] += sum_g;
      if (!slots[0]) continue;
      const Scalar gmul = gamma.data()[ch] * inv_std[ch];
      for (Index i = 0; i < n; ++i) {
        const Index off = (i * c + ch) * hw;
        if (batch_stats) {
          const Scalar m = static_cast<Scalar>(count);
          slots[0]->segment(off, hw) +=
              gmul / m *
              (m * gout.segment(off, hw) - sum_g - xhat.segment(off, hw) * sum_gx);
        } else {
          slots[0]->segment(off, hw) += gmul * gout.segment(off, hw);
        }
      }
    }
  };
  return make_result<Scalar>(x.shape(), std::move(out), "batchnorm2d", {x, gamma, beta},
                             std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Buffer<Scalar> out = x.data().max(Scalar(0));
  if (BranchProbe* p = tl_probe) {
    for (Index i = 0; i < x.numel(); ++i) p->fold(static_cast<std::uint64_t>(i) << 1 | (x.data()[i] > 0));
  }
  auto backward = [x](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    *slots[0] += (x.data() > Scalar(0)).select(gout, Scalar(0));
  };
  return make_result<Scalar>(x.shape(), std::move(out), "relu", {x}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& x, Index kernel, Index stride, Index padding) {
  require_4d(x.shape(), "maxpool2d");
  require(kernel >= 1 && stride >= 1 && padding >= 0 && padding < kernel,
          "maxpool2d needs kernel, stride >= 1 and 0 <= padding < kernel");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  require(h + 2 * padding >= kernel && wd + 2 * padding >= kernel,
          "maxpool2d window does not fit the input");
  const Index oh = (h + 2 * padding - kernel) / stride + 1;
  const Index ow = (wd + 2 * padding - kernel) / stride + 1;

  Buffer<Scalar> out(n * c * oh * ow);
  std::vector<Index> source(out.size());
  const Scalar* xd = x.ptr();
  for (Index plane = 0; plane < n * c; ++plane) {
    const Scalar* in = xd + plane * h * wd;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        Index best_at = -1;
        for (Index ki = 0; ki < kernel; ++ki) {
          const Index iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= h) continue;
          for (Index kj = 0; kj < kernel; ++kj) {
            const Index ix = ox * stride - padding + kj;
            if (ix < 0 || ix >= wd) continue;
            if (best_at < 0 || in[iy * wd + ix] > best) {
              best = in[iy * wd + ix];
              best_at = iy * wd + ix;
            }
          }
        }
        const Index o = (plane * oh + oy) * ow + ox;
        out[o] = best;
        source[o] = plane * h * wd + best_at;
      }
    }
  }
  if (BranchProbe* p = tl_probe) {
    for (Index s : source) p->fold(static_cast<std::uint64_t>(s));
  }
  auto backward = [source = std::move(source)](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    for (std::size_t o = 0; o < source.size(); ++o) (*slots[0])[source[o]] += gout[o];
  };
  return make_result<Scalar>({n, c, oh, ow}, std::move(out), "maxpool2d", {x},
                             std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  require(x.shape() == y.shape(),
          "add shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  auto backward = [](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    if (slots[0]) *slots[0] += gout;
    if (slots[1]) *slots[1] += gout;
  };
  return make_result<Scalar>(x.shape(), x.data() + y.data(), "add", {x, y}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  require(x.shape() == y.shape(),
          "mul shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  auto backward = [x, y](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    if (slots[0]) *slots[0] += gout * y.data();
    if (slots[1]) *slots[1] += gout * x.data();
  };
  return make_result<Scalar>(x.shape(), x.data() * y.data(), "mul", {x, y}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, double factor) {
  const Scalar f = static_cast<Scalar>(factor);
  auto backward = [f](const Buffer<Scalar>& gout, Slots<Scalar> slots) { *slots[0] += f * gout; };
  return make_result<Scalar>(x.shape(), f * x.data(), "scale", {x}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  require_4d(x.shape(), "concat_channels");
  require_4d(y.shape(), "concat_channels");
  require(x.dim(0) == y.dim(0) && x.dim(2) == y.dim(2) && x.dim(3) == y.dim(3),
          "concat_channels needs matching N, H, W");
  const Index n = x.dim(0), cx = x.dim(1), cy = y.dim(1), hw = x.dim(2) * x.dim(3);
  Buffer<Scalar> out(n * (cx + cy) * hw);
  for (Index i = 0; i < n; ++i) {
    out.segment(i * (cx + cy) * hw, cx * hw) = x.data().segment(i * cx * hw, cx * hw);
    out.segment((i * (cx + cy) + cx) * hw, cy * hw) = y.data().segment(i * cy * hw, cy * hw);
  }
  auto backward = [n, cx, cy, hw](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    for (Index i = 0; i < n; ++i) {
      if (slots[0]) slots[0]->segment(i * cx * hw, cx * hw) += gout.segment(i * (cx + cy) * hw, cx * hw);
      if (slots[1]) {
        slots[1]->segment(i * cy * hw, cy * hw) += gout.segment((i * (cx + cy) + cx) * hw, cy * hw);
      }
    }
  };
  return make_result<Scalar>({n, cx + cy, x.dim(2), x.dim(3)}, std::move(out), "concat_channels",
                             {x, y}, std::move(backward));
}

namespace {
struct AxisLayout {
  Index outer, size, inner;
};
AxisLayout axis_layout(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "axis out of range");
  AxisLayout l{1, shape[axis], 1};
  for (int a = 0; a < axis; ++a) l.outer *= shape[a];
  for (int a = axis + 1; a < rank; ++a) l.inner *= shape[a];
  return l;
}
}  // namespace

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis) {
  const AxisLayout l = axis_layout(x.shape(), axis);
  Buffer<Scalar> out(x.numel());
  for (Index o = 0; o < l.outer; ++o) {
    for (Index in = 0; in < l.inner; ++in) {
      const Index base = o * l.size * l.inner + in;
      Scalar top = x.data()[base];
      for (Index k = 1; k < l.size; ++k) top = std::max(top, x.data()[base + k * l.inner]);
      Scalar total = 0;
      for (Index k = 0; k < l.size; ++k) {
        out[base + k * l.inner] = std::exp(x.data()[base + k * l.inner] - top);
        total += out[base + k * l.inner];
      }
      for (Index k = 0; k < l.size; ++k) out[base + k * l.inner] /= total;
    }
  }
  auto backward = [y = Buffer<Scalar>(out), l](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    for (Index o = 0; o < l.outer; ++o) {
      for (Index in = 0; in < l.inner; ++in) {
        const Index base = o * l.size * l.inner + in;
        Scalar dot = 0;
        for (Index k = 0; k < l.size; ++k) dot += gout[base + k * l.inner] * y[base + k * l.inner];
        for (Index k = 0; k < l.size; ++k) {
          const Index at = base + k * l.inner;
          (*slots[0])[at] += y[at] * (gout[at] - dot);
        }
      }
    }
  };
  return make_result<Scalar>(x.shape(), std::move(out), "softmax", {x}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  Buffer<Scalar> out = x.data().unaryExpr([](Scalar v) {
    if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
  auto backward = [y = Buffer<Scalar>(out)](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    *slots[0] += gout * y * (Scalar(1) - y);
  };
  return make_result<Scalar>(x.shape(), std::move(out), "sigmoid", {x}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  Buffer<Scalar> out = x.data().exp();
  auto backward = [y = Buffer<Scalar>(out)](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    *slots[0] += gout * y;
  };
  return make_result<Scalar>(x.shape(), std::move(out), "exp", {x}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Buffer<Scalar> out = Buffer<Scalar>::Constant(1, x.data().sum());
  auto backward = [](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    *slots[0] += gout[0];
  };
  return make_result<Scalar>({1}, std::move(out), "sum", {x}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.numel());
  Buffer<Scalar> out = Buffer<Scalar>::Constant(1, x.data().sum() * inv);
  auto backward = [inv](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    *slots[0] += gout[0] * inv;
  };
  return make_result<Scalar>({1}, std::move(out), "mean", {x}, std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, Index begin, Index end) {
  require_4d(x.shape(), "slice_rows");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  require(0 <= begin && begin < end && end <= h, "slice_rows range out of bounds");
  const Index rows = end - begin;
  Buffer<Scalar> out(n * c * rows * wd);
  for (Index plane = 0; plane < n * c; ++plane) {
    out.segment(plane * rows * wd, rows * wd) = x.data().segment((plane * h + begin) * wd, rows * wd);
  }
  auto backward = [n, c, h, wd, begin, rows](const Buffer<Scalar>& gout, Slots<Scalar> slots) {
    for (Index plane = 0; plane < n * c; ++plane) {
      slots[0]->segment((plane * h + begin) * wd, rows * wd) += gout.segment(plane * rows * wd, rows * wd);
    }
  };
  return make_result<Scalar>({n, c, rows, wd}, std::move(out), "slice_rows", {x},
                             std::move(backward));
}

template <typename Scalar>
Tensor<Scalar> argmax(const Tensor<Scalar>& x, int axis) {
  const AxisLayout l = axis_layout(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + (axis < 0 ? axis + x.ndim() : axis));
  if (shape.empty()) shape = {1};
  Buffer<Scalar> out(l.outer * l.inner);
  for (Index o = 0; o < l.outer; ++o) {
    for (Index in = 0; in < l.inner; ++in) {
      const Index base = o * l.size * l.inner + in;
      Index best = 0;
      for (Index k = 1; k < l.size; ++k) {
        if (x.data()[base + k * l.inner] > x.data()[base + best * l.inner]) best = k;
      }
      out[o * l.inner + in] = static_cast<Scalar>(best);
    }
  }
  return make_result<Scalar>(std::move(shape), std::move(out), "argmax", {x}, {});
}

#define MTLNET_INSTANTIATE_OPS(S)                                                               \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,              \
                            const ConvSpec&);                                                   \
  template Tensor<S> deconv2d(const Tensor<S>&, const Tensor<S>&, Index);                       \
  template Tensor<S> batchnorm2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,         \
                                 BatchNormState<S>&, BatchNormMode, double, double);           \
  template Tensor<S> relu(const Tensor<S>&);                                                    \
  template Tensor<S> maxpool2d(const Tensor<S>&, Index, Index, Index);                          \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> scale(const Tensor<S>&, double);                                           \
  template Tensor<S> concat_channels(const Tensor<S>&, const Tensor<S>&);                       \
  template Tensor<S> softmax(const Tensor<S>&, int);                                            \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                 \
  template Tensor<S> exp(const Tensor<S>&);                                                     \
  template Tensor<S> sum(const Tensor<S>&);                                                     \
  template Tensor<S> mean(const Tensor<S>&);                                                    \
  template Tensor<S> slice_rows(const Tensor<S>&, Index, Index);                                \
  template Tensor<S> argmax(const Tensor<S>&, int);

MTLNET_INSTANTIATE_OPS(float)
MTLNET_INSTANTIATE_OPS(double)

}  // namespace mtlnet
