#pragma once
// Spatial operations on NCHW tensors: convolution (im2col + GEMM), nearest
// 2x upsampling, 2x2 average pooling, and channel concatenation.

#include <Eigen/Core>

#include <string>
#include <vector>

#include "bayesseg/tensor.hpp"

namespace bayesseg {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t hw_out() const { return ho * wo; }
  bool direct() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// cols[(c*kh + i)*kw + j, oy*wo + ox] = x[c, oy*stride + i - pad, ox*stride + j - pad]
inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t hw = g.hw_out();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t hw = g.hw_out();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.wo + ox];
          }
        }
      }
}

inline void require_rank4(const char* op, const Tensor& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(op, std::string(what) + " rank", "expected NCHW, got " + shape_str(t.shape()));
}

}  // namespace detail

/// 2-D cross-correlation. input [N,Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride = 1,
                     std::size_t padding = 0) {
  detail::require_rank4("conv2d", input, "input");
  detail::require_rank4("conv2d", kernel, "kernel");
  if (stride < 1) throw ShapeError("conv2d", "stride", "must be >= 1");
  detail::ConvGeometry g{};
  g.n = input.dim(0), g.cin = input.dim(1), g.h = input.dim(2), g.w = input.dim(3);
  g.cout = kernel.dim(0), g.kh = kernel.dim(2), g.kw = kernel.dim(3);
  g.stride = stride, g.pad = padding;
  if (kernel.dim(1) != g.cin) {
    throw ShapeError("conv2d", "Cin", "input has " + std::to_string(g.cin) + " channels, kernel expects " +
                                          std::to_string(kernel.dim(1)));
  }
  if (bias.size() != g.cout) {
    throw ShapeError("conv2d", "Cout", "bias has " + std::to_string(bias.size()) + " elements, kernel has " +
                                           std::to_string(g.cout) + " output channels");
  }
  if (g.kh > g.h + 2 * padding) throw ShapeError("conv2d", "H", "kernel height exceeds padded input height");
  if (g.kw > g.w + 2 * padding) throw ShapeError("conv2d", "W", "kernel width exceeds padded input width");
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t K = g.k(), HW = g.hw_out();
  const std::size_t in_plane = g.cin * g.h * g.w, out_plane = g.cout * HW;
  std::vector<double> out(g.n * out_plane);
  std::vector<double> cols(g.direct() ? 0 : K * HW);
  detail::ConstRowMap wmat(kernel.values().data(), g.cout, K);
  const auto& bv = bias.values();
  for (std::size_t b = 0; b < g.n; ++b) {
    const double* xb = input.values().data() + b * in_plane;
    const double* cptr = xb;
    if (!g.direct()) {
      detail::im2col(xb, g, cols.data());
      cptr = cols.data();
    }
    detail::RowMap omat(out.data() + b * out_plane, g.cout, HW);
    omat.noalias() = wmat * detail::ConstRowMap(cptr, K, HW);
    for (std::size_t o = 0; o < g.cout; ++o) omat.row(o).array() += bv[o];
  }

  return Tensor::from_op({g.n, g.cout, g.ho, g.wo}, std::move(out), {input, kernel, bias},
                         [input, kernel, bias, g](detail::Node& self) {
                           const std::size_t K = g.k(), HW = g.hw_out();
                           const std::size_t in_plane = g.cin * g.h * g.w, out_plane = g.cout * HW;
                           std::vector<double> cols(g.direct() ? 0 : K * HW);
                           std::vector<double> dcols(g.direct() ? 0 : K * HW);
                           detail::ConstRowMap wmat(kernel.values().data(), g.cout, K);
                           double* gk = kernel.requires_grad() ? kernel.node()->grad_buffer() : nullptr;
                           double* gb = bias.requires_grad() ? bias.node()->grad_buffer() : nullptr;
                           double* gx = input.requires_grad() ? input.node()->grad_buffer() : nullptr;
                           for (std::size_t b = 0; b < g.n; ++b) {
                             detail::ConstRowMap gout(self.grad.data() + b * out_plane, g.cout, HW);
                             const double* xb = input.values().data() + b * in_plane;
                             if (gk) {
                               const double* cptr = xb;
                               if (!g.direct()) {
                                 detail::im2col(xb, g, cols.data());
                                 cptr = cols.data();
                               }
                               detail::RowMap(gk, g.cout, K).noalias() +=
                                   gout * detail::ConstRowMap(cptr, K, HW).transpose();
                             }
                             if (gb) {
                               for (std::size_t o = 0; o < g.cout; ++o) gb[o] += gout.row(o).sum();
                             }
                             if (gx) {
                               if (g.direct()) {
                                 detail::RowMap(gx + b * in_plane, K, HW).noalias() += wmat.transpose() * gout;
                               } else {
                                 detail::RowMap(dcols.data(), K, HW).noalias() = wmat.transpose() * gout;
                                 detail::col2im_add(dcols.data(), g, gx + b * in_plane);
                               }
                             }
                           }
                         });
}

/// Nearest-neighbour 2x upsampling; the adjoint sums each 2x2 block.
inline Tensor upsample_nearest2x(const Tensor& input) {
  detail::require_rank4("upsample_nearest2x", input, "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < 1 || w < 1) throw ShapeError("upsample_nearest2x", "H/W", "spatial extents must be >= 1");
  const std::size_t planes = n * c, H = 2 * h, W = 2 * w;
  std::vector<double> out(planes * H * W);
  const auto& v = input.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(p * H + y) * W + x] = v[(p * h + y / 2) * w + x / 2];
  return Tensor::from_op({n, c, H, W}, std::move(out), {input}, [input, planes, h, w](detail::Node& self) {
    double* g = input.node()->grad_buffer();
    const std::size_t H = 2 * h, W = 2 * w;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) g[(p * h + y / 2) * w + x / 2] += self.grad[(p * H + y) * W + x];
  });
}

/// 2x2 average pooling with stride 2. H and W must be even.
inline Tensor avg_pool2x(const Tensor& input) {
  detail::require_rank4("avg_pool2x", input, "input");
  const std::size_t n = input.dim(0), c = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || H == 0) throw ShapeError("avg_pool2x", "H", "must be even and positive, got " + std::to_string(H));
  if (W % 2 != 0 || W == 0) throw ShapeError("avg_pool2x", "W", "must be even and positive, got " + std::to_string(W));
  const std::size_t planes = n * c, h = H / 2, w = W / 2;
  std::vector<double> out(planes * h * w, 0.0);
  const auto& v = input.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(p * h + y / 2) * w + x / 2] += 0.25 * v[(p * H + y) * W + x];
  return Tensor::from_op({n, c, h, w}, std::move(out), {input}, [input, planes, h, w](detail::Node& self) {
    double* g = input.node()->grad_buffer();
    const std::size_t H = 2 * h, W = 2 * w;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) g[(p * H + y) * W + x] += 0.25 * self.grad[(p * h + y / 2) * w + x / 2];
  });
}

/// Concatenates NCHW tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels", "parts", "nothing to concatenate");
  for (const auto& p : parts) detail::require_rank4("concat_channels", p, "part");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t c_total = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != n) throw ShapeError("concat_channels", "N", "batch sizes differ");
    if (p.dim(2) != h) throw ShapeError("concat_channels", "H", "heights differ");
    if (p.dim(3) != w) throw ShapeError("concat_channels", "W", "widths differ");
    c_total += p.dim(1);
  }
  const std::size_t hw = h * w;
  std::vector<double> out(n * c_total * hw);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(p.values().data() + b * c * hw, c * hw, out.data() + (b * c_total + offset) * hw);
    offset += c;
  }
  return Tensor::from_op({n, c_total, h, w}, std::move(out), parts, [parts, n, c_total, hw](detail::Node& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.dim(1);
      if (p.requires_grad()) {
        double* g = p.node()->grad_buffer();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < c * hw; ++i) g[b * c * hw + i] += self.grad[(b * c_total + offset) * hw + i];
      }
      offset += c;
    }
  });
}

}  // namespace bayesseg
