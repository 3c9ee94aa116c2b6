#include "conv_kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace metadock::detail {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// col[(i*k + ky)*k + kx][p], p = (b*Ho + oy)*Wo + ox, zero where the tap falls in the padding.
std::vector<double> im2col(const ConvDims& d, const double* in) {
  const std::size_t k = d.kernel, Ho = d.out_height, Wo = d.out_width, HW = d.height * d.width;
  const std::size_t P = d.batch * Ho * Wo;
  std::vector<double> col(d.in_channels * k * k * P, 0.0);
  for (std::size_t i = 0; i < d.in_channels; ++i) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = col.data() + ((i * k + ky) * k + kx) * P;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const double* plane = in + (b * d.in_channels + i) * HW;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const auto iy = static_cast<std::int64_t>(oy * d.stride + ky) - static_cast<std::int64_t>(d.padding);
            if (iy < 0 || iy >= static_cast<std::int64_t>(d.height)) continue;
            double* dst = row + (b * Ho + oy) * Wo;
            const double* src = plane + static_cast<std::size_t>(iy) * d.width;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const auto ix = static_cast<std::int64_t>(ox * d.stride + kx) - static_cast<std::int64_t>(d.padding);
              if (ix >= 0 && ix < static_cast<std::int64_t>(d.width)) dst[ox] = src[ix];
            }
          }
        }
      }
    }
  }
  return col;
}

void col2im_add(const ConvDims& d, const std::vector<double>& col, double* grad_in) {
  const std::size_t k = d.kernel, Ho = d.out_height, Wo = d.out_width, HW = d.height * d.width;
  const std::size_t P = d.batch * Ho * Wo;
  for (std::size_t i = 0; i < d.in_channels; ++i) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = col.data() + ((i * k + ky) * k + kx) * P;
        for (std::size_t b = 0; b < d.batch; ++b) {
          double* plane = grad_in + (b * d.in_channels + i) * HW;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const auto iy = static_cast<std::int64_t>(oy * d.stride + ky) - static_cast<std::int64_t>(d.padding);
            if (iy < 0 || iy >= static_cast<std::int64_t>(d.height)) continue;
            const double* src = row + (b * Ho + oy) * Wo;
            double* dst = plane + static_cast<std::size_t>(iy) * d.width;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const auto ix = static_cast<std::int64_t>(ox * d.stride + kx) - static_cast<std::int64_t>(d.padding);
              if (ix >= 0 && ix < static_cast<std::int64_t>(d.width)) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

ConvDims conv_dims(std::size_t batch, std::size_t cin, std::size_t h, std::size_t w, std::size_t cout,
                   std::size_t k, std::size_t stride, std::size_t padding) {
  if (stride < 1) throw std::invalid_argument("conv stride must be >= 1");
  if (k > h + 2 * padding || k > w + 2 * padding) throw std::invalid_argument("conv kernel larger than padded input");
  ConvDims d{batch, cin, h, w, cout, k, stride, padding, 0, 0};
  d.out_height = (h + 2 * padding - k) / stride + 1;
  d.out_width = (w + 2 * padding - k) / stride + 1;
  return d;
}

void conv_forward(const ConvDims& d, const double* in, const double* kernels, double* out) {
  const std::size_t CK = d.in_channels * d.kernel * d.kernel;
  const std::size_t HoWo = d.out_height * d.out_width;
  const std::size_t P = d.batch * HoWo;
  const auto col = im2col(d, in);
  std::vector<double> acc(d.out_channels * P);
  MatrixMap(acc.data(), d.out_channels, P).noalias() =
      ConstMatrixMap(kernels, d.out_channels, CK) * ConstMatrixMap(col.data(), CK, P);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      const double* src = acc.data() + o * P + b * HoWo;
      double* dst = out + (b * d.out_channels + o) * HoWo;
      for (std::size_t t = 0; t < HoWo; ++t) dst[t] += src[t];
    }
  }
}

void conv_backward_input(const ConvDims& d, const double* grad_out, const double* kernels, double* grad_in) {
  const std::size_t CK = d.in_channels * d.kernel * d.kernel;
  const std::size_t HoWo = d.out_height * d.out_width;
  const std::size_t P = d.batch * HoWo;
  // grad_out as [Cout, P]
  std::vector<double> gout(d.out_channels * P);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      std::copy_n(grad_out + (b * d.out_channels + o) * HoWo, HoWo, gout.data() + o * P + b * HoWo);
    }
  }
  std::vector<double> dcol(CK * P);
  MatrixMap(dcol.data(), CK, P).noalias() =
      ConstMatrixMap(kernels, d.out_channels, CK).transpose() * ConstMatrixMap(gout.data(), d.out_channels, P);
  col2im_add(d, dcol, grad_in);
}

void conv_backward_kernels(const ConvDims& d, const double* grad_out, const double* in, double* grad_kernels) {
  const std::size_t CK = d.in_channels * d.kernel * d.kernel;
  const std::size_t HoWo = d.out_height * d.out_width;
  const std::size_t P = d.batch * HoWo;
  const auto col = im2col(d, in);
  std::vector<double> gout(d.out_channels * P);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      std::copy_n(grad_out + (b * d.out_channels + o) * HoWo, HoWo, gout.data() + o * P + b * HoWo);
    }
  }
  MatrixMap(grad_kernels, d.out_channels, CK).noalias() +=
      ConstMatrixMap(gout.data(), d.out_channels, P) * ConstMatrixMap(col.data(), CK, P).transpose();
}

}  // namespace metadock::detail
