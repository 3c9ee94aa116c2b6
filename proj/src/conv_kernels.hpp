#pragma once

#include <cstddef>

// Raw NCHW cross-correlation loops shared by the conv op's forward and backward rules.
// Accumulation order is fixed (batch, out, in, ky, kx, y, x) so results are reproducible.
namespace metadock::detail {

struct ConvDims {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel;
  std::size_t stride, padding;
  std::size_t out_height, out_width;
};

ConvDims conv_dims(std::size_t batch, std::size_t cin, std::size_t h, std::size_t w, std::size_t cout,
                   std::size_t k, std::size_t stride, std::size_t padding);

/// out += conv(in, kernels)
void conv_forward(const ConvDims& d, const double* in, const double* kernels, double* out);
/// grad_in += conv_transpose(grad_out, kernels)
void conv_backward_input(const ConvDims& d, const double* grad_out, const double* kernels, double* grad_in);
/// grad_kernels += correlation of grad_out with in
void conv_backward_kernels(const ConvDims& d, const double* grad_out, const double* in, double* grad_kernels);

}  // namespace metadock::detail
