#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metadock/autodiff.hpp"
#include "metadock/masking.hpp"
#include "metadock/tensor.hpp"

namespace metadock::nn {

enum class NormKind { kBatchTransductive, kGroup };

struct NormalizationSpec {
  NormKind kind = NormKind::kBatchTransductive;
  int group_count = 4;

  bool operator==(const NormalizationSpec&) const = default;
};

std::string to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& text);

/// How kernel-slice masks enter the forward pass.
enum class MaskUse {
  kNone,        ///< masks ignored, plain convolution
  kBinarized,   ///< B(mask), straight-through surrogate gradient
  kContinuous,  ///< raw mask value as a multiplicative gate
};

/// One convolution whose kernel slices (out, in) are each gated by a scalar mask.
struct MaskedConvLayer {
  Tensor kernels;  ///< [Cout, Cin, k, k]
  Tensor masks;    ///< [Cout, Cin]
  Tensor bias;     ///< [Cout]
  int stride = 1;
  int padding = 1;

  void validate() const;
};

/// Graph-level masked convolution: conv(x, gate(masks) * kernels) + bias.
ad::Var masked_conv(ad::Var x, ad::Var kernels, ad::Var masks, ad::Var bias, int stride, int padding, MaskUse use,
                    double temperature = 1.0);

/// Value-level forward of a single layer. `binarize` selects B(mask) versus raw mask scaling.
Tensor masked_forward(const MaskedConvLayer& layer, const Tensor& input, bool binarize);

struct ModelConfig {
  int in_channels = 3;
  int width = 32;
  int n_way = 5;
  int image_size = 16;
  NormalizationSpec norm;

  bool operator==(const ModelConfig&) const = default;
};

/// Named slice of the flat parameter vector.
struct ParamEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;

  std::size_t size() const { return shape_size(shape); }
};

/// The standard few-shot backbone: 4 x (masked 3x3 conv, normalization, ReLU, 2x2 max-pool)
/// followed by an unmasked linear head.
///
/// Flat parameter order is block-major: for each block b = 0..3
///   conv{b}.kernels [W, Cin, 3, 3], conv{b}.bias [W], norm{b}.gamma [W], norm{b}.beta [W],
/// then head.weight [N, F], head.bias [N]. Masks follow the same block order, one per
/// (out, in) kernel slice, row-major within a block.
class FourConvModel {
 public:
  static constexpr int kBlocks = 4;
  static constexpr int kKernel = 3;

  explicit FourConvModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const std::vector<ParamEntry>& params() const { return params_; }
  const ParamEntry& param(const std::string& name) const;
  std::size_t param_count() const { return param_count_; }
  const masking::MaskLayout& mask_layout() const { return mask_layout_; }
  std::size_t mask_count() const { return mask_layout_.total(); }
  std::size_t feature_count() const { return features_; }

  /// He-normal kernels, zero biases, unit gammas, scaled-normal head.
  std::vector<double> init_params(std::uint64_t seed) const;

  struct Bound {
    std::vector<ad::Var> params;
    std::vector<ad::Var> masks;  ///< one [Cout, Cin] var per block; empty when unmasked
  };

  /// Places parameters (and masks, if given) into `graph` as leaves or constants.
  Bound bind(ad::Graph& graph, std::span<const double> theta, std::span<const double> masks, bool params_grad,
             bool masks_grad) const;

  ad::Var forward(const Bound& bound, ad::Var x, MaskUse use, double temperature = 1.0) const;

  std::vector<double> param_grads(const Bound& bound) const;
  std::vector<double> mask_grads(const Bound& bound) const;

  /// Throws ShapeError unless x is [B, in_channels, image_size, image_size].
  void check_input(const Tensor& x) const;

  /// Multiply-accumulates of the conv stack for one image with the given binary masks
  /// (empty span = all kernels active).
  double conv_macs(std::span<const double> binary_masks) const;

 private:
  ModelConfig config_;
  std::vector<ParamEntry> params_;
  std::size_t param_count_ = 0;
  masking::MaskLayout mask_layout_;
  std::size_t features_ = 0;
};

/// Value-level convenience: logits for x under (theta, masks).
Tensor model_forward(const FourConvModel& model, std::span<const double> theta, std::span<const double> masks,
                     const Tensor& x, MaskUse use);
Tensor model_forward(const FourConvModel& model, std::span<const double> theta, std::span<const double> masks,
                     const Tensor& x, bool binarize);

double cross_entropy(const Tensor& logits, std::span<const int> labels);
double accuracy(const Tensor& logits, std::span<const int> labels);
std::vector<int> predict(const Tensor& logits);

}  // namespace metadock::nn
