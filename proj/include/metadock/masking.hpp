#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace metadock::masking {

/// One conv layer's block of masks inside a flat mask vector.
struct MaskBlock {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t offset = 0;

  std::size_t count() const { return out_channels * in_channels; }
  bool operator==(const MaskBlock&) const = default;
};

/// Where a flat mask index lands: (layer, output channel, input channel).
struct MaskSlot {
  std::size_t layer = 0;
  std::size_t out = 0;
  std::size_t in = 0;

  bool operator==(const MaskSlot&) const = default;
};

/// Layer-major layout of one scalar mask per kernel slice.
class MaskLayout {
 public:
  MaskLayout() = default;
  /// `blocks` holds (out_channels, in_channels) per layer; offsets are assigned in order.
  explicit MaskLayout(const std::vector<std::pair<std::size_t, std::size_t>>& blocks);

  std::size_t total() const { return total_; }
  std::size_t layers() const { return blocks_.size(); }
  const MaskBlock& block(std::size_t layer) const { return blocks_.at(layer); }
  const std::vector<MaskBlock>& blocks() const { return blocks_; }

  std::size_t index(std::size_t layer, std::size_t out, std::size_t in) const;
  MaskSlot locate(std::size_t flat) const;

  bool operator==(const MaskLayout&) const = default;

 private:
  std::vector<MaskBlock> blocks_;
  std::size_t total_ = 0;
};

/// Mask scores bound to a layout: z at meta level, zeta per task.
struct MaskSet {
  MaskLayout layout;
  std::vector<double> values;

  MaskSet() = default;
  MaskSet(MaskLayout layout_in, std::vector<double> values_in);
  MaskSet(MaskLayout layout_in, double fill);

  std::size_t size() const { return values.size(); }
  /// Values of one layer as a [Cout*Cin] view.
  std::span<const double> layer(std::size_t l) const;
  std::span<double> layer(std::size_t l);

  bool operator==(const MaskSet&) const = default;
};

/// B(x): 1 for strictly positive scores, 0 otherwise.
inline double binarize(double score) { return score > 0.0 ? 1.0 : 0.0; }
std::vector<double> binarize(std::span<const double> scores);
MaskSet binarize(const MaskSet& masks);

/// Fraction of active entries of a binary mask vector.
double budget(std::span<const double> binary);
inline double budget(const MaskSet& binary) { return budget(binary.values); }

/// (V(binary) - target)^2. The budget weight is applied by the caller.
double budget_loss(std::span<const double> binary, double target);

/// Sum of |score|.
double l1_penalty(std::span<const double> scores);

double sigmoid(double x);

/// d/dx sigmoid(x / T), the factor that stands in for dB/dx in the backward pass.
double surrogate_slope(double score, double temperature = 1.0);

/// Maps the gradient w.r.t. B(scores) to a gradient w.r.t. the raw scores.
std::vector<double> pseudo_grad(std::span<const double> upstream, std::span<const double> scores,
                                double temperature = 1.0);

/// i.i.d. uniform on (0, 0.01], so every kernel starts active.
std::vector<double> init_masks(std::size_t count, std::uint64_t seed);
MaskSet init_masks(const MaskLayout& layout, std::uint64_t seed);

}  // namespace metadock::masking
