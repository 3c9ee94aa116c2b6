#include "metadock/masking.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace metadock::masking {

MaskLayout::MaskLayout(const std::vector<std::pair<std::size_t, std::size_t>>& blocks) {
  for (const auto& [out, in] : blocks) {
    blocks_.push_back(MaskBlock{out, in, total_});
    total_ += out * in;
  }
}

std::size_t MaskLayout::index(std::size_t layer, std::size_t out, std::size_t in) const {
  const auto& b = blocks_.at(layer);
  if (out >= b.out_channels || in >= b.in_channels) {
    throw std::out_of_range("mask slot (" + std::to_string(layer) + "," + std::to_string(out) + "," +
                            std::to_string(in) + ") outside layout");
  }
  return b.offset + out * b.in_channels + in;
}

MaskSlot MaskLayout::locate(std::size_t flat) const {
  if (flat >= total_) throw std::out_of_range("mask index " + std::to_string(flat) + " >= " + std::to_string(total_));
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    if (flat < b.offset + b.count()) {
      const auto local = flat - b.offset;
      return MaskSlot{l, local / b.in_channels, local % b.in_channels};
    }
  }
  throw std::logic_error("mask layout offsets are inconsistent");
}

MaskSet::MaskSet(MaskLayout layout_in, std::vector<double> values_in)
    : layout(std::move(layout_in)), values(std::move(values_in)) {
  if (values.size() != layout.total()) {
    throw std::invalid_argument("mask set has " + std::to_string(values.size()) + " values, layout needs " +
                                std::to_string(layout.total()));
  }
}

MaskSet::MaskSet(MaskLayout layout_in, double fill) : layout(std::move(layout_in)), values(layout.total(), fill) {}

std::span<const double> MaskSet::layer(std::size_t l) const {
  const auto& b = layout.block(l);
  return std::span<const double>(values).subspan(b.offset, b.count());
}

std::span<double> MaskSet::layer(std::size_t l) {
  const auto& b = layout.block(l);
  return std::span<double>(values).subspan(b.offset, b.count());
}

std::vector<double> binarize(std::span<const double> scores) {
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = binarize(scores[i]);
  return out;
}

MaskSet binarize(const MaskSet& masks) { return MaskSet(masks.layout, binarize(masks.values)); }

double budget(std::span<const double> binary) {
  if (binary.empty()) throw std::invalid_argument("budget of an empty mask set");
  double active = 0.0;
  for (double b : binary) active += b;
  return active / static_cast<double>(binary.size());
}

double budget_loss(std::span<const double> binary, double target) {
  if (!(target > 0.0 && target <= 1.0)) {
    throw std::invalid_argument("budget target must lie in (0, 1], got " + std::to_string(target));
  }
  const double gap = budget(binary) - target;
  return gap * gap;
}

double l1_penalty(std::span<const double> scores) {
  double total = 0.0;
  for (double s : scores) total += std::abs(s);
  return total;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double surrogate_slope(double score, double temperature) {
  const double s = sigmoid(score / temperature);
  return s * (1.0 - s) / temperature;
}

std::vector<double> pseudo_grad(std::span<const double> upstream, std::span<const double> scores,
                                double temperature) {
  if (upstream.size() != scores.size()) {
    throw std::invalid_argument("pseudo_grad: upstream has " + std::to_string(upstream.size()) + " entries, scores " +
                                std::to_string(scores.size()));
  }
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = upstream[i] * surrogate_slope(scores[i], temperature);
  return out;
}

std::vector<double> init_masks(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> out(count);
  // unit() is in [0, 1), so 0.01 * (1 - u) lies in (0, 0.01].
  for (auto& v : out) v = 0.01 * (1.0 - unit(rng));
  return out;
}

MaskSet init_masks(const MaskLayout& layout, std::uint64_t seed) {
  return MaskSet(layout, init_masks(layout.total(), seed));
}

}  // namespace metadock::masking
