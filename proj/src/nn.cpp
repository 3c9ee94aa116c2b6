#include "metadock/nn.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace metadock::nn {

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::kBatchTransductive:
      return "batch-transductive";
    case NormKind::kGroup:
      return "group";
  }
  return "unknown";
}

NormKind parse_norm_kind(const std::string& text) {
  if (text == "batch-transductive") return NormKind::kBatchTransductive;
  if (text == "group") return NormKind::kGroup;
  throw std::invalid_argument("unknown normalization kind '" + text + "'");
}

void MaskedConvLayer::validate() const {
  if (kernels.rank() != 4) throw ShapeError("masked conv kernels must be rank 4, got " + shape_string(kernels.shape()));
  const Shape expect_masks{kernels.dim(0), kernels.dim(1)};
  if (masks.shape() != expect_masks) {
    throw ShapeError("masked conv masks " + shape_string(masks.shape()) + " do not match kernel slices " +
                     shape_string(expect_masks));
  }
  if (bias.size() != kernels.dim(0)) {
    throw ShapeError("masked conv bias " + shape_string(bias.shape()) + " for " + std::to_string(kernels.dim(0)) +
                     " output channels");
  }
}

ad::Var masked_conv(ad::Var x, ad::Var kernels, ad::Var masks, ad::Var bias, int stride, int padding, MaskUse use,
                    double temperature) {
  ad::Var effective = kernels;
  if (use != MaskUse::kNone) {
    const auto kind = use == MaskUse::kBinarized ? ad::MaskMode::Kind::kBinarized : ad::MaskMode::Kind::kContinuous;
    effective = ad::mask_kernels(kernels, masks, ad::MaskMode{kind, temperature});
  }
  return ad::add_channel_bias(ad::conv2d(x, effective, stride, padding), bias);
}

Tensor masked_forward(const MaskedConvLayer& layer, const Tensor& input, bool binarize) {
  layer.validate();
  ad::Graph g;
  auto y = masked_conv(g.constant(input), g.constant(layer.kernels), g.constant(layer.masks), g.constant(layer.bias),
                       layer.stride, layer.padding, binarize ? MaskUse::kBinarized : MaskUse::kContinuous);
  return y.value();
}

FourConvModel::FourConvModel(ModelConfig config) : config_(config) {
  if (config_.in_channels < 1 || config_.width < 1 || config_.n_way < 2) {
    throw std::invalid_argument("model needs in_channels >= 1, width >= 1, n_way >= 2");
  }
  if (config_.image_size < 16) {
    throw std::invalid_argument("image_size " + std::to_string(config_.image_size) +
                                " too small for four 2x2 pools (need >= 16)");
  }
  if (config_.norm.kind == NormKind::kGroup &&
      (config_.norm.group_count < 1 || config_.width % config_.norm.group_count != 0)) {
    throw std::invalid_argument("group_count must divide width");
  }
  const auto W = static_cast<std::size_t>(config_.width);
  const auto K = static_cast<std::size_t>(kKernel);
  auto add = [this](std::string name, Shape shape) {
    params_.push_back(ParamEntry{std::move(name), shape, param_count_});
    param_count_ += shape_size(shape);
  };
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  std::size_t cin = static_cast<std::size_t>(config_.in_channels);
  std::size_t spatial = static_cast<std::size_t>(config_.image_size);
  for (int b = 0; b < kBlocks; ++b) {
    const auto tag = std::to_string(b);
    add("conv" + tag + ".kernels", Shape{W, cin, K, K});
    add("conv" + tag + ".bias", Shape{W});
    add("norm" + tag + ".gamma", Shape{W});
    add("norm" + tag + ".beta", Shape{W});
    blocks.emplace_back(W, cin);
    cin = W;
    spatial /= 2;
  }
  features_ = W * spatial * spatial;
  add("head.weight", Shape{static_cast<std::size_t>(config_.n_way), features_});
  add("head.bias", Shape{static_cast<std::size_t>(config_.n_way)});
  mask_layout_ = masking::MaskLayout(blocks);
}

const ParamEntry& FourConvModel::param(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

std::vector<double> FourConvModel::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::vector<double> theta(param_count_, 0.0);
  for (const auto& p : params_) {
    double* dst = theta.data() + p.offset;
    if (p.name.ends_with(".kernels")) {
      const double fan_in = static_cast<double>(p.shape[1] * p.shape[2] * p.shape[3]);
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (std::size_t i = 0; i < p.size(); ++i) dst[i] = dist(rng);
    } else if (p.name.ends_with(".gamma")) {
      for (std::size_t i = 0; i < p.size(); ++i) dst[i] = 1.0;
    } else if (p.name == "head.weight") {
      std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(features_)));
      for (std::size_t i = 0; i < p.size(); ++i) dst[i] = dist(rng);
    }
  }
  return theta;
}

FourConvModel::Bound FourConvModel::bind(ad::Graph& graph, std::span<const double> theta,
                                         std::span<const double> masks, bool params_grad, bool masks_grad) const {
  if (theta.size() != param_count_) {
    throw ShapeError("model expects " + std::to_string(param_count_) + " parameters, got " +
                     std::to_string(theta.size()));
  }
  if (!masks.empty() && masks.size() != mask_layout_.total()) {
    throw ShapeError("model expects " + std::to_string(mask_layout_.total()) + " masks, got " +
                     std::to_string(masks.size()));
  }
  Bound bound;
  for (const auto& p : params_) {
    Tensor t(p.shape, std::vector<double>(theta.begin() + static_cast<std::ptrdiff_t>(p.offset),
                                          theta.begin() + static_cast<std::ptrdiff_t>(p.offset + p.size())));
    bound.params.push_back(params_grad ? graph.leaf(std::move(t)) : graph.constant(std::move(t)));
  }
  if (!masks.empty()) {
    for (const auto& block : mask_layout_.blocks()) {
      Tensor t(Shape{block.out_channels, block.in_channels},
               std::vector<double>(masks.begin() + static_cast<std::ptrdiff_t>(block.offset),
                                   masks.begin() + static_cast<std::ptrdiff_t>(block.offset + block.count())));
      bound.masks.push_back(masks_grad ? graph.leaf(std::move(t)) : graph.constant(std::move(t)));
    }
  }
  return bound;
}

void FourConvModel::check_input(const Tensor& x) const {
  const auto s = static_cast<std::size_t>(config_.image_size);
  if (x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(config_.in_channels) || x.dim(2) != s || x.dim(3) != s) {
    throw ShapeError("model input must be [B," + std::to_string(config_.in_channels) + "," + std::to_string(s) + "," +
                     std::to_string(s) + "], got " + shape_string(x.shape()));
  }
  if (x.dim(0) == 0) throw ShapeError("model input batch is empty");
}

ad::Var FourConvModel::forward(const Bound& bound, ad::Var x, MaskUse use, double temperature) const {
  check_input(x.value());
  if (use != MaskUse::kNone && bound.masks.size() != static_cast<std::size_t>(kBlocks)) {
    throw std::invalid_argument("masked forward requested but no masks were bound");
  }
  ad::Var h = x;
  for (int b = 0; b < kBlocks; ++b) {
    const auto base = static_cast<std::size_t>(b) * 4;
    const ad::Var masks = use == MaskUse::kNone ? ad::Var{} : bound.masks[static_cast<std::size_t>(b)];
    h = masked_conv(h, bound.params[base], masks, bound.params[base + 1], 1, 1, use, temperature);
    if (config_.norm.kind == NormKind::kBatchTransductive) {
      h = ad::batch_norm(h, bound.params[base + 2], bound.params[base + 3]);
    } else {
      h = ad::group_norm(h, bound.params[base + 2], bound.params[base + 3], config_.norm.group_count);
    }
    h = ad::relu(h);
    h = ad::max_pool2d(h, 2);
  }
  const std::size_t batch = h.shape()[0];
  h = ad::reshape(h, Shape{batch, features_});
  const auto head = static_cast<std::size_t>(kBlocks) * 4;
  return ad::linear(h, bound.params[head], bound.params[head + 1]);
}

std::vector<double> FourConvModel::param_grads(const Bound& bound) const {
  std::vector<double> out(param_count_, 0.0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = bound.params[i].grad();
    std::copy(g.data().begin(), g.data().end(), out.begin() + static_cast<std::ptrdiff_t>(params_[i].offset));
  }
  return out;
}

std::vector<double> FourConvModel::mask_grads(const Bound& bound) const {
  std::vector<double> out(mask_layout_.total(), 0.0);
  for (std::size_t i = 0; i < bound.masks.size(); ++i) {
    const auto& g = bound.masks[i].grad();
    std::copy(g.data().begin(), g.data().end(),
              out.begin() + static_cast<std::ptrdiff_t>(mask_layout_.block(i).offset));
  }
  return out;
}

double FourConvModel::conv_macs(std::span<const double> binary_masks) const {
  if (!binary_masks.empty() && binary_masks.size() != mask_layout_.total()) {
    throw ShapeError("conv_macs: mask count mismatch");
  }
  double macs = 0.0;
  std::size_t spatial = static_cast<std::size_t>(config_.image_size);
  for (std::size_t b = 0; b < mask_layout_.layers(); ++b) {
    const auto& block = mask_layout_.block(b);
    double active = static_cast<double>(block.count());
    if (!binary_masks.empty()) {
      active = 0.0;
      for (std::size_t i = 0; i < block.count(); ++i) active += binary_masks[block.offset + i];
    }
    macs += active * kKernel * kKernel * static_cast<double>(spatial * spatial);
    spatial /= 2;
  }
  return macs;
}

Tensor model_forward(const FourConvModel& model, std::span<const double> theta, std::span<const double> masks,
                     const Tensor& x, MaskUse use) {
  ad::Graph g;
  auto bound = model.bind(g, theta, use == MaskUse::kNone ? std::span<const double>{} : masks, false, false);
  return model.forward(bound, g.constant(x), use).value();
}

Tensor model_forward(const FourConvModel& model, std::span<const double> theta, std::span<const double> masks,
                     const Tensor& x, bool binarize) {
  return model_forward(model, theta, masks, x, binarize ? MaskUse::kBinarized : MaskUse::kContinuous);
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  ad::Graph g;
  return ad::cross_entropy(g.constant(logits), labels).value().item();
}

std::vector<int> predict(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("predict expects [B, N] logits, got " + shape_string(logits.shape()));
  const std::size_t B = logits.dim(0), N = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t n = 1; n < N; ++n) {
      if (logits[b * N + n] > logits[b * N + best]) best = n;
    }
    out[b] = static_cast<int>(best);
  }
  return out;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  const auto pred = predict(logits);
  if (pred.size() != labels.size() || pred.empty()) {
    throw ShapeError("accuracy: " + std::to_string(labels.size()) + " labels for " + std::to_string(pred.size()) +
                     " predictions");
  }
  const auto N = static_cast<int>(logits.dim(1));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= N) {
      throw std::out_of_range("accuracy: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(N) +
                              ")");
    }
    if (pred[i] == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace metadock::nn
