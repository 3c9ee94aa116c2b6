#include <cmath>
#include <limits>
#include <string>

#include "conv_kernels.hpp"
#include "metadock/autodiff.hpp"
#include "metadock/masking.hpp"

namespace metadock::ad {

namespace {

Graph& common_graph(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw std::logic_error("operands belong to different graphs");
  return a.graph();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

// grad_buffer(id) += scale * g
void accumulate(Graph& g, std::size_t id, const Tensor& src, double scale = 1.0) {
  if (!g.requires_grad_at(id)) return;
  auto dst = g.grad_buffer(id).data();
  auto s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * s[i];
}

}  // namespace

Var add(Var a, Var b) {
  auto& g = common_graph(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return g.record(OpKind::kAdd, {a.id(), b.id()}, std::move(out), [](Graph& gr, std::size_t self) {
    const auto& in = gr.inputs_at(self);
    accumulate(gr, in[0], gr.grad_at(self));
    accumulate(gr, in[1], gr.grad_at(self));
  });
}

Var sub(Var a, Var b) {
  auto& g = common_graph(a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] -= bd[i];
  return g.record(OpKind::kSub, {a.id(), b.id()}, std::move(out), [](Graph& gr, std::size_t self) {
    const auto& in = gr.inputs_at(self);
    accumulate(gr, in[0], gr.grad_at(self));
    accumulate(gr, in[1], gr.grad_at(self), -1.0);
  });
}

Var mul(Var a, Var b) {
  auto& g = common_graph(a, b);
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
  return g.record(OpKind::kMul, {a.id(), b.id()}, std::move(out), [](Graph& gr, std::size_t self) {
    const auto& in = gr.inputs_at(self);
    auto gout = gr.grad_at(self).data();
    auto av = gr.value_at(in[0]).data();
    auto bv = gr.value_at(in[1]).data();
    if (gr.requires_grad_at(in[0])) {
      auto ga = gr.grad_buffer(in[0]).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * bv[i];
    }
    if (gr.requires_grad_at(in[1])) {
      auto gb = gr.grad_buffer(in[1]).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.graph().record(OpKind::kScale, {a.id()}, std::move(out), [c](Graph& gr, std::size_t self) {
    accumulate(gr, gr.inputs_at(self)[0], gr.grad_at(self), c);
  });
}

Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  return a.graph().record(OpKind::kAddScalar, {a.id()}, std::move(out), [](Graph& gr, std::size_t self) {
    accumulate(gr, gr.inputs_at(self)[0], gr.grad_at(self));
  });
}

Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return a.graph().record(OpKind::kTanh, {a.id()}, std::move(out), [](Graph& gr, std::size_t self) {
    const auto in = gr.inputs_at(self)[0];
    if (!gr.requires_grad_at(in)) return;
    auto y = gr.value_at(self).data();
    auto gout = gr.grad_at(self).data();
    auto gin = gr.grad_buffer(in).data();
    for (std::size_t i = 0; i < gin.size(); ++i) gin[i] += gout[i] * (1.0 - y[i] * y[i]);
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.graph().record(OpKind::kRelu, {a.id()}, std::move(out), [](Graph& gr, std::size_t self) {
    const auto in = gr.inputs_at(self)[0];
    if (!gr.requires_grad_at(in)) return;
    auto x = gr.value_at(in).data();
    auto gout = gr.grad_at(self).data();
    auto gin = gr.grad_buffer(in).data();
    for (std::size_t i = 0; i < gin.size(); ++i) {
      if (x[i] > 0.0) gin[i] += gout[i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.graph().record(OpKind::kReshape, {a.id()}, std::move(out), [](Graph& gr, std::size_t self) {
    accumulate(gr, gr.inputs_at(self)[0], gr.grad_at(self));
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.graph().record(OpKind::kSum, {a.id()}, Tensor::scalar(total), [](Graph& gr, std::size_t self) {
    const auto in = gr.inputs_at(self)[0];
    if (!gr.requires_grad_at(in)) return;
    const double gout = gr.grad_at(self)[0];
    for (auto& v : gr.grad_buffer(in).data()) v += gout;
  });
}

Var abs_sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += std::abs(v);
  return a.graph().record(OpKind::kAbsSum, {a.id()}, Tensor::scalar(total), [](Graph& gr, std::size_t self) {
    const auto in = gr.inputs_at(self)[0];
    if (!gr.requires_grad_at(in)) return;
    const double gout = gr.grad_at(self)[0];
    auto x = gr.value_at(in).data();
    auto gin = gr.grad_buffer(in).data();
    for (std::size_t i = 0; i < gin.size(); ++i) {
      if (x[i] > 0.0) {
        gin[i] += gout;
      } else if (x[i] < 0.0) {
        gin[i] -= gout;
      }
    }
  });
}

Var matmul(Var a, Var b) {
  auto& g = common_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank("matmul", av, 2);
  require_rank("matmul", bv, 2);
  const std::size_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  if (bv.dim(0) != K) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor out(Shape{M, N});
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t k = 0; k < K; ++k) {
      const double x = av[m * K + k];
      for (std::size_t n = 0; n < N; ++n) out[m * N + n] += x * bv[k * N + n];
    }
  }
  return g.record(OpKind::kMatMul, {a.id(), b.id()}, std::move(out), [M, K, N](Graph& gr, std::size_t self) {
    const auto& in = gr.inputs_at(self);
    const auto& gout = gr.grad_at(self);
    const auto& A = gr.value_at(in[0]);
    const auto& B = gr.value_at(in[1]);
    if (gr.requires_grad_at(in[0])) {
      auto& gA = gr.grad_buffer(in[0]);
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) acc += gout[m * N + n] * B[k * N + n];
          gA[m * K + k] += acc;
        }
      }
    }
    if (gr.requires_grad_at(in[1])) {
      auto& gB = gr.grad_buffer(in[1]);
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
          const double x = A[m * K + k];
          for (std::size_t n = 0; n < N; ++n) gB[k * N + n] += x * gout[m * N + n];
        }
      }
    }
  });
}

Var linear(Var x, Var w, Var bias) {
  auto& g = common_graph(x, w);
  common_graph(x, bias);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  require_rank("linear", xv, 2);
  require_rank("linear", wv, 2);
  const std::size_t B = xv.dim(0), F = xv.dim(1), N = wv.dim(0);
  if (wv.dim(1) != F || bv.size() != N) {
    throw ShapeError("linear: input " + shape_string(xv.shape()) + ", weight " + shape_string(wv.shape()) +
                     ", bias " + shape_string(bv.shape()));
  }
  Tensor out(Shape{B, N});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t n = 0; n < N; ++n) {
      double acc = bv[n];
      for (std::size_t f = 0; f < F; ++f) acc += xv[b * F + f] * wv[n * F + f];
      out[b * N + n] = acc;
    }
  }
  return g.record(OpKind::kLinear, {x.id(), w.id(), bias.id()}, std::move(out),
                  [B, F, N](Graph& gr, std::size_t self) {
                    const auto& in = gr.inputs_at(self);
                    const auto& gout = gr.grad_at(self);
                    const auto& X = gr.value_at(in[0]);
                    const auto& W = gr.value_at(in[1]);
                    if (gr.requires_grad_at(in[0])) {
                      auto& gX = gr.grad_buffer(in[0]);
                      for (std::size_t b = 0; b < B; ++b) {
                        for (std::size_t n = 0; n < N; ++n) {
                          const double go = gout[b * N + n];
                          for (std::size_t f = 0; f < F; ++f) gX[b * F + f] += go * W[n * F + f];
                        }
                      }
                    }
                    if (gr.requires_grad_at(in[1])) {
                      auto& gW = gr.grad_buffer(in[1]);
                      for (std::size_t b = 0; b < B; ++b) {
                        for (std::size_t n = 0; n < N; ++n) {
                          const double go = gout[b * N + n];
                          for (std::size_t f = 0; f < F; ++f) gW[n * F + f] += go * X[b * F + f];
                        }
                      }
                    }
                    if (gr.requires_grad_at(in[2])) {
                      auto& gb = gr.grad_buffer(in[2]);
                      for (std::size_t b = 0; b < B; ++b) {
                        for (std::size_t n = 0; n < N; ++n) gb[n] += gout[b * N + n];
                      }
                    }
                  });
}

Var conv2d(Var input, Var kernels, int stride, int padding) {
  auto& g = common_graph(input, kernels);
  const auto& x = input.value();
  const auto& k = kernels.value();
  require_rank("conv2d input", x, 4);
  require_rank("conv2d kernels", k, 4);
  if (k.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels but kernels " +
                     shape_string(k.shape()) + " expect " + std::to_string(k.dim(1)));
  }
  if (k.dim(2) != k.dim(3)) throw ShapeError("conv2d: kernels must be square, got " + shape_string(k.shape()));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  if (k.dim(2) > x.dim(2) + 2 * static_cast<std::size_t>(padding) ||
      k.dim(3) > x.dim(3) + 2 * static_cast<std::size_t>(padding)) {
    throw ShapeError("conv2d: kernel " + shape_string(k.shape()) + " larger than padded input " +
                     shape_string(x.shape()));
  }
  const auto dims = detail::conv_dims(x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2),
                                      static_cast<std::size_t>(stride), static_cast<std::size_t>(padding));
  Tensor out(Shape{dims.batch, dims.out_channels, dims.out_height, dims.out_width});
  detail::conv_forward(dims, x.data().data(), k.data().data(), out.data().data());
  return g.record(OpKind::kConv2d, {input.id(), kernels.id()}, std::move(out), [dims](Graph& gr, std::size_t self) {
    const auto& in = gr.inputs_at(self);
    const double* gout = gr.grad_at(self).data().data();
    if (gr.requires_grad_at(in[0])) {
      detail::conv_backward_input(dims, gout, gr.value_at(in[1]).data().data(), gr.grad_buffer(in[0]).data().data());
    }
    if (gr.requires_grad_at(in[1])) {
      detail::conv_backward_kernels(dims, gout, gr.value_at(in[0]).data().data(),
                                    gr.grad_buffer(in[1]).data().data());
    }
  });
}

Var add_channel_bias(Var x, Var bias) {
  auto& g = common_graph(x, bias);
  const auto& xv = x.value();
  require_rank("add_channel_bias", xv, 4);
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  if (bias.value().size() != C) {
    throw ShapeError("add_channel_bias: bias " + shape_string(bias.shape()) + " for " + std::to_string(C) +
                     " channels");
  }
  Tensor out = xv;
  const auto& bv = bias.value();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      double* p = out.data().data() + (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) p[i] += bv[c];
    }
  }
  return g.record(OpKind::kChannelBias, {x.id(), bias.id()}, std::move(out), [B, C, HW](Graph& gr, std::size_t self) {
    const auto& in = gr.inputs_at(self);
    const auto& gout = gr.grad_at(self);
    accumulate(gr, in[0], gout);
    if (gr.requires_grad_at(in[1])) {
      auto& gb = gr.grad_buffer(in[1]);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* p = gout.data().data() + (b * C + c) * HW;
          double acc = 0.0;
          for (std::size_t i = 0; i < HW; ++i) acc += p[i];
          gb[c] += acc;
        }
      }
    }
  });
}

Var max_pool2d(Var x, int size) {
  const auto& xv = x.value();
  require_rank("max_pool2d", xv, 4);
  if (size < 1) throw ShapeError("max_pool2d: window must be >= 1");
  const std::size_t s = static_cast<std::size_t>(size);
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H < s || W < s) throw ShapeError("max_pool2d: input " + shape_string(xv.shape()) + " smaller than window");
  const std::size_t Ho = H / s, Wo = W / s;
  Tensor out(Shape{B, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* plane = xv.data().data() + bc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (oy * s) * W + ox * s;
        for (std::size_t dy = 0; dy < s; ++dy) {
          for (std::size_t dx = 0; dx < s; ++dx) {
            const std::size_t idx = (oy * s + dy) * W + ox * s + dx;
            if (plane[idx] > plane[best]) best = idx;
          }
        }
        const std::size_t o = (bc * Ho + oy) * Wo + ox;
        out[o] = plane[best];
        argmax[o] = bc * H * W + best;
      }
    }
  }
  return x.graph().record(OpKind::kMaxPool, {x.id()}, std::move(out),
                          [argmax = std::move(argmax)](Graph& gr, std::size_t self) {
                            const auto in = gr.inputs_at(self)[0];
                            if (!gr.requires_grad_at(in)) return;
                            const auto& gout = gr.grad_at(self);
                            auto& gin = gr.grad_buffer(in);
                            for (std::size_t o = 0; o < argmax.size(); ++o) gin[argmax[o]] += gout[o];
                          });
}

namespace {

// Shared normalization: statistics over `groups` blocks per sample (group norm) or per channel
// across the batch (batch norm), followed by a per-channel affine transform.
struct NormPlan {
  std::size_t B, C, HW;
  bool per_channel_across_batch;
  std::size_t groups;
  double eps;

  std::size_t stat_count() const { return per_channel_across_batch ? C : B * groups; }
  std::size_t stat_index(std::size_t b, std::size_t c) const {
    return per_channel_across_batch ? c : b * groups + c / (C / groups);
  }
  double members() const {
    return per_channel_across_batch ? static_cast<double>(B * HW) : static_cast<double>((C / groups) * HW);
  }
};

Var normalize(OpKind kind, Var x, Var gamma, Var beta, NormPlan plan) {
  auto& g = common_graph(x, gamma);
  common_graph(x, beta);
  const auto& xv = x.value();
  const std::size_t B = plan.B, C = plan.C, HW = plan.HW;
  const std::size_t S = plan.stat_count();
  const double m = plan.members();

  std::vector<double> mean(S, 0.0), inv_std(S, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xv.data().data() + (b * C + c) * HW;
      double acc = 0.0;
      for (std::size_t i = 0; i < HW; ++i) acc += p[i];
      mean[plan.stat_index(b, c)] += acc;
    }
  }
  for (auto& v : mean) v /= m;
  std::vector<double> var(S, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t s = plan.stat_index(b, c);
      const double* p = xv.data().data() + (b * C + c) * HW;
      double acc = 0.0;
      for (std::size_t i = 0; i < HW; ++i) acc += (p[i] - mean[s]) * (p[i] - mean[s]);
      var[s] += acc;
    }
  }
  for (std::size_t s = 0; s < S; ++s) inv_std[s] = 1.0 / std::sqrt(var[s] / m + plan.eps);

  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t s = plan.stat_index(b, c);
      const std::size_t base = (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const double h = (xv[base + i] - mean[s]) * inv_std[s];
        xhat[base + i] = h;
        out[base + i] = gv[c] * h + bv[c];
      }
    }
  }

  return g.record(kind, {x.id(), gamma.id(), beta.id()}, std::move(out),
                  [plan, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, std::size_t self) {
                    const auto& in = gr.inputs_at(self);
                    const auto& gout = gr.grad_at(self);
                    const auto& gam = gr.value_at(in[1]);
                    const std::size_t B = plan.B, C = plan.C, HW = plan.HW, S = plan.stat_count();
                    if (gr.requires_grad_at(in[1]) || gr.requires_grad_at(in[2])) {
                      std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
                      for (std::size_t b = 0; b < B; ++b) {
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t base = (b * C + c) * HW;
                          for (std::size_t i = 0; i < HW; ++i) {
                            dgamma[c] += gout[base + i] * xhat[base + i];
                            dbeta[c] += gout[base + i];
                          }
                        }
                      }
                      if (gr.requires_grad_at(in[1])) {
                        auto& gg = gr.grad_buffer(in[1]);
                        for (std::size_t c = 0; c < C; ++c) gg[c] += dgamma[c];
                      }
                      if (gr.requires_grad_at(in[2])) {
                        auto& gb = gr.grad_buffer(in[2]);
                        for (std::size_t c = 0; c < C; ++c) gb[c] += dbeta[c];
                      }
                    }
                    if (!gr.requires_grad_at(in[0])) return;
                    // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)), dxhat = dy * gamma
                    std::vector<double> sum_d(S, 0.0), sum_dx(S, 0.0);
                    for (std::size_t b = 0; b < B; ++b) {
                      for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t s = plan.stat_index(b, c);
                        const std::size_t base = (b * C + c) * HW;
                        for (std::size_t i = 0; i < HW; ++i) {
                          const double d = gout[base + i] * gam[c];
                          sum_d[s] += d;
                          sum_dx[s] += d * xhat[base + i];
                        }
                      }
                    }
                    const double m = plan.members();
                    auto& gx = gr.grad_buffer(in[0]);
                    for (std::size_t b = 0; b < B; ++b) {
                      for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t s = plan.stat_index(b, c);
                        const std::size_t base = (b * C + c) * HW;
                        const double k = inv_std[s] / m;
                        for (std::size_t i = 0; i < HW; ++i) {
                          const double d = gout[base + i] * gam[c];
                          gx[base + i] += k * (m * d - sum_d[s] - xhat[base + i] * sum_dx[s]);
                        }
                      }
                    }
                  });
}

}  // namespace

Var batch_norm(Var x, Var gamma, Var beta, double eps) {
  const auto& xv = x.value();
  require_rank("batch_norm", xv, 4);
  const std::size_t C = xv.dim(1);
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw ShapeError("batch_norm: affine parameters must have " + std::to_string(C) + " entries");
  }
  return normalize(OpKind::kBatchNorm, x, gamma, beta, NormPlan{xv.dim(0), C, xv.dim(2) * xv.dim(3), true, 1, eps});
}

Var group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  const auto& xv = x.value();
  require_rank("group_norm", xv, 4);
  const std::size_t C = xv.dim(1);
  if (groups < 1 || C % static_cast<std::size_t>(groups) != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(C) +
                     " channels");
  }
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw ShapeError("group_norm: affine parameters must have " + std::to_string(C) + " entries");
  }
  return normalize(OpKind::kGroupNorm, x, gamma, beta,
                   NormPlan{xv.dim(0), C, xv.dim(2) * xv.dim(3), false, static_cast<std::size_t>(groups), eps});
}

Var mask_kernels(Var kernels, Var masks, MaskMode mode) {
  auto& g = common_graph(kernels, masks);
  const auto& kv = kernels.value();
  const auto& mv = masks.value();
  require_rank("mask_kernels", kv, 4);
  const std::size_t O = kv.dim(0), I = kv.dim(1), KK = kv.dim(2) * kv.dim(3);
  if (mv.size() != O * I) {
    throw ShapeError("mask_kernels: " + std::to_string(mv.size()) + " masks for kernels " + shape_string(kv.shape()));
  }
  const bool binarized = mode.kind == MaskMode::Kind::kBinarized;
  std::vector<double> factor(O * I);
  for (std::size_t s = 0; s < O * I; ++s) factor[s] = binarized ? masking::binarize(mv[s]) : mv[s];
  Tensor out = kv;
  for (std::size_t s = 0; s < O * I; ++s) {
    double* p = out.data().data() + s * KK;
    for (std::size_t t = 0; t < KK; ++t) p[t] *= factor[s];
  }
  return g.record(OpKind::kMaskKernels, {kernels.id(), masks.id()}, std::move(out),
                  [binarized, mode, factor = std::move(factor), KK](Graph& gr, std::size_t self) {
                    const auto& in = gr.inputs_at(self);
                    const auto& gout = gr.grad_at(self);
                    if (gr.requires_grad_at(in[0])) {
                      auto& gk = gr.grad_buffer(in[0]);
                      for (std::size_t s = 0; s < factor.size(); ++s) {
                        for (std::size_t t = 0; t < KK; ++t) gk[s * KK + t] += factor[s] * gout[s * KK + t];
                      }
                    }
                    if (gr.requires_grad_at(in[1])) {
                      const auto& K = gr.value_at(in[0]);
                      const auto& M = gr.value_at(in[1]);
                      auto& gm = gr.grad_buffer(in[1]);
                      for (std::size_t s = 0; s < factor.size(); ++s) {
                        double acc = 0.0;
                        for (std::size_t t = 0; t < KK; ++t) acc += gout[s * KK + t] * K[s * KK + t];
                        gm[s] += binarized ? acc * masking::surrogate_slope(M[s], mode.temperature) : acc;
                      }
                    }
                  });
}

Var binary_fraction(Var masks, double temperature) {
  const auto& mv = masks.value();
  if (mv.empty()) throw ShapeError("binary_fraction of an empty mask tensor");
  const double n = static_cast<double>(mv.size());
  const double v = masking::budget(masking::binarize(mv.data()));
  return masks.graph().record(OpKind::kBinaryFraction, {masks.id()}, Tensor::scalar(v),
                              [temperature, n](Graph& gr, std::size_t self) {
                                const auto in = gr.inputs_at(self)[0];
                                if (!gr.requires_grad_at(in)) return;
                                const double gout = gr.grad_at(self)[0];
                                const auto& M = gr.value_at(in);
                                auto& gm = gr.grad_buffer(in);
                                for (std::size_t i = 0; i < M.size(); ++i) {
                                  gm[i] += gout * masking::surrogate_slope(M[i], temperature) / n;
                                }
                              });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const auto& z = logits.value();
  require_rank("cross_entropy", z, 2);
  const std::size_t B = z.dim(0), N = z.dim(1);
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) +
                     " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= N) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(N) + ")");
    }
  }
  Tensor probs(Shape{B, N});
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < N; ++n) mx = std::max(mx, z[b * N + n]);
    double se = 0.0;
    for (std::size_t n = 0; n < N; ++n) se += std::exp(z[b * N + n] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t n = 0; n < N; ++n) probs[b * N + n] = std::exp(z[b * N + n] - lse);
    total += lse - z[b * N + static_cast<std::size_t>(labels[b])];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.graph().record(
      OpKind::kCrossEntropy, {logits.id()}, Tensor::scalar(total / static_cast<double>(B)),
      [probs = std::move(probs), lab = std::move(lab), B, N](Graph& gr, std::size_t self) {
        const auto in = gr.inputs_at(self)[0];
        if (!gr.requires_grad_at(in)) return;
        const double gout = gr.grad_at(self)[0] / static_cast<double>(B);
        auto& gz = gr.grad_buffer(in);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t n = 0; n < N; ++n) {
            const double onehot = static_cast<std::size_t>(lab[b]) == n ? 1.0 : 0.0;
            gz[b * N + n] += gout * (probs[b * N + n] - onehot);
          }
        }
      });
}

}  // namespace metadock::ad
