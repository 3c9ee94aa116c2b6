#include "metadock/meta.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace metadock::meta {

using nlohmann::json;

std::string to_string(MetaGradMode mode) {
  return mode == MetaGradMode::kImplicitCg ? "implicit-cg" : "first-order";
}

std::string to_string(MaskGradMode mode) { return mode == MaskGradMode::kFirstOrder ? "first-order" : "implicit"; }

std::string to_string(PruningMode mode) {
  switch (mode) {
    case PruningMode::kTaskSpecific:
      return "task-specific";
    case PruningMode::kGlobal:
      return "global";
    case PruningMode::kUnpruned:
      return "unpruned";
    case PruningMode::kContinuousBaseline:
      return "continuous-baseline";
  }
  return "unknown";
}

MetaGradMode parse_meta_grad_mode(const std::string& text) {
  if (text == "implicit-cg") return MetaGradMode::kImplicitCg;
  if (text == "first-order") return MetaGradMode::kFirstOrder;
  throw std::invalid_argument("unknown meta_grad_mode '" + text + "'");
}

MaskGradMode parse_mask_grad_mode(const std::string& text) {
  if (text == "first-order") return MaskGradMode::kFirstOrder;
  if (text == "implicit") return MaskGradMode::kImplicit;
  throw std::invalid_argument("unknown mask_grad_mode '" + text + "'");
}

PruningMode parse_pruning_mode(const std::string& text) {
  if (text == "task-specific") return PruningMode::kTaskSpecific;
  if (text == "global") return PruningMode::kGlobal;
  if (text == "unpruned") return PruningMode::kUnpruned;
  if (text == "continuous-baseline") return PruningMode::kContinuousBaseline;
  throw std::invalid_argument("unknown pruning_mode '" + text + "'");
}

nn::MaskUse mask_use(PruningMode mode) {
  switch (mode) {
    case PruningMode::kUnpruned:
      return nn::MaskUse::kNone;
    case PruningMode::kContinuousBaseline:
      return nn::MaskUse::kContinuous;
    default:
      return nn::MaskUse::kBinarized;
  }
}

void HyperParams::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("hyperparameter " + what); };
  if (!(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0 && lambda4 >= 0 && continuous_l1 >= 0)) {
    fail("lambdas must be >= 0");
  }
  if (!(V0 > 0.0 && V0 <= 1.0)) fail("V0 must be in (0, 1], got " + std::to_string(V0));
  if (!(beta > 0 && eta_theta > 0 && eta_z > 0 && mask_step() > 0)) fail("learning rates must be > 0");
  if (n_inner < 0 || n_outer < 0) fail("iteration counts must be >= 0");
  if (meta_batch < 1) fail("meta_batch must be >= 1");
  if (cg_iters < 1 || !(cg_tol >= 0)) fail("cg_iters must be >= 1 and cg_tol >= 0");
  if (!(temperature > 0)) fail("temperature must be > 0");
  if (eval_cadence < 1) fail("eval_cadence must be >= 1");
}

LossEval ConvLearner::loss(std::span<const double> theta, std::span<const double> masks, const tasks::Batch& data,
                           nn::MaskUse use, bool want_param_grad, bool want_mask_grad, double temperature) const {
  const bool masked = use != nn::MaskUse::kNone;
  want_mask_grad = want_mask_grad && masked;
  ad::Graph g;
  auto bound = model_.bind(g, theta, masked ? masks : std::span<const double>{}, want_param_grad, want_mask_grad);
  auto logits = model_.forward(bound, g.constant(data.images), use, temperature);
  auto loss = ad::cross_entropy(logits, data.labels);
  LossEval out;
  out.loss = loss.value().item();
  if (want_param_grad || want_mask_grad) g.backward(loss);
  if (want_param_grad) out.grad_params = model_.param_grads(bound);
  out.grad_masks = want_mask_grad ? model_.mask_grads(bound) : Vec(model_.mask_count(), 0.0);
  return out;
}

Tensor ConvLearner::logits(std::span<const double> theta, std::span<const double> masks, const Tensor& x,
                           nn::MaskUse use) const {
  return nn::model_forward(model_, theta, masks, x, use);
}

MetaState initial_state(const Learner& learner, Vec theta, std::uint64_t mask_seed) {
  if (theta.size() != learner.param_count()) {
    throw ShapeError("initial_state: " + std::to_string(theta.size()) + " parameters for a model with " +
                     std::to_string(learner.param_count()));
  }
  return MetaState{std::move(theta), masking::init_masks(learner.mask_layout(), mask_seed), 0};
}

TaskState start_task(const MetaState& meta) { return TaskState{meta.theta, meta.z, {}, false}; }

namespace {

bool adapts_masks(const HyperParams& hp) { return hp.pruning_mode == PruningMode::kTaskSpecific; }

double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

void check_lengths(const Learner& learner, std::span<const double> params, std::span<const double> masks,
                   const char* what) {
  if (params.size() != learner.param_count() || masks.size() != learner.mask_layout().total()) {
    throw ShapeError(std::string(what) + ": state has " + std::to_string(params.size()) + " params / " +
                     std::to_string(masks.size()) + " masks, model wants " + std::to_string(learner.param_count()) +
                     " / " + std::to_string(learner.mask_layout().total()));
  }
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Pseudo-gradient of lambda3 (V(B(m)) - V0)^2 + lambda4 |m|_1.
void add_budget_terms(std::span<const double> m, const HyperParams& hp, std::span<double> out) {
  const auto binary = masking::binarize(m);
  const double coeff = hp.lambda3 * 2.0 * (masking::budget(binary) - hp.V0) / static_cast<double>(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    out[i] += coeff * masking::surrogate_slope(m[i], hp.temperature) + hp.lambda4 * sign(m[i]);
  }
}

}  // namespace

InnerEval inner_objective(const Learner& learner, const TaskState& task, const MetaState& meta,
                          const tasks::Batch& support, const HyperParams& hp) {
  check_lengths(learner, task.phi, task.zeta.values, "inner_objective");
  check_lengths(learner, meta.theta, meta.z.values, "inner_objective");
  const auto use = mask_use(hp.pruning_mode);
  const bool masks_move = adapts_masks(hp);
  const auto ev = learner.loss(task.phi, task.zeta.values, support, use, true, masks_move, hp.temperature);

  InnerEval out;
  out.task_loss = ev.loss;
  out.l1 = ev.loss + 0.5 * hp.lambda1 * sq_dist(task.phi, meta.theta) +
           0.5 * hp.lambda2 * sq_dist(task.zeta.values, meta.z.values);
  if (use == nn::MaskUse::kBinarized) {
    out.l2 = inner_loss_L2(out.l1, task.zeta.values, hp);
  } else if (use == nn::MaskUse::kContinuous) {
    out.l2 = out.l1 + hp.continuous_l1 * masking::l1_penalty(task.zeta.values);
  } else {
    out.l2 = out.l1;
  }

  out.grad_phi.resize(task.phi.size());
  for (std::size_t i = 0; i < task.phi.size(); ++i) {
    out.grad_phi[i] = ev.grad_params[i] + hp.lambda1 * (task.phi[i] - meta.theta[i]);
  }
  out.grad_zeta.assign(task.zeta.size(), 0.0);
  if (masks_move) {
    for (std::size_t i = 0; i < task.zeta.size(); ++i) {
      out.grad_zeta[i] = ev.grad_masks[i] + hp.lambda2 * (task.zeta.values[i] - meta.z.values[i]);
    }
    add_budget_terms(task.zeta.values, hp, out.grad_zeta);
  }
  return out;
}

double inner_loss_L1(const Learner& learner, const TaskState& task, const MetaState& meta,
                     const tasks::Batch& support, const HyperParams& hp) {
  check_lengths(learner, task.phi, task.zeta.values, "inner_loss_L1");
  check_lengths(learner, meta.theta, meta.z.values, "inner_loss_L1");
  const auto ev =
      learner.loss(task.phi, task.zeta.values, support, mask_use(hp.pruning_mode), false, false, hp.temperature);
  return ev.loss + 0.5 * hp.lambda1 * sq_dist(task.phi, meta.theta) +
         0.5 * hp.lambda2 * sq_dist(task.zeta.values, meta.z.values);
}

double inner_loss_L2(double l1, std::span<const double> zeta, const HyperParams& hp) {
  const auto binary = masking::binarize(zeta);
  return l1 + hp.lambda3 * masking::budget_loss(binary, hp.V0) + hp.lambda4 * masking::l1_penalty(zeta);
}

TaskState adapt(const Learner& learner, const MetaState& meta, const tasks::Batch& support, const HyperParams& hp) {
  if (hp.n_inner < 0) throw std::invalid_argument("adapt: n_inner must be >= 0");
  TaskState task = start_task(meta);
  const bool masks_move = adapts_masks(hp);
  for (int j = 0; j < hp.n_inner; ++j) {
    const auto ev = inner_objective(learner, task, meta, support, hp);
    task.inner_trace.push_back(ev.l2);
    if (!std::isfinite(ev.l2) || !linalg::all_finite(ev.grad_phi) || !linalg::all_finite(ev.grad_zeta)) {
      task.diverged = true;
      return task;
    }
    // Both steps use gradients taken at the same point.
    for (std::size_t i = 0; i < task.phi.size(); ++i) task.phi[i] -= hp.beta * ev.grad_phi[i];
    if (masks_move) {
      for (std::size_t i = 0; i < task.zeta.size(); ++i) task.zeta.values[i] -= hp.mask_step() * ev.grad_zeta[i];
    }
  }
  if (!linalg::all_finite(task.phi) || !linalg::all_finite(task.zeta.values)) task.diverged = true;
  return task;
}

std::vector<double> optimize_masks_only(const Learner& learner, TaskState& task, const MetaState& meta,
                                        const tasks::Batch& support, const HyperParams& hp, int steps) {
  HyperParams local = hp;
  local.pruning_mode = PruningMode::kTaskSpecific;
  std::vector<double> budgets;
  budgets.reserve(static_cast<std::size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    const auto ev = inner_objective(learner, task, meta, support, local);
    if (!std::isfinite(ev.l2) || !linalg::all_finite(ev.grad_zeta)) {
      task.diverged = true;
      break;
    }
    for (std::size_t i = 0; i < task.zeta.size(); ++i) task.zeta.values[i] -= local.mask_step() * ev.grad_zeta[i];
    budgets.push_back(masking::budget(masking::binarize(task.zeta.values)));
  }
  return budgets;
}

linalg::CgResult implicit_solve(const linalg::GradientFn& objective_grad, std::span<const double> point,
                                std::span<const double> rhs, double lambda, int max_iters, double tol) {
  if (!(lambda > 0)) throw std::invalid_argument("implicit_solve: lambda must be > 0");
  if (rhs.size() != point.size()) throw ShapeError("implicit_solve: rhs and point lengths differ");
  const Vec p(point.begin(), point.end());
  auto matvec = [&](std::span<const double> v) {
    auto hv = linalg::hvp(objective_grad, p, v);
    Vec out(v.begin(), v.end());
    linalg::axpy(1.0 / lambda, hv, out);
    return out;
  };
  return linalg::cg_solve(matvec, rhs, max_iters, tol);
}

MetaGradient meta_grad_first_order(const Learner& learner, const TaskState& task, const tasks::Batch& query,
                                   const HyperParams& hp) {
  check_lengths(learner, task.phi, task.zeta.values, "meta_grad_first_order");
  const auto use = mask_use(hp.pruning_mode);
  const auto ev = learner.loss(task.phi, task.zeta.values, query, use, true, use != nn::MaskUse::kNone,
                               hp.temperature);
  MetaGradient out;
  out.g = ev.grad_params;
  out.h = ev.grad_masks;
  out.query_loss = ev.loss;
  return out;
}

MetaGradient meta_grad_implicit(const Learner& learner, const TaskState& task, const MetaState& meta,
                                const tasks::Batch& support, const tasks::Batch& query, const HyperParams& hp) {
  (void)meta;
  auto out = meta_grad_first_order(learner, task, query, hp);
  const auto use = mask_use(hp.pruning_mode);
  const Vec zeta = task.zeta.values;
  const Vec phi = task.phi;

  linalg::GradientFn support_grad = [&](std::span<const double> p) {
    return learner.loss(p, zeta, support, use, true, false, hp.temperature).grad_params;
  };
  const auto solve = implicit_solve(support_grad, phi, out.g, hp.lambda1, hp.cg_iters, hp.cg_tol);
  out.g = solve.x;
  out.cg_converged = solve.converged;
  out.cg_iterations = solve.iterations;
  out.cg_relative_residual = solve.relative_residual;

  if (hp.mask_grad_mode == MaskGradMode::kImplicit && adapts_masks(hp) && hp.lambda2 > 0) {
    linalg::GradientFn mask_grad = [&](std::span<const double> m) {
      return learner.loss(phi, m, support, use, false, true, hp.temperature).grad_masks;
    };
    const auto hs = implicit_solve(mask_grad, zeta, out.h, hp.lambda2, hp.cg_iters, hp.cg_tol);
    out.h = hs.x;
    out.cg_converged = out.cg_converged && hs.converged;
  }
  return out;
}

Vec meta_mask_regularizer(std::span<const double> z, const HyperParams& hp) {
  Vec out(z.size(), 0.0);
  switch (hp.pruning_mode) {
    case PruningMode::kTaskSpecific:
    case PruningMode::kGlobal:
      add_budget_terms(z, hp, out);
      break;
    case PruningMode::kContinuousBaseline:
      for (std::size_t i = 0; i < z.size(); ++i) out[i] = hp.continuous_l1 * sign(z[i]);
      break;
    case PruningMode::kUnpruned:
      break;
  }
  return out;
}

MetaState meta_step(const MetaState& meta, std::span<const MetaGradient> grads, const HyperParams& hp) {
  if (grads.empty()) throw std::invalid_argument("meta_step: empty gradient batch");
  const std::size_t P = meta.theta.size(), M = meta.z.size();
  Vec g_sum(P, 0.0), h_sum(M, 0.0);
  for (const auto& gr : grads) {
    if (gr.g.size() != P || gr.h.size() != M) {
      throw ShapeError("meta_step: gradient lengths " + std::to_string(gr.g.size()) + "/" +
                       std::to_string(gr.h.size()) + " for state " + std::to_string(P) + "/" + std::to_string(M));
    }
    for (std::size_t i = 0; i < P; ++i) g_sum[i] += gr.g[i];
    for (std::size_t i = 0; i < M; ++i) h_sum[i] += gr.h[i];
  }
  const auto n = static_cast<double>(grads.size());
  MetaState next = meta;
  for (std::size_t i = 0; i < P; ++i) next.theta[i] -= hp.eta_theta * (g_sum[i] / n);
  if (!hp.freeze_meta_masks && hp.pruning_mode != PruningMode::kUnpruned) {
    for (std::size_t i = 0; i < M; ++i) next.z.values[i] -= hp.eta_z * (h_sum[i] / n);
    if (hp.pruning_mode == PruningMode::kContinuousBaseline) {
      for (auto& v : next.z.values) v = std::clamp(v, 0.0, 1.0);
    }
  }
  next.step_count = meta.step_count + 1;
  return next;
}

std::string RunLog::to_jsonl() const {
  std::string out;
  for (const auto& e : entries) {
    json j = {{"version", kVersion},
              {"step", e.step},
              {"mean_inner_loss", e.mean_inner_loss},
              {"mean_query_loss", e.mean_query_loss},
              {"meta_budget", e.meta_budget},
              {"task_budgets", e.task_budgets},
              {"diverged_tasks", e.diverged_tasks},
              {"cg_unconverged", e.cg_unconverged},
              {"val_accuracy", e.val_accuracy ? json(*e.val_accuracy) : json(nullptr)}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

RunLog RunLog::from_jsonl(const std::string& text) {
  RunLog log;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (j.at("version").get<int>() != kVersion) {
      throw std::runtime_error("run log line " + std::to_string(line_no) + ": unsupported version " +
                               j.at("version").dump());
    }
    RunLogEntry e;
    e.step = j.at("step").get<int>();
    e.mean_inner_loss = j.at("mean_inner_loss").get<double>();
    e.mean_query_loss = j.at("mean_query_loss").get<double>();
    e.meta_budget = j.at("meta_budget").get<double>();
    e.task_budgets = j.at("task_budgets").get<std::vector<double>>();
    e.diverged_tasks = j.at("diverged_tasks").get<int>();
    e.cg_unconverged = j.at("cg_unconverged").get<int>();
    if (!j.at("val_accuracy").is_null()) e.val_accuracy = j.at("val_accuracy").get<double>();
    log.entries.push_back(std::move(e));
  }
  return log;
}

TrainResult train(const Learner& learner, const MetaState& initial, const TaskSource& source, const HyperParams& hp,
                  const EvalHook& eval_hook) {
  hp.validate();
  check_lengths(learner, initial.theta, initial.z.values, "train");
  TrainResult result;
  MetaState state = initial;
  result.best = initial;
  const bool masked = mask_use(hp.pruning_mode) != nn::MaskUse::kNone;

  for (int step = 0; step < hp.n_outer; ++step) {
    std::vector<MetaGradient> grads;
    RunLogEntry entry;
    entry.step = step + 1;
    for (int i = 0; i < hp.meta_batch; ++i) {
      const auto episode = source(step, i);
      const auto task = adapt(learner, state, episode.support, hp);
      if (task.diverged) {
        ++entry.diverged_tasks;
        continue;
      }
      auto mg = hp.meta_grad_mode == MetaGradMode::kImplicitCg
                    ? meta_grad_implicit(learner, task, state, episode.support, episode.query, hp)
                    : meta_grad_first_order(learner, task, episode.query, hp);
      if (!std::isfinite(mg.query_loss) || !linalg::all_finite(mg.g) || !linalg::all_finite(mg.h)) {
        ++entry.diverged_tasks;
        continue;
      }
      if (!mg.cg_converged && hp.meta_grad_mode == MetaGradMode::kImplicitCg) ++entry.cg_unconverged;
      entry.mean_inner_loss += task.inner_trace.empty() ? 0.0 : task.inner_trace.back();
      entry.mean_query_loss += mg.query_loss;
      entry.task_budgets.push_back(masked ? masking::budget(masking::binarize(task.zeta.values)) : 1.0);
      grads.push_back(std::move(mg));
    }
    if (2 * entry.diverged_tasks > hp.meta_batch) {
      throw NumericalError("meta-step " + std::to_string(step + 1) + ": " + std::to_string(entry.diverged_tasks) +
                           " of " + std::to_string(hp.meta_batch) + " tasks diverged");
    }
    const auto n = static_cast<double>(grads.size());
    entry.mean_inner_loss /= n;
    entry.mean_query_loss /= n;

    if (!hp.freeze_meta_masks) {
      const auto reg = meta_mask_regularizer(state.z.values, hp);
      for (auto& mg : grads) linalg::axpy(1.0, reg, mg.h);
    }
    state = meta_step(state, grads, hp);
    entry.meta_budget = masked ? masking::budget(masking::binarize(state.z.values)) : 1.0;

    const int done = step + 1;
    if (eval_hook && (done % hp.eval_cadence == 0 || done == hp.n_outer)) {
      const double acc = eval_hook(state, done);
      entry.val_accuracy = acc;
      if (!result.best_val_accuracy || acc > *result.best_val_accuracy) {
        result.best_val_accuracy = acc;
        result.best = state;
      }
    }
    result.log.entries.push_back(std::move(entry));
  }
  result.final_state = state;
  if (!result.best_val_accuracy) result.best = state;
  return result;
}

}  // namespace metadock::meta
