#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metadock/linalg.hpp"
#include "metadock/masking.hpp"
#include "metadock/nn.hpp"
#include "metadock/tasks.hpp"

namespace metadock::meta {

using linalg::Vec;

enum class MetaGradMode { kImplicitCg, kFirstOrder };
enum class MaskGradMode { kFirstOrder, kImplicit };
enum class PruningMode { kTaskSpecific, kGlobal, kUnpruned, kContinuousBaseline };

std::string to_string(MetaGradMode mode);
std::string to_string(MaskGradMode mode);
std::string to_string(PruningMode mode);
MetaGradMode parse_meta_grad_mode(const std::string& text);
MaskGradMode parse_mask_grad_mode(const std::string& text);
PruningMode parse_pruning_mode(const std::string& text);

/// How masks enter the forward pass for a pruning mode.
nn::MaskUse mask_use(PruningMode mode);

struct HyperParams {
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  double lambda3 = 50.0;
  double lambda4 = 1e-6;
  double V0 = 0.5;
  double beta = 0.05;
  /// Inner step for the masks; falls back to beta.
  std::optional<double> beta_mask;
  double eta_theta = 0.05;
  double eta_z = 0.05;
  int n_inner = 5;
  int n_outer = 1000;
  int meta_batch = 4;
  int cg_iters = 5;
  double cg_tol = 1e-6;
  MetaGradMode meta_grad_mode = MetaGradMode::kImplicitCg;
  MaskGradMode mask_grad_mode = MaskGradMode::kFirstOrder;
  PruningMode pruning_mode = PruningMode::kTaskSpecific;
  double temperature = 1.0;
  int eval_cadence = 100;
  /// Leave z untouched in meta_step (used when finetuning a fixed compressed model).
  bool freeze_meta_masks = false;
  /// l1 weight on continuous masks in the continuous baseline.
  double continuous_l1 = 1e-4;

  double mask_step() const { return beta_mask.value_or(beta); }
  void validate() const;
  bool operator==(const HyperParams&) const = default;
};

struct MetaState {
  Vec theta;
  masking::MaskSet z;
  int step_count = 0;

  bool operator==(const MetaState&) const = default;
};

struct TaskState {
  Vec phi;
  masking::MaskSet zeta;
  /// L2 before each inner step.
  std::vector<double> inner_trace;
  bool diverged = false;
};

struct MetaGradient {
  Vec g;
  Vec h;
  double query_loss = 0.0;
  bool cg_converged = true;
  int cg_iterations = 0;
  double cg_relative_residual = 0.0;
};

/// Task loss and its gradients for one model family.
struct LossEval {
  double loss = 0.0;
  Vec grad_params;
  /// Straight-through pseudo-gradient under binarized masks, plain gradient under continuous ones.
  Vec grad_masks;
};

/// The model seen by the meta-optimizer: a flat parameter vector, a mask layout, a loss and logits.
class Learner {
 public:
  virtual ~Learner() = default;
  virtual std::size_t param_count() const = 0;
  virtual const masking::MaskLayout& mask_layout() const = 0;
  virtual LossEval loss(std::span<const double> theta, std::span<const double> masks, const tasks::Batch& data,
                        nn::MaskUse use, bool want_param_grad, bool want_mask_grad, double temperature) const = 0;
  virtual Tensor logits(std::span<const double> theta, std::span<const double> masks, const Tensor& x,
                        nn::MaskUse use) const = 0;
};

class ConvLearner final : public Learner {
 public:
  explicit ConvLearner(nn::ModelConfig config) : model_(config) {}

  const nn::FourConvModel& model() const { return model_; }
  std::size_t param_count() const override { return model_.param_count(); }
  const masking::MaskLayout& mask_layout() const override { return model_.mask_layout(); }
  LossEval loss(std::span<const double> theta, std::span<const double> masks, const tasks::Batch& data,
                nn::MaskUse use, bool want_param_grad, bool want_mask_grad, double temperature) const override;
  Tensor logits(std::span<const double> theta, std::span<const double> masks, const Tensor& x,
                nn::MaskUse use) const override;

 private:
  nn::FourConvModel model_;
};

MetaState initial_state(const Learner& learner, Vec theta, std::uint64_t mask_seed);

TaskState start_task(const MetaState& meta);

/// Value and gradients of the inner objectives at (phi, zeta).
struct InnerEval {
  double task_loss = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  Vec grad_phi;   ///< d L1 / d phi
  Vec grad_zeta;  ///< pseudo-gradient of L2 w.r.t. zeta (zeros when masks are not adapted)
};

InnerEval inner_objective(const Learner& learner, const TaskState& task, const MetaState& meta,
                          const tasks::Batch& support, const HyperParams& hp);

/// support loss under binarized masks + lambda1/2 |phi - theta|^2 + lambda2/2 |zeta - z|^2.
double inner_loss_L1(const Learner& learner, const TaskState& task, const MetaState& meta,
                     const tasks::Batch& support, const HyperParams& hp);
/// L1 + lambda3 (V(B(zeta)) - V0)^2 + lambda4 |zeta|_1.
double inner_loss_L2(double l1, std::span<const double> zeta, const HyperParams& hp);

/// n_inner simultaneous SGD steps on phi (grad of L1) and zeta (pseudo-grad of L2).
TaskState adapt(const Learner& learner, const MetaState& meta, const tasks::Batch& support, const HyperParams& hp);

/// Descends L2 in zeta only, weights held at phi. Returns the zeta trajectory's budgets.
std::vector<double> optimize_masks_only(const Learner& learner, TaskState& task, const MetaState& meta,
                                        const tasks::Batch& support, const HyperParams& hp, int steps);

/// Solves (I + H / lambda) x = rhs with H = Hessian of `objective_grad` at `point`.
linalg::CgResult implicit_solve(const linalg::GradientFn& objective_grad, std::span<const double> point,
                                std::span<const double> rhs, double lambda, int max_iters, double tol);

MetaGradient meta_grad_first_order(const Learner& learner, const TaskState& task, const tasks::Batch& query,
                                   const HyperParams& hp);

/// g from the implicit system on the support Hessian; h per hp.mask_grad_mode.
MetaGradient meta_grad_implicit(const Learner& learner, const TaskState& task, const MetaState& meta,
                                const tasks::Batch& support, const tasks::Batch& query, const HyperParams& hp);

/// Gradient of the meta-level budget and l1 terms at z, added to h during training.
Vec meta_mask_regularizer(std::span<const double> z, const HyperParams& hp);

MetaState meta_step(const MetaState& meta, std::span<const MetaGradient> grads, const HyperParams& hp);

struct RunLogEntry {
  int step = 0;
  double mean_inner_loss = 0.0;
  double mean_query_loss = 0.0;
  double meta_budget = 0.0;
  std::vector<double> task_budgets;
  int diverged_tasks = 0;
  int cg_unconverged = 0;
  std::optional<double> val_accuracy;

  bool operator==(const RunLogEntry&) const = default;
};

struct RunLog {
  static constexpr int kVersion = 1;
  std::vector<RunLogEntry> entries;

  std::string to_jsonl() const;
  static RunLog from_jsonl(const std::string& text);
  bool operator==(const RunLog&) const = default;
};

/// Episode for task `index` of meta-step `step`.
using TaskSource = std::function<tasks::TaskEpisode(int step, int index)>;
/// Validation accuracy (percent) of a meta-state.
using EvalHook = std::function<double(const MetaState&, int step)>;

struct TrainResult {
  MetaState best;
  MetaState final_state;
  RunLog log;
  std::optional<double> best_val_accuracy;
};

/// Meta-trains from `initial` for hp.n_outer steps. The eval hook runs every hp.eval_cadence steps
/// and after the last one; the best-on-validation state is returned (the final one without a hook).
TrainResult train(const Learner& learner, const MetaState& initial, const TaskSource& source, const HyperParams& hp,
                  const EvalHook& eval_hook = {});

}  // namespace metadock::meta
