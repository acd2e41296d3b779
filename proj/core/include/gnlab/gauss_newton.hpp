#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "gnlab/batch.hpp"
#include "gnlab/data.hpp"
#include "gnlab/line_search.hpp"
#include "gnlab/losses.hpp"
#include "gnlab/param_tree.hpp"
#include "gnlab/schedule.hpp"
#include "gnlab/tape.hpp"
#include "gnlab/tree_optimizer.hpp"

namespace gnlab::gn {

/// First-order expansion of the model around theta_t on one micro-batch.
///
/// Holds one forward tape; linearized outputs and pullbacks for any
/// direction reuse it. An optional mask restricts the expansion to a subset
/// of parameter entries (layerwise mode); masked-out directions contribute
/// nothing.
class LinearizedPoint {
public:
    LinearizedPoint(const ad::Graph& graph, LossKind loss, const ParamTree& theta_t, Batch batch);

    /// Same tape, different mask.
    LinearizedPoint masked(std::vector<bool> active) const;

    const ParamTree& theta_t() const noexcept { return tape_->params(); }
    const Tensor& z_t() const { return tape_->output_value(); }
    const LogitLoss& base_loss() const noexcept { return *base_; }
    const Batch& batch() const noexcept { return *batch_; }
    LossKind loss_kind() const noexcept { return loss_; }
    const std::vector<bool>& active() const noexcept { return active_; }

    /// J delta (masked).
    Tensor tangent(const ParamTree& delta) const;
    /// z_t + J delta
    Tensor linearized_output(const ParamTree& delta) const;
    /// J^T u (masked).
    ParamTree pullback(const Tensor& u) const;

private:
    LinearizedPoint() = default;

    std::shared_ptr<const ad::Tape> tape_;
    std::shared_ptr<const Batch> batch_;
    std::shared_ptr<const LogitLoss> base_;
    LossKind loss_ = LossKind::cross_entropy;
    std::vector<bool> active_;
};

/// Inner-loop regularizers added to either objective:
/// 0.5 * loss_wd * |delta|^2 + 0.5 * parameter_wd * |theta_t + delta|^2.
/// optimizer_wd is the inner optimizer's own decoupled decay.
struct Regularizers {
    double optimizer_wd = 0.0;
    double loss_wd = 0.0;
    double parameter_wd = 0.0;
};

struct ValueGrad {
    double value = 0.0;
    ParamTree grad;
};

/// With u = J delta: l(z_t) + <grad_z l, u> + 0.5 <u, H_z u>, and its gradient
/// J^T (grad_z l + H_z u).
ValueGrad gn_quadratic_value_and_grad(const LinearizedPoint& lp, const ParamTree& delta, const Regularizers& reg = {});

/// l(z_t + J delta) and J^T grad_z l(z_t + J delta).
ValueGrad prox_linear_value_and_grad(const LinearizedPoint& lp, const ParamTree& delta, const Regularizers& reg = {});

enum class InnerObjective : std::uint8_t { gn_quadratic, prox_linear };

/// Supplies micro-batches to the inner loop and the line search.
class BatchProvider {
public:
    virtual ~BatchProvider() = default;
    virtual Batch next(std::size_t b_seqs) = 0;
};

/// Consecutive batches from a stream; advances the shared cursor.
class StreamBatches final : public BatchProvider {
public:
    StreamBatches(const DataSource& source, std::uint64_t& cursor, std::size_t context)
        : source_(source), cursor_(cursor), context_(context) {}
    Batch next(std::size_t b_seqs) override { return next_batch(source_, cursor_, b_seqs, context_); }

private:
    const DataSource& source_;
    std::uint64_t& cursor_;
    std::size_t context_;
};

/// Cycles through a fixed list of batches, ignoring the requested size.
/// With one batch this is full-batch mode.
class FixedBatches final : public BatchProvider {
public:
    explicit FixedBatches(std::vector<Batch> batches);
    Batch next(std::size_t b_seqs) override;

private:
    std::vector<Batch> batches_;
    std::size_t pos_ = 0;
};

struct InnerConfig {
    InnerObjective objective = InnerObjective::gn_quadratic;
    OptimizerConfig optimizer{.kind = OptimizerKind::muon, .lr = 0.01, .beta1 = 0.9, .beta2 = 0.95};
    std::size_t b_inner = 8;
    std::size_t n_steps = 4;
    Regularizers reg;
    bool warm_start = true;
    // Keep inner optimizer state across outer steps instead of resetting it.
    bool persist_optimizer_state = false;
    double divergence_factor = 10.0;
};

struct InnerResult {
    ParamTree theta_hat;
    std::vector<double> trace;  // objective before each inner step
    std::size_t steps_run = 0;
    bool diverged = false;
};

/// Minimizes the configured objective over theta = theta_t + delta, starting
/// from delta0, with n_steps optimizer steps on fresh micro-batches. A step
/// whose objective exceeds divergence_factor * |initial| stops the loop and
/// returns the best iterate seen.
InnerResult inner_minimize(const InnerConfig& config, const ad::Graph& graph, LossKind loss, const ParamTree& theta_t,
                           const ParamTree& delta0, BatchProvider& batches, TreeOptimizer& optimizer,
                           const std::function<double(std::size_t)>& lr_mult, const std::vector<bool>* active = nullptr);

enum class GnVariant : std::uint8_t { full, prox_linear, layerwise };

struct GnConfig {
    GnVariant variant = GnVariant::full;
    InnerConfig inner;
    ScheduleSpec schedule;
    // Defaults: on for full/layerwise, off for prox-linear.
    std::optional<bool> line_search;
    // Exponent range for 2^(-i/2); defaults 4 (full, prox) and 9 (layerwise).
    std::optional<int> max_exponent;
    bool reject_on_increase = true;
    // Line-search evaluation batch in sequences; 0 means b_inner.
    std::size_t eval_seqs = 0;

    bool use_line_search() const;
    int exponent() const;
    std::size_t global_batch() const noexcept { return inner.b_inner * inner.n_steps; }
};

struct GnState {
    ParamTree theta;
    std::optional<ParamTree> prev_theta_hat;  // warm start memory
    std::size_t outer_step = 0;
    std::vector<TreeOptimizer> optimizers;    // one, or one per layer group

    explicit GnState(ParamTree params) : theta(std::move(params)) {}
};

struct GnStepReport {
    ParamTree theta_hat;
    double alpha_star = 1.0;
    std::vector<double> alphas;
    std::vector<double> candidate_losses;
    double base_loss = 0.0;
    bool line_search = false;
    bool rejected = false;
    bool diverged = false;
    std::vector<double> inner_loss_trace;
    // True loss at theta_t on each inner micro-batch.
    std::vector<double> micro_batch_losses;
    std::uint64_t tokens_consumed = 0;      // N * b_inner * context
    std::uint64_t line_search_tokens = 0;
};

/// One outer step of full GN, GN-prox-linear or layerwise GN, updating
/// state.theta, the warm-start memory and the outer step counter.
GnStepReport gn_outer_step(const GnConfig& config, const ad::Graph& graph, LossKind loss, GnState& state,
                           BatchProvider& batches);

}  // namespace gnlab::gn
