#include "gnlab/gauss_newton.hpp"

#include <cmath>
#include <limits>

#include "gnlab/models.hpp"

namespace gnlab::gn {

namespace {

void add_regularizers(const LinearizedPoint& lp, const ParamTree& delta, const Regularizers& reg, ValueGrad& vg) {
    if (reg.loss_wd == 0.0 && reg.parameter_wd == 0.0) {
        return;
    }
    const ParamTree& theta_t = lp.theta_t();
    const auto& active = lp.active();
    for (std::size_t i = 0; i < delta.size(); ++i) {
        if (!active.empty() && !active[i]) {
            continue;
        }
        const Tensor& d = delta[i].value;
        Tensor& g = vg.grad[i].value;
        if (reg.loss_wd != 0.0) {
            vg.value += 0.5 * reg.loss_wd * dot(d, d);
            g.axpy(reg.loss_wd, d);
        }
        if (reg.parameter_wd != 0.0) {
            const Tensor p = theta_t[i].value + d;
            vg.value += 0.5 * reg.parameter_wd * dot(p, p);
            g.axpy(reg.parameter_wd, p);
        }
    }
}

void require_finite(const ValueGrad& vg, const char* what) {
    if (!std::isfinite(vg.value)) {
        throw NumericalError(std::string(what) + ": non-finite objective value");
    }
}

struct GroupResult {
    ParamTree theta;
    ParamTree best_theta;
    double best_value = std::numeric_limits<double>::infinity();
    double initial = 0.0;
    std::vector<double> trace;
    std::size_t steps_run = 0;
    bool diverged = false;
};

// Runs one inner loop per mask, all groups sharing the same micro-batch and
// forward tape at every step. An empty mask means every entry.
std::vector<GroupResult> run_inner_groups(const InnerConfig& config, const ad::Graph& graph, LossKind loss,
                                          const ParamTree& theta_t, const ParamTree& delta0, BatchProvider& batches,
                                          std::vector<TreeOptimizer*> optimizers,
                                          const std::function<double(std::size_t)>& lr_mult,
                                          const std::vector<std::vector<bool>>& masks, std::uint64_t* tokens,
                                          std::vector<double>* base_losses) {
    theta_t.require_congruent(delta0, "inner_minimize");
    std::vector<GroupResult> groups(masks.size());
    for (std::size_t g = 0; g < masks.size(); ++g) {
        ParamTree d = delta0;
        if (!masks[g].empty()) {
            d.apply_mask(masks[g]);
        }
        groups[g].theta = theta_t + d;
        groups[g].best_theta = groups[g].theta;
    }
    for (std::size_t k = 0; k < config.n_steps; ++k) {
        Batch batch = batches.next(config.b_inner);
        if (tokens) {
            *tokens += batch.token_count();
        }
        bool any_running = false;
        for (const auto& gr : groups) {
            any_running = any_running || !gr.diverged;
        }
        if (!any_running) {
            continue;  // keep the stream aligned with the batch plan
        }
        const LinearizedPoint base(graph, loss, theta_t, std::move(batch));
        if (base_losses) {
            base_losses->push_back(base.base_loss().value());
        }
        for (std::size_t g = 0; g < groups.size(); ++g) {
            GroupResult& gr = groups[g];
            if (gr.diverged) {
                continue;
            }
            const LinearizedPoint lp = masks[g].empty() ? base : base.masked(masks[g]);
            const ParamTree delta = gr.theta - theta_t;
            ValueGrad vg = config.objective == InnerObjective::gn_quadratic
                               ? gn_quadratic_value_and_grad(lp, delta, config.reg)
                               : prox_linear_value_and_grad(lp, delta, config.reg);
            gr.trace.push_back(vg.value);
            if (k == 0) {
                gr.initial = vg.value;
            }
            if (!std::isfinite(vg.value) ||
                (k > 0 && vg.value > config.divergence_factor * std::abs(gr.initial))) {
                gr.diverged = true;
                continue;
            }
            if (vg.value < gr.best_value) {
                gr.best_value = vg.value;
                gr.best_theta = gr.theta;
            }
            optimizers[g]->step(gr.theta, vg.grad, lr_mult(k), masks[g].empty() ? nullptr : &masks[g]);
            ++gr.steps_run;
        }
    }
    return groups;
}

}  // namespace

LinearizedPoint::LinearizedPoint(const ad::Graph& graph, LossKind loss, const ParamTree& theta_t, Batch batch)
    : loss_(loss) {
    batch_ = std::make_shared<const Batch>(std::move(batch));
    tape_ = std::make_shared<const ad::Tape>(ad::forward(graph, theta_t, *batch_));
    base_ = std::make_shared<const LogitLoss>(LogitLoss::evaluate(loss, tape_->output_value(), *batch_));
}

LinearizedPoint LinearizedPoint::masked(std::vector<bool> active) const {
    if (!active.empty() && active.size() != theta_t().size()) {
        throw ShapeError("LinearizedPoint::masked: mask size mismatch");
    }
    LinearizedPoint lp = *this;
    lp.active_ = std::move(active);
    return lp;
}

Tensor LinearizedPoint::tangent(const ParamTree& delta) const {
    theta_t().require_congruent(delta, "linearized_output");
    if (active_.empty()) {
        return tape_->jvp(delta);
    }
    ParamTree d = delta;
    d.apply_mask(active_);
    return tape_->jvp(d);
}

Tensor LinearizedPoint::linearized_output(const ParamTree& delta) const { return z_t() + tangent(delta); }

ParamTree LinearizedPoint::pullback(const Tensor& u) const {
    return active_.empty() ? tape_->vjp(u) : tape_->vjp(u, active_);
}

ValueGrad gn_quadratic_value_and_grad(const LinearizedPoint& lp, const ParamTree& delta, const Regularizers& reg) {
    const Tensor u = lp.tangent(delta);
    const LogitLoss& base = lp.base_loss();
    const Tensor hu = base.hessian_vp(u);
    ValueGrad vg;
    vg.value = base.value() + dot(base.grad(), u) + 0.5 * dot(u, hu);
    vg.grad = lp.pullback(base.grad() + hu);
    add_regularizers(lp, delta, reg, vg);
    require_finite(vg, "gn_quadratic");
    return vg;
}

ValueGrad prox_linear_value_and_grad(const LinearizedPoint& lp, const ParamTree& delta, const Regularizers& reg) {
    const Tensor z = lp.linearized_output(delta);
    const LogitLoss at = LogitLoss::evaluate(lp.loss_kind(), z, lp.batch());
    ValueGrad vg;
    vg.value = at.value();
    vg.grad = lp.pullback(at.grad());
    add_regularizers(lp, delta, reg, vg);
    require_finite(vg, "prox_linear");
    return vg;
}

FixedBatches::FixedBatches(std::vector<Batch> batches) : batches_(std::move(batches)) {
    if (batches_.empty()) {
        throw ConfigError("FixedBatches needs at least one batch");
    }
}

Batch FixedBatches::next(std::size_t) {
    Batch b = batches_[pos_];
    pos_ = (pos_ + 1) % batches_.size();
    return b;
}

InnerResult inner_minimize(const InnerConfig& config, const ad::Graph& graph, LossKind loss, const ParamTree& theta_t,
                           const ParamTree& delta0, BatchProvider& batches, TreeOptimizer& optimizer,
                           const std::function<double(std::size_t)>& lr_mult, const std::vector<bool>* active) {
    std::vector<std::vector<bool>> masks{active ? *active : std::vector<bool>{}};
    auto groups = run_inner_groups(config, graph, loss, theta_t, delta0, batches, {&optimizer}, lr_mult, masks, nullptr, nullptr);
    GroupResult& g = groups.front();
    InnerResult r;
    r.theta_hat = g.diverged ? std::move(g.best_theta) : std::move(g.theta);
    r.trace = std::move(g.trace);
    r.steps_run = g.steps_run;
    r.diverged = g.diverged;
    return r;
}

bool GnConfig::use_line_search() const { return line_search.value_or(variant != GnVariant::prox_linear); }

int GnConfig::exponent() const { return max_exponent.value_or(variant == GnVariant::layerwise ? 9 : 4); }

GnStepReport gn_outer_step(const GnConfig& config, const ad::Graph& graph, LossKind loss, GnState& state,
                           BatchProvider& batches) {
    const InnerConfig& inner = config.inner;
    if (inner.n_steps == 0 || inner.b_inner == 0) {
        throw ConfigError("Gauss-Newton needs n_steps >= 1 and b_inner >= 1");
    }
    const ParamTree& theta_t = state.theta;

    std::vector<std::vector<bool>> masks;
    if (config.variant == GnVariant::layerwise) {
        for (int layer : theta_t.layers()) {
            const int one[] = {layer};
            masks.push_back(theta_t.layer_mask(one));
        }
    } else {
        masks.emplace_back();
    }
    OptimizerConfig opt = inner.optimizer;
    opt.weight_decay = inner.reg.optimizer_wd;
    if (state.optimizers.size() != masks.size()) {
        state.optimizers.clear();
        for (std::size_t g = 0; g < masks.size(); ++g) {
            state.optimizers.emplace_back(opt, theta_t);
        }
    } else if (!inner.persist_optimizer_state) {
        for (auto& o : state.optimizers) {
            o.reset();
        }
    }
    std::vector<TreeOptimizer*> opts;
    for (auto& o : state.optimizers) {
        opts.push_back(&o);
    }

    ParamTree delta0 = inner.warm_start && state.prev_theta_hat ? *state.prev_theta_hat - theta_t : theta_t.zeros_like();
    const std::size_t outer = state.outer_step;
    auto lr_mult = [&](std::size_t k) { return lr_multiplier(config.schedule, outer, k, inner.n_steps); };

    InnerConfig run = inner;
    run.objective = config.variant == GnVariant::prox_linear ? InnerObjective::prox_linear : inner.objective;

    GnStepReport report;
    auto groups = run_inner_groups(run, graph, loss, theta_t, delta0, batches, opts, lr_mult, masks,
                                   &report.tokens_consumed, &report.micro_batch_losses);

    ParamTree theta_hat = theta_t;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        GroupResult& gr = groups[g];
        const ParamTree& src = gr.diverged ? gr.best_theta : gr.theta;
        for (std::size_t i = 0; i < theta_hat.size(); ++i) {
            if (masks[g].empty() || masks[g][i]) {
                theta_hat[i].value = src[i].value;
            }
        }
        report.diverged = report.diverged || gr.diverged;
        if (groups.size() == 1) {
            report.inner_loss_trace = std::move(gr.trace);
        } else {
            // layerwise: sum of per-layer objectives at each step
            for (std::size_t k = 0; k < gr.trace.size(); ++k) {
                if (report.inner_loss_trace.size() <= k) {
                    report.inner_loss_trace.push_back(0.0);
                }
                report.inner_loss_trace[k] += gr.trace[k];
            }
        }
    }

    report.line_search = config.use_line_search();
    ParamTree theta_next;
    if (report.line_search) {
        const Batch eval = batches.next(config.eval_seqs ? config.eval_seqs : inner.b_inner);
        report.line_search_tokens = eval.token_count();
        auto loss_fn = [&](const ParamTree& p) { return model_loss(graph, loss, p, eval); };
        LineSearchResult ls =
            line_search(loss_fn, theta_t, theta_hat, step_candidates(config.exponent()), config.reject_on_increase);
        report.alpha_star = ls.alpha_star;
        report.alphas = std::move(ls.alphas);
        report.candidate_losses = std::move(ls.losses);
        report.base_loss = ls.base_loss;
        report.rejected = ls.rejected;
        theta_next = std::move(ls.theta_next);
    } else {
        report.alpha_star = 1.0;
        theta_next = theta_hat;
    }
    report.theta_hat = theta_hat;
    state.prev_theta_hat = std::move(theta_hat);
    state.theta = std::move(theta_next);
    ++state.outer_step;
    return report;
}

}  // namespace gnlab::gn
