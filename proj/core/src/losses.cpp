#include "gnlab/losses.hpp"

#include <cmath>
#include <string>

namespace gnlab {

const char* loss_name(LossKind kind) {
    return kind == LossKind::cross_entropy ? "cross_entropy" : "mse";
}

LossReport cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
    const std::size_t rows = logits.rows(), k = logits.cols();
    if (labels.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(logits.shape()));
    }
    LossReport r;
    r.probs = Tensor(Shape{rows, k});
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        const double* z = logits.ptr() + i * k;
        double* p = r.probs.ptr() + i * k;
        double m = z[0];
        for (std::size_t c = 1; c < k; ++c) {
            m = std::max(m, z[c]);
        }
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            p[c] = std::exp(z[c] - m);
            s += p[c];
        }
        for (std::size_t c = 0; c < k; ++c) {
            p[c] /= s;
        }
        const std::int32_t y = labels[i];
        if (y == kMaskedLabel) {
            continue;
        }
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
        }
        total += m + std::log(s) - z[y];
        ++r.token_count;
    }
    if (r.token_count == 0) {
        throw ShapeError("cross_entropy: every label is masked");
    }
    r.loss = total / static_cast<double>(r.token_count);
    if (!std::isfinite(r.loss)) {
        throw NumericalError("cross_entropy: non-finite loss");
    }
    return r;
}

Tensor ce_hessian_logits_vp(const Tensor& p, const Tensor& v) {
    if (p.numel() != v.numel() || p.cols() != v.cols()) {
        throw ShapeError("ce_hessian_logits_vp: shape mismatch " + shape_string(p.shape()) + " vs " +
                         shape_string(v.shape()));
    }
    const std::size_t rows = p.rows(), k = p.cols();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < rows; ++i) {
        const double* pr = p.ptr() + i * k;
        const double* vr = v.ptr() + i * k;
        double total = 0.0, pv = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            total += pr[c];
            pv += pr[c] * vr[c];
        }
        if (std::abs(total - 1.0) > 1e-6) {
            throw NumericalError("ce_hessian_logits_vp: probability row " + std::to_string(i) + " sums to " +
                                 std::to_string(total));
        }
        double* o = out.ptr() + i * k;
        for (std::size_t c = 0; c < k; ++c) {
            o[c] = pr[c] * (vr[c] - pv);
        }
    }
    return out;
}

LossReport mse_loss(const Tensor& outputs, const Tensor& targets) {
    if (outputs.shape() != targets.shape()) {
        throw ShapeError("mse_loss: shape mismatch " + shape_string(outputs.shape()) + " vs " +
                         shape_string(targets.shape()));
    }
    LossReport r;
    r.token_count = outputs.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < outputs.numel(); ++i) {
        const double d = outputs[i] - targets[i];
        s += d * d;
    }
    r.loss = s / static_cast<double>(r.token_count);
    return r;
}

Tensor mse_hessian_vp(const Tensor& v, std::size_t count) {
    return v * (2.0 / static_cast<double>(count));
}

LogitLoss LogitLoss::evaluate(LossKind kind, const Tensor& z, const Batch& batch) {
    LogitLoss l;
    l.kind_ = kind;
    if (kind == LossKind::cross_entropy) {
        LossReport r = cross_entropy(z, batch.labels);
        l.value_ = r.loss;
        l.count_ = r.token_count;
        l.labels_ = batch.labels;
        const double inv = 1.0 / static_cast<double>(l.count_);
        const std::size_t k = z.cols();
        l.grad_ = Tensor(z.shape());
        for (std::size_t i = 0; i < batch.labels.size(); ++i) {
            const std::int32_t y = batch.labels[i];
            if (y == kMaskedLabel) {
                continue;
            }
            for (std::size_t c = 0; c < k; ++c) {
                l.grad_[i * k + c] = r.probs[i * k + c] * inv;
            }
            l.grad_[i * k + static_cast<std::size_t>(y)] -= inv;
        }
        l.probs_ = std::move(r.probs);
        return l;
    }
    LossReport r = mse_loss(z, batch.targets);
    l.value_ = r.loss;
    l.count_ = r.token_count;
    l.grad_ = Tensor(z.shape());
    const double scale = 2.0 / static_cast<double>(l.count_);
    for (std::size_t i = 0; i < z.numel(); ++i) {
        l.grad_[i] = scale * (z[i] - batch.targets[i]);
    }
    return l;
}

Tensor LogitLoss::hessian_vp(const Tensor& v) const {
    if (v.numel() != grad_.numel()) {
        throw ShapeError("hessian_vp: vector " + shape_string(v.shape()) + " for output " +
                         shape_string(grad_.shape()));
    }
    if (kind_ == LossKind::mse) {
        return mse_hessian_vp(v, count_);
    }
    Tensor out = ce_hessian_logits_vp(probs_, v.reshaped(probs_.shape()));
    const std::size_t k = out.cols();
    const double inv = 1.0 / static_cast<double>(count_);
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        for (std::size_t c = 0; c < k; ++c) {
            out[i * k + c] = labels_[i] == kMaskedLabel ? 0.0 : out[i * k + c] * inv;
        }
    }
    out.reshape(v.shape());
    return out;
}

}  // namespace gnlab
