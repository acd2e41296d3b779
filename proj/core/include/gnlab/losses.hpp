#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "gnlab/batch.hpp"
#include "gnlab/tensor.hpp"

namespace gnlab {

enum class LossKind : std::uint8_t { cross_entropy, mse };

const char* loss_name(LossKind kind);

struct LossReport {
    double loss = 0.0;
    Tensor probs;  // softmax rows (cross-entropy only)
    std::size_t token_count = 0;
};

/// Mean negative log-likelihood over rows whose label is not kMaskedLabel.
/// logits: [rows x K] (any leading shape); labels: one per row.
LossReport cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);

/// diag(p) v - p (p^T v), row by row for [rows x K] inputs. Every row of p
/// must sum to 1 within 1e-6.
Tensor ce_hessian_logits_vp(const Tensor& p, const Tensor& v);

/// Mean of squared differences over all elements.
LossReport mse_loss(const Tensor& outputs, const Tensor& targets);
/// (2 / count) v
Tensor mse_hessian_vp(const Tensor& v, std::size_t count);

/// A loss evaluated at output z for one batch: value, dl/dz, and the
/// logit-space Hessian applied to vectors. The Hessian includes the 1/count
/// normalization and is zero on masked rows.
class LogitLoss {
public:
    static LogitLoss evaluate(LossKind kind, const Tensor& z, const Batch& batch);

    double value() const noexcept { return value_; }
    const Tensor& grad() const noexcept { return grad_; }
    std::size_t count() const noexcept { return count_; }
    const Tensor& probs() const noexcept { return probs_; }
    Tensor hessian_vp(const Tensor& v) const;

private:
    LossKind kind_ = LossKind::cross_entropy;
    double value_ = 0.0;
    Tensor grad_;
    Tensor probs_;
    std::vector<std::int32_t> labels_;
    std::size_t count_ = 0;
};

}  // namespace gnlab
