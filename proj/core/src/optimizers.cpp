#include "gnlab/optimizers.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "gnlab/linalg.hpp"

namespace gnlab {

namespace {

void require_grad_shape(const Tensor& w, const Tensor& g, const char* op) {
    if (!w.same_shape(g)) {
        throw ShapeError(std::string(op) + ": gradient " + shape_string(g.shape()) + " for parameter " +
                         shape_string(w.shape()));
    }
}

void require_finite_update(const Tensor& w, std::string_view name, const char* op) {
    if (!all_finite(w)) {
        throw NumericalError(std::string(op) + ": non-finite update for parameter '" + std::string(name) + "'");
    }
}

// View any tensor as a matrix: rank 1 becomes [1 x n], rank 0 [1 x 1].
Tensor as_matrix(const Tensor& t) {
    if (t.rank() == 2) {
        return t;
    }
    return t.reshaped({t.rows(), t.cols()});
}

Tensor damped_inverse_root(const Tensor& acc, double damping) {
    const double eps = damping * trace(acc) / static_cast<double>(acc.dim(0));
    return sym_matrix_power(acc, -0.25, eps);
}

// Reorders and re-signs the columns of `next` to follow `prev`: greedy
// matching on |overlap|, largest first. Keeps the rotated moments attached
// to the same directions when eigenvalues change order.
Tensor align_basis(const Tensor& prev, const Tensor& next) {
    const std::size_t n = next.dim(1);
    const Tensor overlap = matmul(prev, next, true, false);
    std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
    pairs.reserve(n * n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < n; ++k) {
            pairs.emplace_back(std::abs(overlap(j, k)), j, k);
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
    std::vector<bool> used_old(n, false), used_new(n, false);
    Tensor out(Shape{next.dim(0), n});
    for (const auto& [mag, j, k] : pairs) {
        if (used_old[j] || used_new[k]) {
            continue;
        }
        used_old[j] = used_new[k] = true;
        const double sign = overlap(j, k) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < next.dim(0); ++i) {
            out(i, j) = sign * next(i, k);
        }
    }
    return out;
}

}  // namespace

void adamw_step(Tensor& w, const Tensor& g, AdamSlot& s, const AdamWParams& p, std::string_view name) {
    require_grad_shape(w, g, "adamw_step");
    if (s.m.empty()) {
        s.m = Tensor::zeros_like(w);
        s.v = Tensor::zeros_like(w);
    }
    ++s.t;
    const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(s.t));
    for (std::size_t i = 0; i < w.numel(); ++i) {
        s.m[i] = p.beta1 * s.m[i] + (1.0 - p.beta1) * g[i];
        s.v[i] = p.beta2 * s.v[i] + (1.0 - p.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        w[i] -= p.lr * (mhat / (std::sqrt(vhat) + p.eps) + p.weight_decay * w[i]);
    }
    require_finite_update(w, name, "adamw_step");
}

Tensor newton_schulz(const Tensor& m, int iters, bool* zero_input) {
    if (m.rank() != 2) {
        throw ShapeError("newton_schulz expects a matrix, got " + shape_string(m.shape()));
    }
    const double norm = frobenius_norm(m);
    if (zero_input) {
        *zero_input = norm == 0.0;
    }
    if (norm == 0.0) {
        return Tensor::zeros_like(m);
    }
    const bool tall = m.dim(0) > m.dim(1);
    Tensor x = tall ? transpose(m) : m;
    x *= 1.0 / norm;
    for (int i = 0; i < iters; ++i) {
        const Tensor a = matmul(x, x, false, true);
        Tensor b = a * kNsB;
        matmul_accumulate(b, a, a * kNsC);
        Tensor next = x * kNsA;
        matmul_accumulate(next, b, x);
        x = std::move(next);
    }
    return tall ? transpose(x) : x;
}

void muon_step(Tensor& w, const Tensor& g, MomentumSlot& s, const MuonParams& p) {
    require_grad_shape(w, g, "muon_step");
    if (w.rank() != 2) {
        throw ShapeError("muon_step expects a matrix parameter, got " + shape_string(w.shape()));
    }
    if (s.m.empty()) {
        s.m = Tensor::zeros_like(w);
    }
    ++s.t;
    s.m *= p.momentum;
    s.m += g;
    w.axpy(-p.lr, newton_schulz(s.m, p.ns_iters));
    require_finite_update(w, {}, "muon_step");
}

void sgd_step(Tensor& w, const Tensor& g, MomentumSlot& s, double lr, double momentum, double weight_decay) {
    require_grad_shape(w, g, "sgd_step");
    if (s.m.empty()) {
        s.m = Tensor::zeros_like(w);
    }
    ++s.t;
    for (std::size_t i = 0; i < w.numel(); ++i) {
        s.m[i] = momentum * s.m[i] + g[i];
        w[i] -= lr * (s.m[i] + weight_decay * w[i]);
    }
    require_finite_update(w, {}, "sgd_step");
}

void shampoo_step(Tensor& w, const Tensor& g, ShampooSlot& s, const ShampooParams& p) {
    require_grad_shape(w, g, "shampoo_step");
    const Tensor gm = as_matrix(g);
    if (s.l.empty()) {
        s.l = Tensor(Shape{gm.dim(0), gm.dim(0)});
        s.r = Tensor(Shape{gm.dim(1), gm.dim(1)});
    }
    ++s.t;
    if (is_all_zero(gm)) {
        if (p.weight_decay != 0.0) {
            w *= 1.0 - p.lr * p.weight_decay;
        }
        return;
    }
    matmul_accumulate(s.l, gm, gm, false, true);
    matmul_accumulate(s.r, gm, gm, true, false);
    if (relative_asymmetry(s.l) > 1e-8 || relative_asymmetry(s.r) > 1e-8) {
        throw NumericalError("shampoo_step: accumulator lost symmetry");
    }
    const Tensor update = matmul(matmul(damped_inverse_root(s.l, p.damping), gm), damped_inverse_root(s.r, p.damping));
    if (p.weight_decay != 0.0) {
        w *= 1.0 - p.lr * p.weight_decay;
    }
    w.axpy(-p.lr, update.reshaped(w.shape()));
    require_finite_update(w, {}, "shampoo_step");
}

void soap_step(Tensor& w, const Tensor& g, SoapSlot& s, const SoapParams& p) {
    require_grad_shape(w, g, "soap_step");
    const Tensor gm = as_matrix(g);
    const std::size_t rows = gm.dim(0), cols = gm.dim(1);
    const bool left = rows <= p.max_precond_dim;
    const bool right = cols <= p.max_precond_dim;
    if (s.m.empty()) {
        s.l = left ? Tensor(Shape{rows, rows}) : Tensor{};
        s.r = right ? Tensor(Shape{cols, cols}) : Tensor{};
        s.ql = Tensor::identity(rows);
        s.qr = Tensor::identity(cols);
        s.m = Tensor(Shape{rows, cols});
        s.v = Tensor(Shape{rows, cols});
    }
    ++s.t;
    if (left) {
        matmul_accumulate(s.l, gm, gm, false, true);
    }
    if (right) {
        matmul_accumulate(s.r, gm, gm, true, false);
    }
    const int freq = std::max(1, p.precond_freq);
    if ((s.t - 1) % static_cast<std::uint64_t>(freq) == 0) {
        Tensor ql = left ? align_basis(s.ql, sym_eig(s.l).eigenvectors) : s.ql;
        Tensor qr = right ? align_basis(s.qr, sym_eig(s.r).eigenvectors) : s.qr;
        if (p.reproject_moments && s.t > 1) {
            // old rotated frame -> parameter frame -> new rotated frame
            const Tensor to_l = matmul(ql, s.ql, true, false);
            const Tensor to_r = matmul(s.qr, qr, true, false);
            s.m = matmul(matmul(to_l, s.m), to_r);
        }
        s.ql = std::move(ql);
        s.qr = std::move(qr);
    }
    const Tensor gr = matmul(matmul(s.ql, gm, true, false), s.qr);
    const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(s.t));
    Tensor step(Shape{rows, cols});
    for (std::size_t i = 0; i < gr.numel(); ++i) {
        s.m[i] = p.beta1 * s.m[i] + (1.0 - p.beta1) * gr[i];
        s.v[i] = p.beta2 * s.v[i] + (1.0 - p.beta2) * gr[i] * gr[i];
        step[i] = (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + p.eps);
    }
    const Tensor update = matmul(matmul(s.ql, step), s.qr, false, true);
    for (std::size_t i = 0; i < w.numel(); ++i) {
        w[i] -= p.lr * (update[i] + p.weight_decay * w[i]);
    }
    require_finite_update(w, {}, "soap_step");
}

void EwaState::update(const ParamTree& params) {
    if (!initialized) {
        average = params;
        initialized = true;
        return;
    }
    average.require_congruent(params, "ewa_update");
    average *= tau;
    average.axpy(1.0 - tau, params);
}

}  // namespace gnlab
