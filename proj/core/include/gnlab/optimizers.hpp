#pragma once

#include <cstdint>
#include <string_view>

#include "gnlab/param_tree.hpp"
#include "gnlab/tensor.hpp"

namespace gnlab {

struct AdamWParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamSlot {
    Tensor m;
    Tensor v;
    std::uint64_t t = 0;
};

/// Bias-corrected AdamW with decoupled weight decay:
/// w -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * w)
void adamw_step(Tensor& w, const Tensor& g, AdamSlot& slot, const AdamWParams& p, std::string_view name = {});

/// Quintic Newton-Schulz orthogonalization after Frobenius normalization.
/// An all-zero input returns zeros and sets *zero_input when given.
Tensor newton_schulz(const Tensor& m, int iters = 5, bool* zero_input = nullptr);

inline constexpr double kNsA = 3.4445;
inline constexpr double kNsB = -4.7750;
inline constexpr double kNsC = 2.0315;

struct MuonParams {
    double lr = 0.02;
    double momentum = 0.95;
    int ns_iters = 5;
};

struct MomentumSlot {
    Tensor m;
    std::uint64_t t = 0;
};

/// m = momentum * m + g;  w -= lr * NS(m)
void muon_step(Tensor& w, const Tensor& g, MomentumSlot& slot, const MuonParams& p);

/// Heavy-ball SGD: m = momentum * m + g;  w -= lr * (m + weight_decay * w)
void sgd_step(Tensor& w, const Tensor& g, MomentumSlot& slot, double lr, double momentum, double weight_decay = 0.0);

struct ShampooParams {
    double lr = 1e-3;
    // Added to both accumulators before the inverse roots, scaled by
    // trace / dimension of each accumulator.
    double damping = 1e-12;
    double weight_decay = 0.0;
};

struct ShampooSlot {
    Tensor l;
    Tensor r;
    std::uint64_t t = 0;
};

/// L += G G^T;  R += G^T G;  W -= lr * L^{-1/4} G R^{-1/4}.
/// Rank-1 parameters are treated as [1 x n].
void shampoo_step(Tensor& w, const Tensor& g, ShampooSlot& slot, const ShampooParams& p);

struct SoapParams {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int precond_freq = 1;
    // Sides larger than this keep an identity basis.
    std::size_t max_precond_dim = 512;
    // Rotate the moments into the new basis when it is refreshed.
    bool reproject_moments = false;
};

struct SoapSlot {
    Tensor l;
    Tensor r;
    Tensor ql;
    Tensor qr;
    Tensor m;  // rotated frame
    Tensor v;  // rotated frame
    std::uint64_t t = 0;
};

/// AdamW in the eigenbasis of the Shampoo accumulators.
void soap_step(Tensor& w, const Tensor& g, SoapSlot& slot, const SoapParams& p);

/// Exponential weight average: average = tau * average + (1 - tau) * params.
struct EwaState {
    ParamTree average;
    double tau = 0.0;
    bool initialized = false;

    void update(const ParamTree& params);
};

}  // namespace gnlab
