#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gnlab/optimizers.hpp"
#include "gnlab/param_tree.hpp"

namespace gnlab {

enum class OptimizerKind : std::uint8_t { sgd, adamw, muon, shampoo, soap };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    // sgd / muon
    double momentum = 0.95;
    int ns_iters = 5;
    // Muon sends non-matrix roles (embeddings, head, vectors) through AdamW
    // at lr * fallback_lr_ratio.
    double fallback_lr_ratio = 0.1;
    // shampoo / soap
    double damping = 1e-12;
    int precond_freq = 1;
    std::size_t max_precond_dim = 512;
    bool reproject_moments = false;
};

/// Applies one optimizer kind across a ParamTree, keeping per-entry state.
class TreeOptimizer {
public:
    TreeOptimizer(OptimizerConfig config, const ParamTree& layout);

    /// params -= update(grads). `lr_mult` scales every learning rate; entries
    /// whose `active` flag is false are left untouched (state included).
    void step(ParamTree& params, const ParamTree& grads, double lr_mult = 1.0,
              const std::vector<bool>* active = nullptr);

    void reset();
    std::uint64_t steps() const noexcept { return steps_; }
    const OptimizerConfig& config() const noexcept { return config_; }

    NamedTensors state() const;
    void load_state(const NamedTensors& state);

private:
    struct Slot {
        AdamSlot adam;
        MomentumSlot momentum;
        ShampooSlot shampoo;
        SoapSlot soap;
    };

    bool uses_muon(const ParamEntry& e) const noexcept;

    OptimizerConfig config_;
    std::vector<std::string> names_;
    std::vector<Slot> slots_;
    std::uint64_t steps_ = 0;
};

}  // namespace gnlab
