#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "gnlab/data.hpp"
#include "gnlab/gauss_newton.hpp"
#include "gnlab/models.hpp"
#include "gnlab/schedule.hpp"
#include "gnlab/tree_optimizer.hpp"

namespace gnlab {

enum class Method : std::uint8_t { adamw, muon, shampoo, soap, gn, gn_prox, gn_layerwise };

const char* method_name(Method m);
Method parse_method(std::string_view name);
bool is_gn_family(Method m) noexcept;

struct WarmupConfig {
    double fraction = 0.05;
    // Token budget the fraction applies to; 0 means 20 tokens per parameter.
    std::uint64_t budget_tokens = 0;
    double lr = 1e-3;
    double beta2 = 0.95;
    std::size_t batch_seqs = 8;
    // Linear lr ramp over this share of the warmup steps.
    double ramp_fraction = 0.1;
    // Directory for shared warmup checkpoints; empty means "<out>/../warmup".
    std::string cache_dir;
};

struct StopConfig {
    std::optional<std::size_t> steps;
    std::optional<std::uint64_t> tokens;  // total, warmup included
    std::optional<double> target_loss;
    std::size_t max_steps = 1000;         // guard for target_loss
};

struct EvalConfig {
    std::size_t batches = 64;
    std::size_t batch_seqs = 1;
    std::size_t every = 1;  // baselines; GN methods evaluate every outer step
};

struct ExperimentConfig {
    std::string name = "run";
    std::uint64_t seed = 0;
    std::string out = "runs/run";
    ModelConfig model;
    std::string model_preset = "tiny";
    DataSpec data;
    Method method = Method::adamw;
    OptimizerConfig optimizer;
    std::size_t batch_seqs = 8;  // baselines
    gn::GnConfig gn;             // GN family: gn.inner.b_inner, gn.inner.n_steps
    ScheduleSpec schedule;
    // Outer steps the schedule spans; 0 derives it from the stop rule.
    std::size_t schedule_steps = 0;
    double ewa_tau = 0.0;        // 0 disables weight averaging
    bool ewa_with_line_search = false;
    WarmupConfig warmup;
    StopConfig stop;
    EvalConfig eval;
    std::size_t micro_chunk_seqs = 32;
    std::size_t checkpoint_every = 0;  // 0: only at the end

    /// Sequences per optimizer step (b, or N * b_inner).
    std::size_t global_batch_seqs() const;
    void validate() const;
};

/// Parses the JSON config format; unknown keys raise ConfigError.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::string& path);
/// Canonical JSON rendering (stable key order).
std::string config_to_json(const ExperimentConfig& config);

/// Applies a JSON object of overrides (same schema, partial) on top of a
/// config.
ExperimentConfig apply_overrides(const ExperimentConfig& base, std::string_view json_overrides);

}  // namespace gnlab
