#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gnlab/config.hpp"

namespace gnlab {

/// One line of log.jsonl. Fields are written in this order.
struct RunRecord {
    std::size_t step = 0;
    std::uint64_t tokens_seen = 0;
    double train_loss = 0.0;
    std::optional<double> eval_loss;  // null on steps without evaluation
    double lr = 0.0;
    std::optional<double> alpha_star;
    std::int64_t wall_ms = 0;
    std::string extra_json = "{}";  // JSON object
};

std::string record_to_json(const RunRecord& record);
RunRecord record_from_json(std::string_view line);
std::vector<RunRecord> read_log(const std::string& path);

/// Smallest step whose eval loss is <= target.
std::optional<std::size_t> steps_to_target(std::span<const RunRecord> log, double target);
/// Same scan over a plain loss sequence; steps are 1-based.
std::optional<std::size_t> steps_to_target(std::span<const double> losses, double target);

struct WarmupPlan {
    std::uint64_t budget_tokens = 0;  // the fraction applies to this
    std::size_t steps = 0;
    std::uint64_t tokens = 0;         // steps * batch tokens, >= fraction * budget
    std::size_t batch_seqs = 0;
};

WarmupPlan warmup_plan(const ExperimentConfig& config);

/// Tokens one post-warmup step consumes by the batch plan.
std::uint64_t step_tokens(const ExperimentConfig& config);
/// Post-warmup steps implied by the stop rule (max_steps for target loss).
std::size_t planned_steps(const ExperimentConfig& config);

struct RunOptions {
    // Stop (with a checkpoint) once this step has been logged.
    std::optional<std::size_t> stop_after;
    bool resume = true;
    // Reported as steps_to_target in the summary; defaults to stop.target_loss.
    std::optional<double> report_target;
    std::function<void(const RunRecord&)> on_record;
};

struct RunSummary {
    std::string name;
    std::string method;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    std::uint64_t tokens_seen = 0;
    std::uint64_t warmup_tokens = 0;
    std::size_t warmup_steps = 0;
    double post_warmup_eval_loss = 0.0;
    std::optional<double> final_train_loss;
    std::optional<double> final_eval_loss;
    std::optional<double> best_eval_loss;
    std::optional<double> target_loss;
    std::optional<std::size_t> steps_to_target;
    bool completed = false;
    std::string failure;  // empty unless the run aborted
    std::string out_dir;
    std::string warmup_checkpoint;
};

std::string summary_to_json(const RunSummary& summary);
RunSummary summary_from_json(std::string_view text);

/// AdamW warmup from the seed-determined init (or a cached warmup
/// checkpoint), then the configured method. Writes config.json, log.jsonl,
/// checkpoint.bin and summary.json under config.out.
RunSummary warmup_then_train(const ExperimentConfig& config, const RunOptions& options = {});

/// Mean loss over the held-out slice: the first eval.batches *
/// eval.batch_seqs sequences of the stream, never used for training.
double held_out_loss(const ExperimentConfig& config, const ParamTree& params);

// ---- sweeps -----------------------------------------------------------

struct SweepGrid {
    std::vector<std::size_t> batch_seqs;
    std::optional<std::uint64_t> tokens;  // fixed-token protocol
    std::optional<double> target_loss;    // steps-to-target protocol
    std::size_t max_steps = 0;            // 0 keeps the base config's value
};

SweepGrid parse_grid(std::string_view json_text);
SweepGrid load_grid(const std::string& path);

struct SweepPoint {
    std::size_t batch_seqs = 0;
    std::size_t n_inner = 0;  // GN family only
    std::optional<std::size_t> steps_to_target;
    std::optional<double> final_loss;
    std::size_t steps = 0;
    std::uint64_t tokens_seen = 0;
    std::string record_path;
    bool failed = false;
    std::string reason;
};

struct SweepResult {
    std::vector<SweepPoint> points;
};

/// Config for one grid point; GN methods get n_inner = b / b_inner.
ExperimentConfig sweep_point_config(const ExperimentConfig& base, const SweepGrid& grid, std::size_t batch_seqs);

/// One run per grid point under <base.out>/b<size>. A token budget stops
/// every point at the same data; the target loss is reported from the same
/// log. Completed points are reused; failures are recorded and the sweep
/// moves on. Writes sweep.json.
SweepResult batch_size_sweep(const ExperimentConfig& base, const SweepGrid& grid);

std::string sweep_to_json(const SweepResult& result);
SweepResult sweep_from_json(std::string_view text);

struct CbsSample {
    double batch = 0.0;
    std::optional<double> steps;
};

struct CbsEstimate {
    double batch = 0.0;
    bool plateau_found = false;
    bool partial = false;  // unresolved grid points were skipped
    std::vector<CbsSample> curve;
};

/// Smallest b with steps(b') > (1 - rho)^log2(b' / b) * steps(b) for the next
/// resolved grid point b'. At grid ratio 2 the factor is 1 - rho. Without a
/// plateau the largest resolved point is returned.
CbsEstimate critical_batch_size(std::span<const CbsSample> samples, double rho = 0.25);

// ---- hyperparameter grids ---------------------------------------------

/// One axis of a hyperparameter grid. Each value is a JSON merge patch on
/// the base config; `labels` name the values in point labels.
struct GridAxis {
    std::string name;
    std::vector<std::string> labels;
    std::vector<std::string> patches;
};

/// Grid file:
///   {"name": ..., "base": {config},
///    "axes": [{"name": "lr", "path": "optimizer.lr", "values": [0.01, 0.03]},
///             {"name": "sched", "patches": [{"label": "cosine", "set": {...}}, ...]}],
///    "sweep": {batch grid, optional}}
/// Points are the cartesian product, last axis fastest.
struct HparamGrid {
    std::string name;
    std::string base_json;
    std::vector<GridAxis> axes;
    std::optional<SweepGrid> sweep;
};

struct GridPoint {
    std::size_t index = 0;
    std::string label;
    ExperimentConfig config;
};

HparamGrid parse_hparam_grid(std::string_view json_text);
HparamGrid load_hparam_grid(const std::string& path);
std::size_t grid_size(const HparamGrid& grid);
/// Config for one point: patches merged in axis order, out = <base.out>/<label>.
GridPoint grid_point(const HparamGrid& grid, std::size_t index);

// ---- CSV export -----------------------------------------------------------

/// log.csv: step,tokens_seen,train_loss,eval_loss,lr,alpha_star,wall_ms
void write_log_csv(std::span<const RunRecord> log, const std::string& path);
/// schedule.csv: outer,inner,position,lr_multiplier
void write_schedule_csv(const ExperimentConfig& config, const std::string& path);
/// sweep.csv: batch_seqs,n_inner,tokens_seen,steps,steps_to_target,final_loss,failed,reason,record_path
void write_sweep_csv(const SweepResult& result, const std::string& path);
/// cbs.csv: batch_seqs,steps_to_target,estimate,plateau_found,partial
void write_cbs_csv(const CbsEstimate& estimate, const std::string& path);

/// Exports whatever the directory holds: a run (log.jsonl) and/or a sweep
/// (sweep.json). Returns the files written.
std::vector<std::string> export_csv(const std::string& dir, double rho = 0.25);

}  // namespace gnlab
