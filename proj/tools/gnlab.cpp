#include <cstdio>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gnlab/harness.hpp"
#include "gnlab/oracle.hpp"

namespace {

using namespace gnlab;

int cmd_train(const std::string& config_path, const std::optional<std::uint64_t>& seed, const std::string& out,
              const std::optional<double>& target, const std::optional<std::size_t>& steps,
              const std::vector<std::string>& overrides, const std::optional<std::size_t>& stop_after, bool fresh,
              bool quiet) {
    ExperimentConfig c = load_config(config_path);
    for (const auto& o : overrides) {
        c = apply_overrides(c, o);
    }
    if (seed) {
        c.seed = *seed;
    }
    if (!out.empty()) {
        c.out = out;
    }
    if (target || steps) {
        const std::size_t max_steps = c.stop.max_steps;
        c.stop = StopConfig{};
        c.stop.max_steps = max_steps;
        if (target) {
            c.stop.target_loss = target;
        } else {
            c.stop.steps = steps;
        }
    }
    RunOptions opts;
    opts.stop_after = stop_after;
    opts.resume = !fresh;
    if (!quiet) {
        opts.on_record = [](const RunRecord& r) {
            std::fprintf(stderr, "step %zu  tokens %llu  train %.5f  eval %s  lr %.3g%s\n", r.step,
                         static_cast<unsigned long long>(r.tokens_seen), r.train_loss,
                         r.eval_loss ? std::to_string(*r.eval_loss).c_str() : "-", r.lr,
                         r.alpha_star ? ("  alpha " + std::to_string(*r.alpha_star)).c_str() : "");
        };
    }
    const RunSummary m = warmup_then_train(c, opts);
    std::cout << summary_to_json(m) << '\n';
    return m.failure.empty() ? 0 : 2;
}

int cmd_sweep(const std::string& config_path, const std::string& grid_path, double rho) {
    const ExperimentConfig c = load_config(config_path);
    const SweepGrid grid = load_grid(grid_path);
    const SweepResult r = batch_size_sweep(c, grid);
    std::cout << sweep_to_json(r) << '\n';
    std::vector<CbsSample> samples;
    for (const auto& p : r.points) {
        samples.push_back({static_cast<double>(p.batch_seqs),
                           p.steps_to_target ? std::optional<double>(static_cast<double>(*p.steps_to_target))
                                             : std::nullopt});
    }
    try {
        const CbsEstimate e = critical_batch_size(samples, rho);
        std::cout << "critical batch size: " << e.batch << " sequences"
                  << (e.plateau_found ? "" : " (no plateau observed)") << (e.partial ? " (partial)" : "") << '\n';
    } catch (const ConfigError& e) {
        std::cout << "critical batch size: unavailable (" << e.what() << ")\n";
    }
    int failed = 0;
    for (const auto& p : r.points) {
        failed += p.failed ? 1 : 0;
    }
    return failed ? 2 : 0;
}

int cmd_grid(const std::string& grid_path, const std::vector<std::size_t>& indices, bool list, bool run,
             const std::string& out_root) {
    HparamGrid grid = load_hparam_grid(grid_path);
    if (!out_root.empty()) {
        auto base = nlohmann::ordered_json::parse(grid.base_json);
        base["out"] = out_root;
        grid.base_json = base.dump();
    }
    std::vector<std::size_t> chosen = indices;
    if (chosen.empty()) {
        for (std::size_t i = 0; i < grid_size(grid); ++i) {
            chosen.push_back(i);
        }
    }
    if (list) {
        std::cout << grid_size(grid) << " points\n";
    }
    int failed = 0;
    for (std::size_t i : chosen) {
        const GridPoint p = grid_point(grid, i);
        if (list) {
            std::cout << p.index << '\t' << p.label << '\n';
            continue;
        }
        if (!run) {
            std::cout << config_to_json(p.config) << '\n';
            continue;
        }
        if (grid.sweep) {
            const SweepResult r = batch_size_sweep(p.config, *grid.sweep);
            for (const auto& sp : r.points) {
                failed += sp.failed ? 1 : 0;
            }
        } else {
            const RunSummary s = warmup_then_train(p.config);
            failed += s.failure.empty() ? 0 : 1;
            std::cout << summary_to_json(s) << '\n';
        }
    }
    return failed ? 2 : 0;
}

int cmd_verify(std::uint64_t seed) {
    const auto records = oracle::run_oracle_suite(seed);
    bool ok = true;
    for (const auto& r : records) {
        nlohmann::ordered_json j;
        j["check"] = r.name;
        j["passed"] = r.passed;
        j["value"] = r.value;
        j["threshold"] = r.threshold;
        j["detail"] = r.detail;
        std::cout << j.dump() << '\n';
        ok = ok && r.passed;
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gauss-Newton preconditioning lab"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "warmup then train one configuration");
    std::string config_path, out;
    std::optional<std::uint64_t> seed;
    std::optional<double> target;
    std::optional<std::size_t> steps, stop_after;
    std::vector<std::string> overrides;
    bool fresh = false, quiet = false;
    train->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    train->add_option("--seed", seed, "initialization seed");
    train->add_option("--out", out, "output directory");
    auto* target_opt = train->add_option("--target-loss", target, "stop once the eval loss reaches this value");
    train->add_option("--steps", steps, "stop after this many post-warmup steps")->excludes(target_opt);
    train->add_option("--set", overrides, "JSON object merged into the config");
    train->add_option("--stop-after", stop_after, "checkpoint and exit after this step");
    train->add_flag("--fresh", fresh, "ignore an existing checkpoint in the output directory");
    train->add_flag("--quiet", quiet, "no per-step progress on stderr");

    auto* sweep = app.add_subcommand("sweep", "batch-size sweep over a grid");
    std::string grid_path;
    double rho = 0.25;
    sweep->add_option("--config", config_path, "base experiment config")->required()->check(CLI::ExistingFile);
    sweep->add_option("--grid", grid_path, "grid file (JSON)")->required()->check(CLI::ExistingFile);
    sweep->add_option("--rho", rho, "plateau threshold for the critical batch size");

    auto* grid = app.add_subcommand("grid", "expand or run a hyperparameter grid");
    std::vector<std::size_t> indices;
    bool list = false, run = false;
    std::string out_root;
    grid->add_option("--grid", grid_path, "hyperparameter grid file (JSON)")->required()->check(CLI::ExistingFile);
    grid->add_option("--index", indices, "points to use (default: all)");
    grid->add_option("--out", out_root, "output root, replacing the base config's out");
    grid->add_flag("--list", list, "print point labels only");
    grid->add_flag("--run", run, "train the points (batch sweeps when the grid has one)");

    auto* verify = app.add_subcommand("verify", "run the oracle suite");
    std::uint64_t verify_seed = 0;
    verify->add_option("--seed", verify_seed, "instance seed");

    auto* exp = app.add_subcommand("export-csv", "write CSV files for a run or sweep directory");
    std::string run_dir;
    exp->add_option("--run", run_dir, "run or sweep directory")->required()->check(CLI::ExistingDirectory);
    exp->add_option("--rho", rho, "plateau threshold for cbs.csv");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            return cmd_train(config_path, seed, out, target, steps, overrides, stop_after, fresh, quiet);
        }
        if (sweep->parsed()) {
            return cmd_sweep(config_path, grid_path, rho);
        }
        if (grid->parsed()) {
            return cmd_grid(grid_path, indices, list, run, out_root);
        }
        if (verify->parsed()) {
            return cmd_verify(verify_seed);
        }
        for (const auto& f : export_csv(run_dir, rho)) {
            std::cout << f << '\n';
        }
        return 0;
    } catch (const gnlab::Error& e) {
        std::cerr << "gnlab: " << e.what() << '\n';
        return 1;
    }
}
