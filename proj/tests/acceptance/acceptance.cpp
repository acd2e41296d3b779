// Acceptance gate: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../unit/helpers.hpp"
#include "gnlab/checkpoint.hpp"
#include "gnlab/config.hpp"
#include "gnlab/gauss_newton.hpp"
#include "gnlab/harness.hpp"
#include "gnlab/line_search.hpp"
#include "gnlab/linalg.hpp"
#include "gnlab/losses.hpp"
#include "gnlab/models.hpp"
#include "gnlab/optimizers.hpp"
#include "gnlab/oracle.hpp"
#include "gnlab/tape.hpp"

using namespace gnlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    std::function<Outcome()> run;
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

std::string work_dir = "acceptance-runs";
std::string presets_dir = GNLAB_PRESETS_DIR;

struct Case {
    Model model;
    Batch batch;
};

Case mlp_case(std::uint64_t seed) {
    return {build_model(ModelConfig::mlp({4, 6, 3}), seed), testutil::dense_batch(5, 4, 3, seed)};
}

Case transformer_case(std::uint64_t seed) {
    const ModelConfig c = testutil::micro_transformer();
    return {build_model(c, seed), testutil::token_batch(2, c.context_length, c.vocab_size, seed)};
}

// ---- exact properties -------------------------------------------------------

Outcome gradient_fd() {
    double worst = 0.0;
    std::size_t max_params = 0;
    for (auto make : {mlp_case, transformer_case}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const Case c = make(seed);
            max_params = std::max(max_params, c.model.params.num_params());
            const ad::Tape tape = ad::forward(*c.model.graph, c.model.params, c.batch);
            const ParamTree g = tape.vjp(LogitLoss::evaluate(c.model.config.loss, tape.output_value(), c.batch).grad());
            const auto loss = [&](const ParamTree& p) { return model_loss(c.model, p, c.batch); };
            worst = std::max(worst, oracle::max_relative_error(g, oracle::finite_diff_grad(loss, c.model.params, 1e-5)));
        }
    }
    return {worst <= 1e-5 && max_params <= 5000,
            "max rel err " + fmt(worst) + " over 40 models, <= " + std::to_string(max_params) + " params"};
}

Outcome adjoint_identity() {
    double worst = 0.0;
    for (std::uint64_t k = 0; k < 50; ++k) {
        const Case c = k % 2 == 0 ? mlp_case(k) : transformer_case(k);
        const ad::Tape tape = ad::forward(*c.model.graph, c.model.params, c.batch);
        const ParamTree d = testutil::random_like(c.model.params, 5000 + k);
        const Tensor u = testutil::random_tensor(tape.output_value().shape(), 7000 + k);
        const double lhs = dot(tape.jvp(d), u);
        const double rhs = dot(d, tape.vjp(u));
        worst = std::max(worst, std::abs(lhs - rhs) / std::max(std::abs(lhs), std::abs(rhs)));
    }
    return {worst <= 1e-10, "max rel gap " + fmt(worst) + " over 50 pairs"};
}

Outcome gn_solve_equivalence() {
    bool ok = true;
    std::string detail;
    for (const char* kind : {"linear_mse", "linear_ce", "mlp_ce", "transformer_ce"}) {
        const auto inst = oracle::make_instance(kind, 0);
        const auto r = oracle::verify_gn_solve_equivalence(*inst.graph, inst.loss, inst.params, inst.batch);
        const bool small = inst.params.num_params() <= 300;
        ok = ok && r.passed && small;
        detail += std::string(detail.empty() ? "" : "; ") + kind + " cos " + fmt(r.cosine) + " gap " +
                  fmt(r.objective_gap) + " (" + std::to_string(inst.params.num_params()) + " params)";
    }
    return {ok, detail};
}

Outcome gn_psd() {
    double worst = 1.0;
    for (const char* kind : {"mlp_ce", "mlp_mse"}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto inst = oracle::make_instance(kind, 100 + seed);
            const auto eg = oracle::explicit_gn(*inst.graph, inst.loss, inst.params, inst.batch, 0.0);
            worst = std::min(worst, oracle::psd_margin(eg.G));
        }
    }
    return {worst >= -1e-8, "min psd margin " + fmt(worst) + " over 20 CE and 20 MSE models"};
}

Outcome ce_hessian() {
    double worst = 0.0, ones = 0.0;
    for (std::size_t k : {2u, 5u, 17u, 64u, 256u}) {
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            const Tensor logits = testutil::random_tensor({1, k}, 31 * seed + k, 3.0);
            const Tensor p = cross_entropy(logits, std::vector<std::int32_t>{0}).probs;
            Tensor h({k, k});
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j) h(i, j) = (i == j ? p[i] : 0.0) - p[i] * p[j];
            const Tensor v = testutil::random_tensor({1, k}, 900 + seed);
            worst = std::max(worst, max_abs_diff(ce_hessian_logits_vp(p, v), matmul(v, h)));
            ones = std::max(ones, max_abs(ce_hessian_logits_vp(p, Tensor({1, k}, 1.0))));
        }
    }
    return {worst <= 1e-12 && ones <= 1e-12, "operator gap " + fmt(worst) + ", |H 1| " + fmt(ones)};
}

gn::GnConfig exact_sgd_config(double lr, std::size_t steps) {
    gn::GnConfig c;
    c.inner.optimizer = OptimizerConfig{.kind = OptimizerKind::sgd, .lr = lr, .momentum = 0.0};
    c.inner.n_steps = steps;
    c.inner.b_inner = 1;
    c.inner.warm_start = false;
    c.inner.divergence_factor = 1e300;
    return c;
}

double gd_lr(const ad::Graph& g, LossKind loss, const ParamTree& p, const Batch& b) {
    const SymEig e = sym_eig(oracle::explicit_gn(g, loss, p, b, 0.0).G);
    return 1.0 / e.eigenvalues[e.eigenvalues.numel() - 1];
}

Outcome one_step_exact() {
    double worst = 0.0;
    bool alpha_one = true;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const Model m = build_model(ModelConfig::mlp({4, 2}, false, LossKind::mse), seed);
        const Batch b = testutil::regression_batch(12, 4, 2, 40 + seed);
        gn::GnConfig c = exact_sgd_config(gd_lr(*m.graph, LossKind::mse, m.params, b), 20000);
        gn::GnState s(m.params);
        gn::FixedBatches batches({b});
        const auto rep = gn::gn_outer_step(c, *m.graph, LossKind::mse, s, batches);
        alpha_one = alpha_one && rep.alpha_star == 1.0;
        const Tensor& x = b.features;
        const Tensor w =
            matmul(sym_matrix_power(matmul(x, x, true, false), -1.0), matmul(x, b.targets, true, false));
        worst = std::max(worst, max_abs_diff(s.theta[0].value, w));
    }
    return {worst <= 1e-8 && alpha_one,
            "max |theta - w_ls| " + fmt(worst) + (alpha_one ? ", alpha* = 1" : ", alpha* != 1")};
}

Tensor random_orthogonal(std::size_t n, std::uint64_t seed) {
    const Tensor a = testutil::random_tensor({n, n}, seed);
    return sym_eig(a + transpose(a)).eigenvectors;
}

std::vector<double> singular_values(const Tensor& m) {
    const SymEig e = sym_eig(matmul(m, m, true, false));
    std::vector<double> out;
    for (std::size_t i = 0; i < e.eigenvalues.numel(); ++i) out.push_back(std::sqrt(std::max(0.0, e.eigenvalues[i])));
    return out;
}

Outcome newton_schulz_criterion() {
    double lo = 1e300, hi = 0.0, fixed = 0.0;
    std::size_t accepted = 0, out_of_band = 0;
    for (std::uint64_t seed = 0; accepted < 50; ++seed) {
        // Gaussian 8x8, kept when cond <= 100
        const Tensor a = testutil::random_tensor({8, 8}, 300 + seed);
        const auto sa = singular_values(a);
        if (sa.front() <= 0.0 || sa.back() / sa.front() > 100.0) continue;
        ++accepted;
        bool bad = false;
        for (double sv : singular_values(newton_schulz(a, 5))) {
            lo = std::min(lo, sv);
            hi = std::max(hi, sv);
            bad = bad || sv < 0.7 || sv > 1.3;
        }
        out_of_band += bad ? 1 : 0;
        if (accepted <= 20) {
            const Tensor q = random_orthogonal(8, 500 + seed);
            fixed = std::max(fixed, max_abs_diff(newton_schulz(q, 5), q));
        }
    }
    return {out_of_band == 0 && fixed <= 1e-3,
            std::to_string(out_of_band) + "/50 matrices (cond <= 100) leave [0.7, 1.3], singular values in [" +
                fmt(lo) + ", " + fmt(hi) + "]; orthogonal drift " + fmt(fixed)};
}

Outcome soap_adamw() {
    double worst = 0.0;
    const std::vector<std::pair<std::size_t, std::size_t>> shapes{{2, 2}, {3, 3}, {5, 5}, {4, 3}};
    for (std::size_t si = 0; si < shapes.size(); ++si) {
        const auto [r, c] = shapes[si];
        SoapParams sp;
        sp.lr = 0.01;
        sp.beta1 = 0.9;
        sp.beta2 = 0.95;
        sp.weight_decay = 0.1;
        const AdamWParams ap{sp.lr, sp.beta1, sp.beta2, sp.eps, sp.weight_decay};
        Tensor ws({r, c}), wa;
        for (std::size_t i = 0; i < std::min(r, c); ++i) ws(i, i) = 0.5 - 0.3 * static_cast<double>(i);
        wa = ws;
        SoapSlot ss;
        AdamSlot as;
        for (int k = 0; k < 10; ++k) {
            const Tensor noise = testutil::random_tensor({r, c}, 1000 * si + k);
            Tensor g({r, c});
            for (std::size_t i = 0; i < std::min(r, c); ++i) g(i, i) = 1.0 + static_cast<double>(i) + 0.3 * noise(i, i);
            soap_step(ws, g, ss, sp);
            adamw_step(wa, g, as, ap);
            worst = std::max(worst, max_abs_diff(ws, wa));
        }
    }
    return {worst <= 1e-10, "max |w_soap - w_adamw| " + fmt(worst) + " over 4 shapes x 10 steps"};
}

// Two linear maps on disjoint input columns: G is block diagonal.
class TwoTower final : public ad::Graph {
public:
    ad::Var build(ad::Tape& t, const Batch& b) const override {
        const auto x = t.constant(b.features);
        const auto left = t.matmul(t.slice_cols(x, 0, 2), t.param(0));
        const auto right = t.matmul(t.slice_cols(x, 2, 4), t.param(1));
        return t.concat_cols(left, right);
    }
};

Outcome layerwise_full() {
    double single = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ModelConfig mc = ModelConfig::mlp({4, 5, 3});
        mc.single_layer_group = true;
        const Model m = build_model(mc, 16 + seed);
        const Batch b = testutil::dense_batch(8, 4, 3, 16 + seed);
        gn::GnConfig full;
        full.inner.n_steps = 5;
        full.inner.optimizer.lr = 0.05;
        full.max_exponent = 9;
        gn::GnConfig lw = full;
        lw.variant = gn::GnVariant::layerwise;
        gn::GnState sf(m.params), sl(m.params);
        gn::FixedBatches bf({b}), bl({b});
        for (int k = 0; k < 2; ++k) {
            gn::gn_outer_step(full, *m.graph, m.config.loss, sf, bf);
            gn::gn_outer_step(lw, *m.graph, m.config.loss, sl, bl);
        }
        single = std::max(single, max_abs_diff(sf.theta, sl.theta));
    }
    double block = 0.0, moved = 1e300;
    const TwoTower graph;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ParamTree params;
        params.add("left", testutil::random_tensor({2, 2}, 10 * seed + 1), ParamRole::matrix, 0);
        params.add("right", testutil::random_tensor({2, 3}, 10 * seed + 2), ParamRole::matrix, 1);
        const Batch b = Batch::regression(testutil::random_tensor({10, 4}, 10 * seed + 3),
                                          testutil::random_tensor({10, 5}, 10 * seed + 4));
        gn::GnConfig full = exact_sgd_config(gd_lr(graph, LossKind::mse, params, b), 20000);
        full.line_search = false;
        gn::GnConfig lw = full;
        lw.variant = gn::GnVariant::layerwise;
        gn::GnState sf(params), sl(params);
        gn::FixedBatches bf({b}), bl({b});
        gn::gn_outer_step(full, graph, LossKind::mse, sf, bf);
        gn::gn_outer_step(lw, graph, LossKind::mse, sl, bl);
        block = std::max(block, max_abs_diff(sf.theta, sl.theta));
        moved = std::min(moved, max_abs_diff(sf.theta, params));
    }
    return {single <= 1e-6 && block <= 1e-6 && moved > 1e-2,
            "single block " + fmt(single) + ", block diagonal " + fmt(block)};
}

Outcome line_search_contract() {
    bool candidates_ok = true;
    for (int e : {4, 9}) {
        const auto c = step_candidates(e);
        candidates_ok = candidates_ok && c.size() == static_cast<std::size_t>(e + 1);
        for (int i = 0; i <= e && candidates_ok; ++i)
            candidates_ok = c[static_cast<std::size_t>(i)] == std::pow(2.0, -i / 2.0);
    }

    bool argmin_ok = true, step_ok = true, grid_ok = true;
    const Case c = mlp_case(14);
    for (auto variant : {gn::GnVariant::full, gn::GnVariant::layerwise}) {
        gn::GnConfig cfg;
        cfg.variant = variant;
        cfg.inner.optimizer.lr = 0.5;
        cfg.inner.n_steps = 4;
        gn::GnState s(c.model.params);
        gn::FixedBatches batches({c.batch});
        for (int k = 0; k < 5; ++k) {
            const ParamTree before = s.theta;
            const auto r = gn::gn_outer_step(cfg, *c.model.graph, c.model.config.loss, s, batches);
            grid_ok = grid_ok && r.alphas == step_candidates(cfg.exponent());
            if (r.rejected) {
                step_ok = step_ok && s.theta == before;
                continue;
            }
            const auto best = std::min_element(r.candidate_losses.begin(), r.candidate_losses.end());
            argmin_ok = argmin_ok && r.alpha_star == r.alphas[static_cast<std::size_t>(best - r.candidate_losses.begin())];
            ParamTree expect = before;
            expect.axpy(r.alpha_star, r.theta_hat - before);
            step_ok = step_ok && max_abs_diff(expect, s.theta) <= 1e-14;
        }
    }

    // a zero move keeps the parameters bit for bit
    gn::GnConfig still;
    still.inner.optimizer.lr = 0.0;
    gn::GnState s0(c.model.params);
    gn::FixedBatches b0({c.batch});
    gn::gn_outer_step(still, *c.model.graph, c.model.config.loss, s0, b0);
    const auto direct =
        line_search([&](const ParamTree& p) { return model_loss(c.model, p, c.batch); }, c.model.params,
                    c.model.params, step_candidates(4));
    const bool zero_ok = s0.theta == c.model.params && direct.theta_next == c.model.params;

    std::ostringstream d;
    d << "candidates " << (candidates_ok && grid_ok ? "exact" : "WRONG") << ", argmin " << (argmin_ok ? "ok" : "WRONG")
      << ", update " << (step_ok ? "ok" : "WRONG") << ", zero move " << (zero_ok ? "ok" : "WRONG");
    return {candidates_ok && grid_ok && argmin_ok && step_ok && zero_ok, d.str()};
}

Outcome cbs_detector() {
    std::size_t cases = 0, wrong = 0;
    const double cst = 1e6;
    for (double ratio : {1.5, 2.0, 3.0, 4.0, 8.0}) {
        for (double bstar : {32.0, 100.0, 1024.0}) {
            for (int below = 0; below <= 3; ++below) {
                for (int above = 0; above <= 3; ++above) {
                    if (below + above < 1) continue;
                    std::vector<CbsSample> s;
                    for (int i = -below; i <= above; ++i) {
                        const double b = bstar * std::pow(ratio, i);
                        s.push_back({b, cst / std::min(b, bstar)});
                    }
                    ++cases;
                    const auto e = critical_batch_size(s);
                    const bool resolved = above > 0;
                    const double expect = resolved ? bstar : s.back().batch;
                    if (e.batch != expect || e.plateau_found != resolved) ++wrong;
                }
            }
        }
    }
    return {wrong == 0, std::to_string(cases - wrong) + "/" + std::to_string(cases) + " grids return b*"};
}

// ---- training runs ----------------------------------------------------------

ExperimentConfig preset(const std::string& name) { return load_config(presets_dir + "/ordering/" + name + ".json"); }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

constexpr std::uint64_t kSeeds[] = {0, 1, 2};

// Run directories carry a hash of the config so edited presets do not reuse
// stale cached runs.
std::string run_dir(const std::string& name, ExperimentConfig c) {
    c.out.clear();
    char buf[24];
    std::snprintf(buf, sizeof buf, "%08zx", std::hash<std::string>{}(config_to_json(c)) & 0xffffffffu);
    return work_dir + "/ordering/" + name + "-" + buf;
}

double ordering_target() {
    std::vector<double> finals;
    for (std::uint64_t seed : kSeeds) {
        ExperimentConfig c = preset("small_adamw");
        c.seed = seed;
        c.out = run_dir("small-adamw-s" + std::to_string(seed), c);
        const RunSummary s = warmup_then_train(c);
        if (!s.final_eval_loss) throw Error("small-batch run " + c.out + " has no eval loss: " + s.failure);
        finals.push_back(*s.final_eval_loss);
    }
    return 1.1 * median(finals);
}

// Median steps to target over the seeds; runs that never reach it count as
// infinitely slow.
double median_steps(const std::string& name, double target) {
    std::vector<double> steps;
    for (std::uint64_t seed : kSeeds) {
        ExperimentConfig c = preset(name);
        c.seed = seed;
        c.stop.target_loss = target;
        c.out = run_dir(name + "-s" + std::to_string(seed), c);
        const RunSummary s = warmup_then_train(c);
        steps.push_back(s.steps_to_target ? static_cast<double>(*s.steps_to_target)
                                          : std::numeric_limits<double>::infinity());
    }
    return median(steps);
}

Outcome ordering() {
    const double target = ordering_target();
    const double gn_steps = median_steps("large_gn", target);
    const double soap = median_steps("large_soap", target);
    const double adamw = median_steps("large_adamw", target);
    const bool ok = gn_steps <= 0.9 * soap && soap <= 0.9 * adamw;
    return {ok, "target " + fmt(target) + ", median steps GN " + fmt(gn_steps) + " < SOAP " + fmt(soap) +
                    " < AdamW " + fmt(adamw) + " (b = 256 vs 4)"};
}

Outcome prox_vs_gn() {
    const double target = ordering_target();
    const double gn_steps = median_steps("large_gn", target);
    const double prox = median_steps("large_gn_prox", target);
    const double ratio = prox / gn_steps;
    return {std::isfinite(ratio) && std::abs(ratio - 1.0) <= 0.25,
            "median steps prox " + fmt(prox) + " vs GN " + fmt(gn_steps) + ", ratio " + fmt(ratio)};
}

std::vector<std::string> log_lines(const std::string& path) {
    std::vector<std::string> out;
    for (RunRecord r : read_log(path)) {
        r.wall_ms = 0;
        out.push_back(record_to_json(r));
    }
    return out;
}

Outcome determinism_resume() {
    const std::string root = work_dir + "/determinism";
    fs::remove_all(root);
    std::string detail;
    bool ok = true;
    const std::vector<std::pair<std::string, std::string>> methods{
        {"adamw", R"({"method": "adamw", "optimizer": {"lr": 0.003}, "batch": {"seqs": 4}})"},
        {"soap", R"({"method": "soap", "optimizer": {"lr": 0.003}, "batch": {"seqs": 4}})"},
        {"gn", R"({"method": "gn", "optimizer": {"kind": "muon", "lr": 0.01}, "batch": {"b_inner": 2, "n_inner": 2}})"},
        {"gn_prox_ewa",
         R"({"method": "gn_prox", "optimizer": {"kind": "muon", "lr": 0.01}, "batch": {"b_inner": 2, "n_inner": 2}, "ewa": {"tau": 0.9}})"},
    };
    for (const auto& [name, block] : methods) {
        ExperimentConfig base = load_config(presets_dir + "/tiny_adamw.json");
        base = apply_overrides(base, R"({"model": {"context_length": 16}, "warmup": {"budget_tokens": 40000},
                                          "stop": {"steps": 12}, "eval": {"batches": 2, "batch_seqs": 2, "every": 1}})");
        base = apply_overrides(base, block);
        auto at = [&](const std::string& leaf) {
            ExperimentConfig c = base;
            c.out = root + "/" + name + "-" + leaf;
            return c;
        };
        warmup_then_train(at("a"));
        warmup_then_train(at("b"));
        RunOptions first;
        first.stop_after = 5;
        warmup_then_train(at("split"), first);
        warmup_then_train(at("split"));
        const auto a = log_lines(root + "/" + name + "-a/log.jsonl");
        const bool same = a.size() == 12 && a == log_lines(root + "/" + name + "-b/log.jsonl");
        const bool resumed = a == log_lines(root + "/" + name + "-split/log.jsonl");
        ok = ok && same && resumed;
        detail += std::string(detail.empty() ? "" : ", ") + name + (same ? " repeat ok" : " repeat DIFFERS") +
                  (resumed ? "/resume ok" : "/resume DIFFERS");
    }
    fs::remove_all(root);
    return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gnlab acceptance checks"};
    std::vector<std::string> only;
    bool list = false;
    app.add_option("--only", only, "Run only these criteria");
    app.add_option("--work-dir", work_dir, "Directory for cached training runs");
    app.add_option("--presets", presets_dir, "Preset directory");
    app.add_flag("--list", list, "List criteria and exit");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria{
        {"gradient_fd", gradient_fd},
        {"adjoint_identity", adjoint_identity},
        {"gn_solve_equivalence", gn_solve_equivalence},
        {"gn_psd", gn_psd},
        {"ce_hessian", ce_hessian},
        {"one_step_exactness", one_step_exact},
        {"newton_schulz", newton_schulz_criterion},
        {"soap_adamw_reduction", soap_adamw},
        {"layerwise_equals_full", layerwise_full},
        {"line_search_contract", line_search_contract},
        {"cbs_detector", cbs_detector},
        {"large_batch_ordering", ordering},
        {"prox_linear_matches_gn", prox_vs_gn},
        {"determinism_resume", determinism_resume},
    };
    if (list) {
        for (const auto& c : criteria) std::cout << c.name << "\n";
        return 0;
    }
    for (const auto& name : only) {
        if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return c.name == name; })) {
            std::cerr << "unknown criterion '" << name << "'\n";
            return 2;
        }
    }

    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cout << (o.passed ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " [" << fmt(secs) << " s]"
                  << std::endl;
        failed += o.passed ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
