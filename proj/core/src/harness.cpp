#include "gnlab/harness.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "gnlab/checkpoint.hpp"
#include "gnlab/gauss_newton.hpp"
#include "gnlab/models.hpp"

namespace gnlab {

namespace fs = std::filesystem;

namespace {

using Json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

Json opt_json(const std::optional<double>& v) {
    return v && std::isfinite(*v) ? Json(*v) : Json(nullptr);
}

std::optional<double> opt_double(const Json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return std::nullopt;
    }
    return j.at(key).get<double>();
}

void write_file(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write '" + tmp + "'");
        }
        out << text;
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
    }
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::size_t context_of(const ExperimentConfig& c) { return c.model.context_length; }

std::uint64_t eval_slice_tokens(const ExperimentConfig& c) {
    return static_cast<std::uint64_t>(c.eval.batches * c.eval.batch_seqs * context_of(c));
}

std::vector<Batch> make_eval_batches(const ExperimentConfig& c, const DataSource& source) {
    std::vector<Batch> out;
    out.reserve(c.eval.batches);
    const std::uint64_t per = c.eval.batch_seqs * context_of(c);
    for (std::size_t j = 0; j < c.eval.batches; ++j) {
        out.push_back(batch_at(source, j * per, c.eval.batch_seqs, context_of(c)));
    }
    return out;
}

double mean_loss(const ad::Graph& graph, LossKind loss, const ParamTree& params, const std::vector<Batch>& batches) {
    double total = 0.0;
    for (const auto& b : batches) {
        total += model_loss(graph, loss, params, b);
    }
    return total / static_cast<double>(batches.size());
}

// Mean loss over the whole batch and its gradient, accumulated over chunks
// of `chunk` sequences in a fixed order.
double loss_and_grad(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch,
                     std::size_t chunk, ParamTree& grad) {
    grad = params.zeros_like();
    double loss_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t begin = 0; begin < batch.b_seqs; begin += chunk) {
        const Batch sub = batch.b_seqs <= chunk ? batch : batch.slice(begin, std::min(batch.b_seqs, begin + chunk));
        const ad::Tape tape = ad::forward(graph, params, sub);
        const LogitLoss ll = LogitLoss::evaluate(loss, tape.output_value(), sub);
        const double n = static_cast<double>(ll.count());
        loss_sum += ll.value() * n;
        count += ll.count();
        grad.axpy(1.0, tape.vjp(ll.grad() * n));
    }
    grad *= 1.0 / static_cast<double>(count);
    return loss_sum / static_cast<double>(count);
}

// ---- warmup ---------------------------------------------------------------

std::string warmup_key(const ExperimentConfig& c) {
    Json full = Json::parse(config_to_json(c));
    Json key;
    key["format"] = 1;
    key["model"] = full["model"];
    key["model"].erase("preset");
    key["data"] = full["data"];
    key["seed"] = c.seed;
    key["warmup"] = full["warmup"];
    key["warmup"].erase("cache_dir");
    key["eval"] = Json{{"batches", c.eval.batches}, {"batch_seqs", c.eval.batch_seqs}};
    key["micro_chunk_seqs"] = c.micro_chunk_seqs;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(key.dump())));
    return buf;
}

std::string warmup_dir(const ExperimentConfig& c) {
    if (!c.warmup.cache_dir.empty()) {
        return c.warmup.cache_dir;
    }
    const fs::path parent = fs::path(c.out).parent_path();
    return (parent.empty() ? fs::path("warmup") : parent / "warmup").string();
}

struct WarmupResult {
    ParamTree params;
    std::uint64_t cursor = 0;
    WarmupPlan plan;
    std::string checkpoint;
};

WarmupResult run_warmup(const ExperimentConfig& c, const Model& model, const DataSource& source) {
    WarmupResult r;
    r.plan = warmup_plan(c);
    r.params = model.params;
    r.cursor = eval_slice_tokens(c);
    if (r.plan.steps == 0) {
        return r;
    }
    fs::create_directories(warmup_dir(c));
    r.checkpoint = (fs::path(warmup_dir(c)) / ("warmup-" + warmup_key(c) + ".ckpt")).string();
    if (fs::exists(r.checkpoint)) {
        const Checkpoint ck = load_checkpoint(r.checkpoint);
        assign_named(r.params, ck.params);
        const Tensor* cursor = find_named(ck.state, "meta/cursor");
        const Tensor* tokens = find_named(ck.state, "meta/tokens");
        if (!cursor || !tokens || counter_value(*tokens) != r.plan.tokens) {
            throw IoError("warmup checkpoint '" + r.checkpoint + "' does not match the warmup plan");
        }
        r.cursor = counter_value(*cursor);
        return r;
    }
    OptimizerConfig oc;
    oc.kind = OptimizerKind::adamw;
    oc.lr = c.warmup.lr;
    oc.beta2 = c.warmup.beta2;
    TreeOptimizer opt(oc, r.params);
    const auto ramp = static_cast<std::size_t>(
        std::max(1.0, std::ceil(c.warmup.ramp_fraction * static_cast<double>(r.plan.steps))));
    ParamTree grad;
    for (std::size_t k = 0; k < r.plan.steps; ++k) {
        const Batch b = next_batch(source, r.cursor, r.plan.batch_seqs, context_of(c));
        const double l = loss_and_grad(*model.graph, c.model.loss, r.params, b, c.micro_chunk_seqs, grad);
        if (!std::isfinite(l)) {
            throw NumericalError("warmup: non-finite loss at step " + std::to_string(k + 1));
        }
        opt.step(r.params, grad, std::min(1.0, static_cast<double>(k + 1) / static_cast<double>(ramp)));
    }
    if (!r.params.all_finite()) {
        throw NumericalError("warmup produced non-finite parameters");
    }
    Checkpoint ck;
    ck.params = named(r.params);
    ck.state = {{"meta/cursor", counter_tensor(r.cursor)},
                {"meta/tokens", counter_tensor(r.plan.tokens)},
                {"meta/steps", counter_tensor(r.plan.steps)}};
    save_checkpoint(r.checkpoint, ck);
    return r;
}

gn::GnConfig resolved_gn(const ExperimentConfig& c, std::size_t total_steps) {
    gn::GnConfig g = c.gn;
    g.inner.optimizer = c.optimizer;
    g.variant = c.method == Method::gn_prox        ? gn::GnVariant::prox_linear
                : c.method == Method::gn_layerwise ? gn::GnVariant::layerwise
                                                   : gn::GnVariant::full;
    g.schedule = c.schedule;
    g.schedule.total_outer_steps = std::max<std::size_t>(1, total_steps);
    return g;
}

ScheduleSpec resolved_schedule(const ExperimentConfig& c) {
    ScheduleSpec s = c.schedule;
    s.total_outer_steps = std::max<std::size_t>(1, c.schedule_steps ? c.schedule_steps : planned_steps(c));
    return s;
}

std::size_t gn_groups(const ExperimentConfig& c, const ParamTree& layout) {
    return c.method == Method::gn_layerwise ? layout.layers().size() : 1;
}

// Everything a run needs to continue bit-identically.
struct RunState {
    std::size_t step = 0;
    std::uint64_t cursor = 0;
    std::uint64_t tokens_seen = 0;
    double post_warmup_eval = 0.0;
    EwaState ewa;
    std::optional<TreeOptimizer> optimizer;  // baselines
    std::optional<gn::GnState> gn;           // GN family
    ParamTree theta;                         // baselines; GN keeps gn->theta

    ParamTree& params() { return gn ? gn->theta : theta; }
    const ParamTree& params() const { return gn ? gn->theta : theta; }
};

Checkpoint capture(const RunState& s) {
    Checkpoint ck;
    ck.params = named(s.params());
    auto& st = ck.state;
    st.emplace_back("meta/step", counter_tensor(s.step));
    st.emplace_back("meta/cursor", counter_tensor(s.cursor));
    st.emplace_back("meta/tokens_seen", counter_tensor(s.tokens_seen));
    st.emplace_back("meta/post_warmup_eval", Tensor::scalar(s.post_warmup_eval));
    st.emplace_back("meta/ewa_initialized", counter_tensor(s.ewa.initialized ? 1 : 0));
    if (s.ewa.initialized) {
        for (auto& e : named(s.ewa.average, "ewa/")) {
            st.push_back(std::move(e));
        }
    }
    auto put_opt = [&](const TreeOptimizer& o, const std::string& prefix) {
        for (auto& [name, t] : o.state()) {
            st.emplace_back(prefix + name, t);
        }
    };
    if (s.optimizer) {
        put_opt(*s.optimizer, "opt0/");
    }
    if (s.gn) {
        st.emplace_back("meta/outer_step", counter_tensor(s.gn->outer_step));
        st.emplace_back("meta/has_prev", counter_tensor(s.gn->prev_theta_hat ? 1 : 0));
        if (s.gn->prev_theta_hat) {
            for (auto& e : named(*s.gn->prev_theta_hat, "prev/")) {
                st.push_back(std::move(e));
            }
        }
        st.emplace_back("meta/n_opt", counter_tensor(s.gn->optimizers.size()));
        for (std::size_t g = 0; g < s.gn->optimizers.size(); ++g) {
            put_opt(s.gn->optimizers[g], "opt" + std::to_string(g) + "/");
        }
    }
    return ck;
}

std::uint64_t meta(const Checkpoint& ck, const std::string& name) {
    const Tensor* t = find_named(ck.state, name);
    if (!t) {
        throw IoError("run checkpoint is missing '" + name + "'");
    }
    return counter_value(*t);
}

void restore(RunState& s, const Checkpoint& ck, const ExperimentConfig& c, const OptimizerConfig& gn_opt) {
    assign_named(s.params(), ck.params);
    s.step = meta(ck, "meta/step");
    s.cursor = meta(ck, "meta/cursor");
    s.tokens_seen = meta(ck, "meta/tokens_seen");
    s.post_warmup_eval = find_named(ck.state, "meta/post_warmup_eval")->item();
    s.ewa.initialized = meta(ck, "meta/ewa_initialized") != 0;
    if (s.ewa.initialized) {
        s.ewa.average = s.params().zeros_like();
        assign_named(s.ewa.average, ck.state, "ewa/");
    }
    if (s.optimizer) {
        s.optimizer->load_state(with_prefix(ck.state, "opt0/"));
    }
    if (s.gn) {
        s.gn->outer_step = meta(ck, "meta/outer_step");
        if (meta(ck, "meta/has_prev")) {
            ParamTree prev = s.gn->theta.zeros_like();
            assign_named(prev, ck.state, "prev/");
            s.gn->prev_theta_hat = std::move(prev);
        }
        const std::size_t n_opt = meta(ck, "meta/n_opt");
        s.gn->optimizers.clear();
        for (std::size_t g = 0; g < n_opt; ++g) {
            s.gn->optimizers.emplace_back(gn_opt, s.gn->theta);
            s.gn->optimizers.back().load_state(with_prefix(ck.state, "opt" + std::to_string(g) + "/"));
        }
        if (n_opt != 0 && n_opt != gn_groups(c, s.gn->theta)) {
            throw IoError("run checkpoint has " + std::to_string(n_opt) + " inner optimizers");
        }
    }
}

void write_log(const std::string& path, std::span<const RunRecord> log) {
    std::string text;
    for (const auto& r : log) {
        text += record_to_json(r);
        text += '\n';
    }
    write_file(path, text);
}

RunSummary summarize(const ExperimentConfig& c, const RunState& s, std::span<const RunRecord> log,
                     const WarmupResult& w, std::optional<double> target) {
    RunSummary m;
    m.name = c.name;
    m.method = method_name(c.method);
    m.seed = c.seed;
    m.steps = s.step;
    m.tokens_seen = s.tokens_seen;
    m.warmup_tokens = w.plan.tokens;
    m.warmup_steps = w.plan.steps;
    m.post_warmup_eval_loss = s.post_warmup_eval;
    m.out_dir = c.out;
    m.warmup_checkpoint = w.checkpoint;
    m.target_loss = target;
    if (!log.empty()) {
        m.final_train_loss = log.back().train_loss;
    }
    for (const auto& r : log) {
        if (r.eval_loss) {
            m.final_eval_loss = r.eval_loss;
            m.best_eval_loss = m.best_eval_loss ? std::min(*m.best_eval_loss, *r.eval_loss) : *r.eval_loss;
        }
    }
    if (target) {
        m.steps_to_target = steps_to_target(log, *target);
    }
    return m;
}

}  // namespace

// ---- records ----------------------------------------------------------------

std::string record_to_json(const RunRecord& r) {
    Json j;
    j["step"] = r.step;
    j["tokens_seen"] = r.tokens_seen;
    j["train_loss"] = r.train_loss;
    j["eval_loss"] = opt_json(r.eval_loss);
    j["lr"] = r.lr;
    j["alpha_star"] = opt_json(r.alpha_star);
    j["wall_ms"] = r.wall_ms;
    j["extra"] = Json::parse(r.extra_json.empty() ? "{}" : r.extra_json);
    return j.dump();
}

RunRecord record_from_json(std::string_view line) {
    try {
        const Json j = Json::parse(line);
        RunRecord r;
        r.step = j.at("step").get<std::size_t>();
        r.tokens_seen = j.at("tokens_seen").get<std::uint64_t>();
        r.train_loss = j.at("train_loss").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                    : j.at("train_loss").get<double>();
        r.eval_loss = opt_double(j, "eval_loss");
        r.lr = j.at("lr").get<double>();
        r.alpha_star = opt_double(j, "alpha_star");
        r.wall_ms = j.at("wall_ms").get<std::int64_t>();
        r.extra_json = j.contains("extra") ? j.at("extra").dump() : "{}";
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad run record: ") + e.what());
    }
}

std::vector<RunRecord> read_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open run log '" + path + "'");
    }
    std::vector<RunRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            out.push_back(record_from_json(line));
        }
    }
    return out;
}

std::optional<std::size_t> steps_to_target(std::span<const RunRecord> log, double target) {
    for (const auto& r : log) {
        if (r.eval_loss && *r.eval_loss <= target) {
            return r.step;
        }
    }
    return std::nullopt;
}

std::optional<std::size_t> steps_to_target(std::span<const double> losses, double target) {
    for (std::size_t i = 0; i < losses.size(); ++i) {
        if (losses[i] <= target) {
            return i + 1;
        }
    }
    return std::nullopt;
}

// ---- plans --------------------------------------------------------------------

WarmupPlan warmup_plan(const ExperimentConfig& c) {
    WarmupPlan p;
    p.batch_seqs = c.warmup.batch_seqs;
    p.budget_tokens = c.warmup.budget_tokens ? c.warmup.budget_tokens : 20 * analytic_param_count(c.model);
    const double want = c.warmup.fraction * static_cast<double>(p.budget_tokens);
    const std::uint64_t per = c.warmup.batch_seqs * context_of(c);
    if (want <= 0.0 || per == 0) {
        return p;
    }
    p.steps = static_cast<std::size_t>(std::ceil(want / static_cast<double>(per) - 1e-9));
    p.tokens = p.steps * per;
    return p;
}

std::uint64_t step_tokens(const ExperimentConfig& c) { return c.global_batch_seqs() * context_of(c); }

std::size_t planned_steps(const ExperimentConfig& c) {
    if (c.stop.steps) {
        return *c.stop.steps;
    }
    if (c.stop.tokens) {
        const std::uint64_t warm = warmup_plan(c).tokens;
        if (*c.stop.tokens < warm) {
            throw ConfigError("token budget " + std::to_string(*c.stop.tokens) + " is smaller than the warmup (" +
                              std::to_string(warm) + " tokens)");
        }
        return static_cast<std::size_t>((*c.stop.tokens - warm) / step_tokens(c));
    }
    return c.stop.max_steps;
}

double held_out_loss(const ExperimentConfig& c, const ParamTree& params) {
    const auto source = make_source(c.data);
    const auto graph = make_graph(c.model);
    return mean_loss(*graph, c.model.loss, params, make_eval_batches(c, *source));
}

// ---- summaries ------------------------------------------------------------------

std::string summary_to_json(const RunSummary& m) {
    Json j;
    j["name"] = m.name;
    j["method"] = m.method;
    j["seed"] = m.seed;
    j["steps"] = m.steps;
    j["tokens_seen"] = m.tokens_seen;
    j["warmup_tokens"] = m.warmup_tokens;
    j["warmup_steps"] = m.warmup_steps;
    j["post_warmup_eval_loss"] = m.post_warmup_eval_loss;
    j["final_train_loss"] = opt_json(m.final_train_loss);
    j["final_eval_loss"] = opt_json(m.final_eval_loss);
    j["best_eval_loss"] = opt_json(m.best_eval_loss);
    j["target_loss"] = opt_json(m.target_loss);
    j["steps_to_target"] = m.steps_to_target ? Json(*m.steps_to_target) : Json(nullptr);
    j["completed"] = m.completed;
    j["failure"] = m.failure;
    j["out_dir"] = m.out_dir;
    j["warmup_checkpoint"] = m.warmup_checkpoint;
    return j.dump(2);
}

RunSummary summary_from_json(std::string_view text) {
    try {
        const Json j = Json::parse(text);
        RunSummary m;
        m.name = j.at("name").get<std::string>();
        m.method = j.at("method").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.steps = j.at("steps").get<std::size_t>();
        m.tokens_seen = j.at("tokens_seen").get<std::uint64_t>();
        m.warmup_tokens = j.at("warmup_tokens").get<std::uint64_t>();
        m.warmup_steps = j.at("warmup_steps").get<std::size_t>();
        m.post_warmup_eval_loss = j.at("post_warmup_eval_loss").get<double>();
        m.final_train_loss = opt_double(j, "final_train_loss");
        m.final_eval_loss = opt_double(j, "final_eval_loss");
        m.best_eval_loss = opt_double(j, "best_eval_loss");
        m.target_loss = opt_double(j, "target_loss");
        if (!j.at("steps_to_target").is_null()) {
            m.steps_to_target = j.at("steps_to_target").get<std::size_t>();
        }
        m.completed = j.at("completed").get<bool>();
        m.failure = j.at("failure").get<std::string>();
        m.out_dir = j.at("out_dir").get<std::string>();
        m.warmup_checkpoint = j.at("warmup_checkpoint").get<std::string>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad run summary: ") + e.what());
    }
}

// ---- training ---------------------------------------------------------------------

RunSummary warmup_then_train(const ExperimentConfig& config, const RunOptions& options) {
    config.validate();
    const ExperimentConfig& c = config;
    fs::create_directories(c.out);
    const std::string log_path = (fs::path(c.out) / "log.jsonl").string();
    const std::string ckpt_path = (fs::path(c.out) / "checkpoint.bin").string();
    const std::string summary_path = (fs::path(c.out) / "summary.json").string();
    write_file((fs::path(c.out) / "config.json").string(), config_to_json(c) + "\n");

    const auto source = make_source(c.data);
    if (c.model.family == ModelFamily::transformer && source->vocab_size() > c.model.vocab_size) {
        throw ConfigError("data vocabulary (" + std::to_string(source->vocab_size()) + ") exceeds the model's (" +
                          std::to_string(c.model.vocab_size) + ")");
    }
    const Model model = build_model(c.model, c.seed);
    const ad::Graph& graph = *model.graph;
    const LossKind loss = c.model.loss;
    const std::vector<Batch> eval = make_eval_batches(c, *source);
    const std::size_t total = planned_steps(c);
    const ScheduleSpec schedule = resolved_schedule(c);
    const gn::GnConfig gncfg = resolved_gn(c, schedule.total_outer_steps);
    const bool gn_family = is_gn_family(c.method);
    const std::optional<double> target = options.report_target ? options.report_target : c.stop.target_loss;

    const WarmupResult warm = run_warmup(c, model, *source);

    RunState s;
    s.ewa.tau = c.ewa_tau;
    if (gn_family) {
        s.gn.emplace(warm.params);
    } else {
        s.theta = warm.params;
        s.optimizer.emplace(c.optimizer, s.theta);
    }
    OptimizerConfig gn_opt = gncfg.inner.optimizer;
    gn_opt.weight_decay = gncfg.inner.reg.optimizer_wd;

    std::vector<RunRecord> log;
    if (options.resume && fs::exists(ckpt_path) && fs::exists(log_path)) {
        restore(s, load_checkpoint(ckpt_path), c, gn_opt);
        log = read_log(log_path);
        if (log.size() < s.step) {
            throw IoError("run log '" + log_path + "' has fewer records than the checkpoint step");
        }
        log.resize(s.step);
        write_log(log_path, log);
    } else {
        s.cursor = warm.cursor;
        s.tokens_seen = warm.plan.tokens;
        s.post_warmup_eval = mean_loss(graph, loss, s.params(), eval);
        write_file(log_path, "");
        save_checkpoint(ckpt_path, capture(s));
    }

    auto finish = [&](bool completed, std::string failure) {
        RunSummary m = summarize(c, s, log, warm, target);
        m.completed = completed;
        m.failure = std::move(failure);
        write_file(summary_path, summary_to_json(m) + "\n");
        return m;
    };
    auto reached = [&]() {
        return c.stop.target_loss && !log.empty() && log.back().eval_loss && *log.back().eval_loss <= *c.stop.target_loss;
    };

    std::ofstream log_out(log_path, std::ios::app);
    ParamTree grad;
    while (s.step < total && !reached()) {
        if (options.stop_after && s.step >= *options.stop_after) {
            save_checkpoint(ckpt_path, capture(s));
            return finish(false, "");
        }
        const Checkpoint snapshot = capture(s);
        const auto t0 = Clock::now();
        RunRecord rec;
        rec.step = s.step + 1;
        try {
            Json extra = Json::object();
            if (gn_family) {
                gn::StreamBatches batches(*source, s.cursor, context_of(c));
                const gn::GnStepReport rep = gn::gn_outer_step(gncfg, graph, loss, *s.gn, batches);
                double sum = 0.0;
                for (double v : rep.micro_batch_losses) {
                    sum += v;
                }
                rec.train_loss = sum / static_cast<double>(rep.micro_batch_losses.size());
                s.tokens_seen += rep.tokens_consumed;
                rec.lr = gncfg.inner.optimizer.lr * lr_multiplier(gncfg.schedule, s.step, 0, gncfg.inner.n_steps);
                if (rep.line_search) {
                    rec.alpha_star = rep.alpha_star;
                }
                Json cands = Json::array();
                for (double v : rep.candidate_losses) {
                    cands.push_back(opt_json(v));
                }
                extra["inner_trace"] = rep.inner_loss_trace;
                extra["alphas"] = rep.alphas;
                extra["candidate_losses"] = cands;
                extra["base_loss"] = opt_json(rep.line_search ? std::optional<double>(rep.base_loss) : std::nullopt);
                extra["rejected"] = rep.rejected;
                extra["inner_diverged"] = rep.diverged;
                extra["line_search_tokens"] = rep.line_search_tokens;
            } else {
                const Batch b = next_batch(*source, s.cursor, c.batch_seqs, context_of(c));
                rec.train_loss = loss_and_grad(graph, loss, s.theta, b, c.micro_chunk_seqs, grad);
                if (!grad.all_finite()) {
                    throw NumericalError("non-finite gradient");
                }
                const double mult = lr_multiplier(schedule, s.step, 0, 1);
                s.optimizer->step(s.theta, grad, mult);
                s.tokens_seen += b.token_count();
                rec.lr = c.optimizer.lr * mult;
            }
            if (!std::isfinite(rec.train_loss) || !s.params().all_finite()) {
                throw NumericalError("non-finite loss or parameters");
            }
            ++s.step;
            if (s.ewa.tau > 0.0) {
                s.ewa.update(s.params());
            }
            const bool eval_now = gn_family || s.step % c.eval.every == 0 || s.step == total;
            if (eval_now) {
                const double e = mean_loss(graph, loss, s.ewa.initialized ? s.ewa.average : s.params(), eval);
                if (!std::isfinite(e)) {
                    throw NumericalError("non-finite eval loss");
                }
                rec.eval_loss = e;
            }
            rec.tokens_seen = s.tokens_seen;
            rec.extra_json = extra.dump();
        } catch (const NumericalError& e) {
            save_checkpoint(ckpt_path, snapshot);
            // The summary reports the state of the last good checkpoint.
            RunState last;
            last.ewa.tau = c.ewa_tau;
            if (gn_family) {
                last.gn.emplace(warm.params);
            } else {
                last.theta = warm.params;
                last.optimizer.emplace(c.optimizer, last.theta);
            }
            restore(last, snapshot, c, gn_opt);
            s = std::move(last);
            return finish(false, std::string("step ") + std::to_string(rec.step) + ": " + e.what());
        }
        rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
        log_out << record_to_json(rec) << '\n';
        log_out.flush();
        log.push_back(rec);
        if (options.on_record) {
            options.on_record(rec);
        }
        if (c.checkpoint_every && s.step % c.checkpoint_every == 0) {
            save_checkpoint(ckpt_path, capture(s));
        }
    }
    save_checkpoint(ckpt_path, capture(s));
    return finish(true, "");
}

}  // namespace gnlab
