#include "gnlab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace gnlab {

namespace {

using Json = nlohmann::ordered_json;

// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError("config: '" + path_ + "' must be an object");
        }
    }

    ~ObjectReader() noexcept(false) {
        if (std::uncaught_exceptions() > 0) {
            return;
        }
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) {
                throw ConfigError("config: unknown key '" + path_ + (path_.empty() ? "" : ".") + key + "'");
            }
        }
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (!has(key)) {
            return;
        }
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: bad value for '" + where(key) + "': " + e.what());
        }
    }

    template <typename T>
    void get(const std::string& key, std::optional<T>& out) {
        if (!has(key)) {
            return;
        }
        T v{};
        get(key, v);
        out = v;
    }

    const Json& child(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

const char* family_name(ModelFamily f) { return f == ModelFamily::mlp ? "mlp" : "transformer"; }

ModelFamily parse_family(const std::string& s) {
    if (s == "mlp") {
        return ModelFamily::mlp;
    }
    if (s == "transformer") {
        return ModelFamily::transformer;
    }
    throw ConfigError("config: unknown model family '" + s + "'");
}

LossKind parse_loss(const std::string& s) {
    if (s == "cross_entropy") {
        return LossKind::cross_entropy;
    }
    if (s == "mse") {
        return LossKind::mse;
    }
    throw ConfigError("config: unknown loss '" + s + "'");
}

void read_model(const Json& j, ExperimentConfig& c) {
    ObjectReader r(j, "model");
    r.get("preset", c.model_preset);
    if (!c.model_preset.empty() && c.model_preset != "custom") {
        c.model = ModelConfig::preset(c.model_preset);
    }
    std::string family = family_name(c.model.family);
    r.get("family", family);
    c.model.family = parse_family(family);
    r.get("hidden_size", c.model.hidden_size);
    r.get("intermediate_size", c.model.intermediate_size);
    r.get("n_layers", c.model.n_layers);
    r.get("n_heads", c.model.n_heads);
    r.get("vocab_size", c.model.vocab_size);
    r.get("context_length", c.model.context_length);
    r.get("init_std", c.model.init_std);
    r.get("widths", c.model.widths);
    r.get("bias", c.model.bias);
    r.get("activation", c.model.activation);
    r.get("single_layer_group", c.model.single_layer_group);
    std::string loss = loss_name(c.model.loss);
    r.get("loss", loss);
    c.model.loss = parse_loss(loss);
}

void read_optimizer(const Json& j, OptimizerConfig& o) {
    ObjectReader r(j, "optimizer");
    if (r.has("kind")) {
        std::string k;
        r.get("kind", k);
        o.kind = parse_optimizer(k);
    }
    r.get("lr", o.lr);
    r.get("beta1", o.beta1);
    r.get("beta2", o.beta2);
    r.get("eps", o.eps);
    r.get("weight_decay", o.weight_decay);
    r.get("momentum", o.momentum);
    r.get("ns_iters", o.ns_iters);
    r.get("fallback_lr_ratio", o.fallback_lr_ratio);
    r.get("damping", o.damping);
    r.get("precond_freq", o.precond_freq);
    r.get("max_precond_dim", o.max_precond_dim);
    r.get("reproject_moments", o.reproject_moments);
}

Json optimizer_json(const OptimizerConfig& o) {
    Json j;
    j["kind"] = optimizer_name(o.kind);
    j["lr"] = o.lr;
    j["beta1"] = o.beta1;
    j["beta2"] = o.beta2;
    j["eps"] = o.eps;
    j["weight_decay"] = o.weight_decay;
    j["momentum"] = o.momentum;
    j["ns_iters"] = o.ns_iters;
    j["fallback_lr_ratio"] = o.fallback_lr_ratio;
    j["damping"] = o.damping;
    j["precond_freq"] = o.precond_freq;
    j["max_precond_dim"] = o.max_precond_dim;
    j["reproject_moments"] = o.reproject_moments;
    return j;
}

Json to_json(const ExperimentConfig& c) {
    Json j;
    j["name"] = c.name;
    j["seed"] = c.seed;
    j["out"] = c.out;
    Json m;
    m["preset"] = c.model_preset;
    m["family"] = family_name(c.model.family);
    m["hidden_size"] = c.model.hidden_size;
    m["intermediate_size"] = c.model.intermediate_size;
    m["n_layers"] = c.model.n_layers;
    m["n_heads"] = c.model.n_heads;
    m["vocab_size"] = c.model.vocab_size;
    m["context_length"] = c.model.context_length;
    m["init_std"] = c.model.init_std;
    m["widths"] = c.model.widths;
    m["bias"] = c.model.bias;
    m["activation"] = c.model.activation;
    m["single_layer_group"] = c.model.single_layer_group;
    m["loss"] = loss_name(c.model.loss);
    j["model"] = m;
    j["data"] = Json{{"kind", c.data.kind}, {"path", c.data.path}, {"seed", c.data.seed}};
    j["method"] = method_name(c.method);
    j["optimizer"] = optimizer_json(c.optimizer);
    j["batch"] = Json{{"seqs", c.batch_seqs}, {"b_inner", c.gn.inner.b_inner}, {"n_inner", c.gn.inner.n_steps}};
    Json g;
    g["line_search"] = c.gn.line_search ? Json(*c.gn.line_search) : Json(nullptr);
    g["max_exponent"] = c.gn.max_exponent ? Json(*c.gn.max_exponent) : Json(nullptr);
    g["reject_on_increase"] = c.gn.reject_on_increase;
    g["eval_seqs"] = c.gn.eval_seqs;
    g["warm_start"] = c.gn.inner.warm_start;
    g["persist_optimizer_state"] = c.gn.inner.persist_optimizer_state;
    g["optimizer_wd"] = c.gn.inner.reg.optimizer_wd;
    g["loss_wd"] = c.gn.inner.reg.loss_wd;
    g["parameter_wd"] = c.gn.inner.reg.parameter_wd;
    g["divergence_factor"] = c.gn.inner.divergence_factor;
    j["gn"] = g;
    j["schedule"] = Json{{"kind", schedule_name(c.schedule.kind)},
                         {"global_warmup_fraction", c.schedule.global_warmup_fraction},
                         {"inner_warmup_fraction", c.schedule.inner_warmup_fraction},
                         {"total_steps", c.schedule_steps},
                         {"inner_warmup_all_inner_kinds", c.schedule.inner_warmup_all_inner_kinds}};
    j["ewa"] = Json{{"tau", c.ewa_tau}, {"allow_with_line_search", c.ewa_with_line_search}};
    j["warmup"] = Json{{"fraction", c.warmup.fraction},         {"budget_tokens", c.warmup.budget_tokens},
                       {"lr", c.warmup.lr},                     {"beta2", c.warmup.beta2},
                       {"batch_seqs", c.warmup.batch_seqs},     {"ramp_fraction", c.warmup.ramp_fraction},
                       {"cache_dir", c.warmup.cache_dir}};
    Json s;
    s["steps"] = c.stop.steps ? Json(*c.stop.steps) : Json(nullptr);
    s["tokens"] = c.stop.tokens ? Json(*c.stop.tokens) : Json(nullptr);
    s["target_loss"] = c.stop.target_loss ? Json(*c.stop.target_loss) : Json(nullptr);
    s["max_steps"] = c.stop.max_steps;
    j["stop"] = s;
    j["eval"] = Json{{"batches", c.eval.batches}, {"batch_seqs", c.eval.batch_seqs}, {"every", c.eval.every}};
    j["micro_chunk_seqs"] = c.micro_chunk_seqs;
    j["checkpoint_every"] = c.checkpoint_every;
    return j;
}

ExperimentConfig from_json(const Json& j) {
    ExperimentConfig c;
    ObjectReader r(j, "");
    r.get("name", c.name);
    r.get("seed", c.seed);
    r.get("out", c.out);
    if (r.has("model")) {
        read_model(r.child("model"), c);
    }
    if (r.has("data")) {
        ObjectReader d(r.child("data"), "data");
        d.get("kind", c.data.kind);
        d.get("path", c.data.path);
        d.get("seed", c.data.seed);
    }
    std::string method = method_name(c.method);
    r.get("method", method);
    c.method = parse_method(method);
    // Method-dependent optimizer defaults, then explicit fields on top.
    switch (c.method) {
        case Method::adamw: c.optimizer.kind = OptimizerKind::adamw; break;
        case Method::muon: c.optimizer.kind = OptimizerKind::muon; break;
        case Method::shampoo: c.optimizer.kind = OptimizerKind::shampoo; break;
        case Method::soap: c.optimizer.kind = OptimizerKind::soap; break;
        default: c.optimizer = c.gn.inner.optimizer; break;
    }
    if (r.has("optimizer")) {
        read_optimizer(r.child("optimizer"), c.optimizer);
    }
    if (r.has("batch")) {
        ObjectReader b(r.child("batch"), "batch");
        b.get("seqs", c.batch_seqs);
        b.get("b_inner", c.gn.inner.b_inner);
        b.get("n_inner", c.gn.inner.n_steps);
    }
    if (r.has("gn")) {
        ObjectReader g(r.child("gn"), "gn");
        g.get("line_search", c.gn.line_search);
        g.get("max_exponent", c.gn.max_exponent);
        g.get("reject_on_increase", c.gn.reject_on_increase);
        g.get("eval_seqs", c.gn.eval_seqs);
        g.get("warm_start", c.gn.inner.warm_start);
        g.get("persist_optimizer_state", c.gn.inner.persist_optimizer_state);
        g.get("optimizer_wd", c.gn.inner.reg.optimizer_wd);
        g.get("loss_wd", c.gn.inner.reg.loss_wd);
        g.get("parameter_wd", c.gn.inner.reg.parameter_wd);
        g.get("divergence_factor", c.gn.inner.divergence_factor);
    }
    if (r.has("schedule")) {
        ObjectReader s(r.child("schedule"), "schedule");
        std::string kind = schedule_name(c.schedule.kind);
        s.get("kind", kind);
        c.schedule.kind = parse_schedule(kind);
        s.get("global_warmup_fraction", c.schedule.global_warmup_fraction);
        s.get("inner_warmup_fraction", c.schedule.inner_warmup_fraction);
        s.get("total_steps", c.schedule_steps);
        s.get("inner_warmup_all_inner_kinds", c.schedule.inner_warmup_all_inner_kinds);
    }
    if (r.has("ewa")) {
        ObjectReader e(r.child("ewa"), "ewa");
        e.get("tau", c.ewa_tau);
        e.get("allow_with_line_search", c.ewa_with_line_search);
    }
    if (r.has("warmup")) {
        ObjectReader w(r.child("warmup"), "warmup");
        w.get("fraction", c.warmup.fraction);
        w.get("budget_tokens", c.warmup.budget_tokens);
        w.get("lr", c.warmup.lr);
        w.get("beta2", c.warmup.beta2);
        w.get("batch_seqs", c.warmup.batch_seqs);
        w.get("ramp_fraction", c.warmup.ramp_fraction);
        w.get("cache_dir", c.warmup.cache_dir);
    }
    if (r.has("stop")) {
        ObjectReader s(r.child("stop"), "stop");
        s.get("steps", c.stop.steps);
        s.get("tokens", c.stop.tokens);
        s.get("target_loss", c.stop.target_loss);
        s.get("max_steps", c.stop.max_steps);
    }
    if (r.has("eval")) {
        ObjectReader e(r.child("eval"), "eval");
        e.get("batches", c.eval.batches);
        e.get("batch_seqs", c.eval.batch_seqs);
        e.get("every", c.eval.every);
    }
    r.get("micro_chunk_seqs", c.micro_chunk_seqs);
    r.get("checkpoint_every", c.checkpoint_every);

    if (is_gn_family(c.method)) {
        c.gn.inner.optimizer = c.optimizer;
        c.gn.variant = c.method == Method::gn_prox      ? gn::GnVariant::prox_linear
                       : c.method == Method::gn_layerwise ? gn::GnVariant::layerwise
                                                          : gn::GnVariant::full;
        c.gn.schedule = c.schedule;
    }
    c.validate();
    return c;
}

Json parse_json(std::string_view text) {
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
}

}  // namespace

const char* method_name(Method m) {
    switch (m) {
        case Method::adamw: return "adamw";
        case Method::muon: return "muon";
        case Method::shampoo: return "shampoo";
        case Method::soap: return "soap";
        case Method::gn: return "gn";
        case Method::gn_prox: return "gn_prox";
        case Method::gn_layerwise: return "gn_layerwise";
    }
    return "unknown";
}

Method parse_method(std::string_view name) {
    for (auto m : {Method::adamw, Method::muon, Method::shampoo, Method::soap, Method::gn, Method::gn_prox,
                   Method::gn_layerwise}) {
        if (name == method_name(m)) {
            return m;
        }
    }
    throw ConfigError("config: unknown method '" + std::string(name) + "'");
}

bool is_gn_family(Method m) noexcept { return m == Method::gn || m == Method::gn_prox || m == Method::gn_layerwise; }

std::size_t ExperimentConfig::global_batch_seqs() const {
    return is_gn_family(method) ? gn.inner.b_inner * gn.inner.n_steps : batch_seqs;
}

void ExperimentConfig::validate() const {
    model.validate();
    const int rules = (stop.steps ? 1 : 0) + (stop.tokens ? 1 : 0) + (stop.target_loss ? 1 : 0);
    if (rules != 1) {
        throw ConfigError("config: exactly one of stop.steps, stop.tokens, stop.target_loss is required");
    }
    if (is_gn_family(method)) {
        if (gn.inner.b_inner == 0 || gn.inner.n_steps == 0) {
            throw ConfigError("config: Gauss-Newton methods need batch.b_inner and batch.n_inner");
        }
    } else if (batch_seqs == 0) {
        throw ConfigError("config: batch.seqs must be positive");
    }
    if (!(warmup.fraction >= 0.0 && warmup.fraction < 1.0)) {
        throw ConfigError("config: warmup.fraction must be in [0, 1)");
    }
    if (!(ewa_tau >= 0.0 && ewa_tau < 1.0)) {
        throw ConfigError("config: ewa.tau must be in [0, 1)");
    }
    if (ewa_tau > 0.0 && is_gn_family(method) && gn.use_line_search() && !ewa_with_line_search) {
        throw ConfigError("config: ewa.tau > 0 with a line-searched method needs ewa.allow_with_line_search");
    }
    if (eval.batches == 0 || eval.batch_seqs == 0 || eval.every == 0) {
        throw ConfigError("config: eval sizes must be positive");
    }
    if (micro_chunk_seqs == 0) {
        throw ConfigError("config: micro_chunk_seqs must be positive");
    }
    ScheduleSpec s = schedule;
    s.total_outer_steps = 1;
    s.validate();
}

ExperimentConfig parse_config(std::string_view json_text) { return from_json(parse_json(json_text)); }

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& config) { return to_json(config).dump(2); }

ExperimentConfig apply_overrides(const ExperimentConfig& base, std::string_view json_overrides) {
    Json j = to_json(base);
    const Json patch = parse_json(json_overrides);
    if (!patch.is_object()) {
        throw ConfigError("config: overrides must be a JSON object");
    }
    // Overriding the stop rule replaces it as a whole.
    if (patch.contains("stop")) {
        j["stop"] = Json{{"max_steps", base.stop.max_steps}};
    }
    // A preset override must not be shadowed by the old resolved sizes.
    if (patch.contains("model") && patch["model"].contains("preset")) {
        j["model"] = Json::object();
    }
    // A new method brings its own optimizer kind unless the patch names one.
    const bool kind_given = patch.contains("optimizer") && patch["optimizer"].contains("kind");
    if (patch.contains("method") && !kind_given && j.contains("optimizer")) {
        j["optimizer"].erase("kind");
    }
    j.merge_patch(patch);
    return from_json(j);
}

}  // namespace gnlab
