#include "gnlab/tree_optimizer.hpp"

#include <map>

#include "gnlab/checkpoint.hpp"

namespace gnlab {

const char* optimizer_name(OptimizerKind kind) {
    switch (kind) {
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::adamw: return "adamw";
        case OptimizerKind::muon: return "muon";
        case OptimizerKind::shampoo: return "shampoo";
        case OptimizerKind::soap: return "soap";
    }
    return "unknown";
}

OptimizerKind parse_optimizer(std::string_view name) {
    for (auto k : {OptimizerKind::sgd, OptimizerKind::adamw, OptimizerKind::muon, OptimizerKind::shampoo,
                   OptimizerKind::soap}) {
        if (name == optimizer_name(k)) {
            return k;
        }
    }
    throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

TreeOptimizer::TreeOptimizer(OptimizerConfig config, const ParamTree& layout)
    : config_(config), slots_(layout.size()) {
    for (const auto& e : layout.entries()) {
        names_.push_back(e.name);
    }
}

bool TreeOptimizer::uses_muon(const ParamEntry& e) const noexcept {
    return config_.kind == OptimizerKind::muon && e.role == ParamRole::matrix && e.value.rank() == 2;
}

void TreeOptimizer::step(ParamTree& params, const ParamTree& grads, double lr_mult, const std::vector<bool>* active) {
    params.require_congruent(grads, "optimizer step");
    if (params.size() != slots_.size()) {
        throw ShapeError("optimizer step: parameter tree does not match optimizer layout");
    }
    const double lr = config_.lr * lr_mult;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (active && !(*active)[i]) {
            continue;
        }
        ParamEntry& e = params[i];
        const Tensor& g = grads[i].value;
        Slot& s = slots_[i];
        switch (config_.kind) {
            case OptimizerKind::sgd:
                sgd_step(e.value, g, s.momentum, lr, config_.momentum, config_.weight_decay);
                break;
            case OptimizerKind::adamw:
                adamw_step(e.value, g, s.adam, {lr, config_.beta1, config_.beta2, config_.eps, config_.weight_decay},
                           e.name);
                break;
            case OptimizerKind::muon:
                if (uses_muon(e)) {
                    muon_step(e.value, g, s.momentum, {lr, config_.momentum, config_.ns_iters});
                } else {
                    adamw_step(e.value, g, s.adam,
                               {lr * config_.fallback_lr_ratio, config_.beta1, config_.beta2, config_.eps,
                                config_.weight_decay},
                               e.name);
                }
                break;
            case OptimizerKind::shampoo:
                shampoo_step(e.value, g, s.shampoo, {lr, config_.damping, config_.weight_decay});
                break;
            case OptimizerKind::soap:
                soap_step(e.value, g, s.soap,
                          {lr, config_.beta1, config_.beta2, config_.eps, config_.weight_decay, config_.precond_freq,
                           config_.max_precond_dim, config_.reproject_moments});
                break;
        }
    }
    ++steps_;
}

void TreeOptimizer::reset() {
    for (auto& s : slots_) {
        s = Slot{};
    }
    steps_ = 0;
}

NamedTensors TreeOptimizer::state() const {
    NamedTensors out;
    out.emplace_back("opt/steps", counter_tensor(steps_));
    auto put = [&](const std::string& base, const char* key, const Tensor& t) {
        if (!t.empty()) {
            out.emplace_back(base + "/" + key, t);
        }
    };
    for (std::size_t i = 0; i < slots_.size(); ++i) {
        const Slot& s = slots_[i];
        const std::string base = "opt/" + names_[i];
        put(base, "adam.m", s.adam.m);
        put(base, "adam.v", s.adam.v);
        if (s.adam.t) {
            out.emplace_back(base + "/adam.t", counter_tensor(s.adam.t));
        }
        put(base, "mom.m", s.momentum.m);
        if (s.momentum.t) {
            out.emplace_back(base + "/mom.t", counter_tensor(s.momentum.t));
        }
        put(base, "shampoo.l", s.shampoo.l);
        put(base, "shampoo.r", s.shampoo.r);
        if (s.shampoo.t) {
            out.emplace_back(base + "/shampoo.t", counter_tensor(s.shampoo.t));
        }
        put(base, "soap.l", s.soap.l);
        put(base, "soap.r", s.soap.r);
        put(base, "soap.ql", s.soap.ql);
        put(base, "soap.qr", s.soap.qr);
        put(base, "soap.m", s.soap.m);
        put(base, "soap.v", s.soap.v);
        if (s.soap.t) {
            out.emplace_back(base + "/soap.t", counter_tensor(s.soap.t));
        }
    }
    return out;
}

void TreeOptimizer::load_state(const NamedTensors& state) {
    reset();
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < names_.size(); ++i) {
        index["opt/" + names_[i]] = i;
    }
    for (const auto& [name, t] : state) {
        if (name == "opt/steps") {
            steps_ = counter_value(t);
            continue;
        }
        const auto slash = name.rfind('/');
        if (slash == std::string::npos || !name.starts_with("opt/")) {
            continue;  // other sections share the checkpoint
        }
        auto it = index.find(name.substr(0, slash));
        if (it == index.end()) {
            throw IoError("optimizer state entry '" + name + "' does not match any parameter");
        }
        Slot& s = slots_[it->second];
        const std::string key = name.substr(slash + 1);
        if (key == "adam.m") s.adam.m = t;
        else if (key == "adam.v") s.adam.v = t;
        else if (key == "adam.t") s.adam.t = counter_value(t);
        else if (key == "mom.m") s.momentum.m = t;
        else if (key == "mom.t") s.momentum.t = counter_value(t);
        else if (key == "shampoo.l") s.shampoo.l = t;
        else if (key == "shampoo.r") s.shampoo.r = t;
        else if (key == "shampoo.t") s.shampoo.t = counter_value(t);
        else if (key == "soap.l") s.soap.l = t;
        else if (key == "soap.r") s.soap.r = t;
        else if (key == "soap.ql") s.soap.ql = t;
        else if (key == "soap.qr") s.soap.qr = t;
        else if (key == "soap.m") s.soap.m = t;
        else if (key == "soap.v") s.soap.v = t;
        else if (key == "soap.t") s.soap.t = counter_value(t);
        else throw IoError("unknown optimizer state key '" + key + "'");
    }
}

}  // namespace gnlab
