#include "gnlab/models.hpp"

#include <cmath>
#include <numbers>

namespace gnlab {

namespace {

using ad::Tape;
using ad::Var;

std::string block_name(std::size_t i, const char* leaf) { return "block" + std::to_string(i) + "." + leaf; }

class TransformerGraph final : public ad::Graph {
public:
    explicit TransformerGraph(ModelConfig c) : c_(std::move(c)) {}

    Var build(Tape& t, const Batch& batch) const override {
        if (!batch.is_token_batch()) {
            throw ShapeError("transformer expects a token batch");
        }
        const std::size_t b = batch.b_seqs, ctx = batch.context, h = c_.hidden_size;
        const std::size_t nh = c_.n_heads, hd = h / nh;
        if (ctx > c_.context_length) {
            throw ShapeError("batch context " + std::to_string(ctx) + " exceeds model context " +
                             std::to_string(c_.context_length));
        }
        std::vector<std::int32_t> pos(b * ctx);
        for (std::size_t i = 0; i < pos.size(); ++i) {
            pos[i] = static_cast<std::int32_t>(i % ctx);
        }
        Var x = t.add(t.embedding(t.param(std::size_t{0}), batch.tokens), t.embedding(t.param(std::size_t{1}), pos));
        std::size_t p = 2;
        auto split_heads = [&](Var v) {
            v = t.reshape(v, {b, ctx, nh, hd});
            v = t.permute(v, {0, 2, 1, 3});
            return t.reshape(v, {b * nh, ctx, hd});
        };
        for (std::size_t l = 0; l < c_.n_layers; ++l) {
            Var ln1_g = t.param(p++), ln1_b = t.param(p++);
            Var wq = t.param(p++), wk = t.param(p++), wv = t.param(p++), wo = t.param(p++);
            Var ln2_g = t.param(p++), ln2_b = t.param(p++);
            Var w1 = t.param(p++), w2 = t.param(p++);

            Var a = t.layer_norm(x, ln1_g, ln1_b);
            Var q = split_heads(t.matmul(a, wq));
            Var k = split_heads(t.matmul(a, wk));
            Var v = split_heads(t.matmul(a, wv));
            Var s = t.scale(t.matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(hd)));
            Var att = t.matmul(t.softmax(t.causal_mask(s)), v);
            att = t.reshape(att, {b, nh, ctx, hd});
            att = t.permute(att, {0, 2, 1, 3});
            att = t.reshape(att, {b * ctx, h});
            x = t.add(x, t.matmul(att, wo));

            Var m = t.layer_norm(x, ln2_g, ln2_b);
            m = t.matmul(t.gelu(t.matmul(m, w1)), w2);
            x = t.add(x, m);
        }
        Var lnf_g = t.param(p++), lnf_b = t.param(p++);
        x = t.layer_norm(x, lnf_g, lnf_b);
        return t.matmul(x, t.param(p));
    }

private:
    ModelConfig c_;
};

class MlpGraph final : public ad::Graph {
public:
    explicit MlpGraph(ModelConfig c) : c_(std::move(c)) {}

    Var build(Tape& t, const Batch& batch) const override {
        if (batch.features.empty() || batch.features.cols() != c_.widths.front()) {
            throw ShapeError("mlp expects features with " + std::to_string(c_.widths.front()) + " columns");
        }
        Var x = t.constant(batch.features.reshaped({batch.features.rows(), batch.features.cols()}));
        std::size_t p = 0;
        const std::size_t layers = c_.widths.size() - 1;
        for (std::size_t l = 0; l < layers; ++l) {
            x = t.matmul(x, t.param(p++));
            if (c_.bias) {
                x = t.add_bias(x, t.param(p++));
            }
            if (c_.activation && l + 1 < layers) {
                x = t.gelu(x);
            }
        }
        return x;
    }

private:
    ModelConfig c_;
};

}  // namespace

void ModelConfig::validate() const {
    if (family == ModelFamily::mlp) {
        if (widths.size() < 2) {
            throw ConfigError("mlp needs at least input and output widths");
        }
        for (auto w : widths) {
            if (w == 0) {
                throw ConfigError("mlp widths must be positive");
            }
        }
        return;
    }
    if (hidden_size == 0 || intermediate_size == 0 || n_layers == 0 || n_heads == 0 || vocab_size == 0 ||
        context_length == 0) {
        throw ConfigError("transformer sizes must be positive");
    }
    if (hidden_size % n_heads != 0) {
        throw ConfigError("hidden_size " + std::to_string(hidden_size) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (loss != LossKind::cross_entropy) {
        throw ConfigError("transformer family only supports cross-entropy");
    }
}

ModelConfig ModelConfig::preset(std::string_view name) {
    ModelConfig c;
    if (name == "tiny") {
        return c;
    }
    if (name == "45M") {
        c.hidden_size = 512;
        c.intermediate_size = 2048;
        c.n_layers = 4;
        c.n_heads = 8;
        c.vocab_size = 32000;
        c.context_length = 1024;
        return c;
    }
    if (name == "150M") {
        c.hidden_size = 768;
        c.intermediate_size = 3072;
        c.n_layers = 12;
        c.n_heads = 16;
        c.vocab_size = 32000;
        c.context_length = 1024;
        return c;
    }
    throw ConfigError("unknown model preset '" + std::string(name) + "' (expected tiny, 45M or 150M)");
}

ModelConfig ModelConfig::mlp(std::vector<std::size_t> w, bool with_bias, LossKind loss_kind) {
    ModelConfig c;
    c.family = ModelFamily::mlp;
    c.widths = std::move(w);
    c.bias = with_bias;
    c.loss = loss_kind;
    c.init_std = 0.0;  // fan-in scaled
    return c;
}

std::vector<ParamSpec> param_layout(const ModelConfig& c) {
    c.validate();
    std::vector<ParamSpec> out;
    if (c.family == ModelFamily::mlp) {
        for (std::size_t l = 0; l + 1 < c.widths.size(); ++l) {
            const int layer = c.single_layer_group ? 0 : static_cast<int>(l);
            const std::string prefix = "layer" + std::to_string(l);
            out.push_back({prefix + ".weight", {c.widths[l], c.widths[l + 1]}, ParamRole::matrix, layer});
            if (c.bias) {
                out.push_back({prefix + ".bias", {c.widths[l + 1]}, ParamRole::vector, layer});
            }
        }
        return out;
    }
    const std::size_t h = c.hidden_size, f = c.intermediate_size;
    const int head_layer = c.single_layer_group ? 0 : static_cast<int>(c.n_layers) + 1;
    out.push_back({"embed.tokens", {c.vocab_size, h}, ParamRole::embedding, 0});
    out.push_back({"embed.positions", {c.context_length, h}, ParamRole::embedding, 0});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const int layer = c.single_layer_group ? 0 : static_cast<int>(l) + 1;
        out.push_back({block_name(l, "ln1.gamma"), {h}, ParamRole::vector, layer});
        out.push_back({block_name(l, "ln1.beta"), {h}, ParamRole::vector, layer});
        out.push_back({block_name(l, "attn.wq"), {h, h}, ParamRole::matrix, layer});
        out.push_back({block_name(l, "attn.wk"), {h, h}, ParamRole::matrix, layer});
        out.push_back({block_name(l, "attn.wv"), {h, h}, ParamRole::matrix, layer});
        out.push_back({block_name(l, "attn.wo"), {h, h}, ParamRole::matrix, layer});
        out.push_back({block_name(l, "ln2.gamma"), {h}, ParamRole::vector, layer});
        out.push_back({block_name(l, "ln2.beta"), {h}, ParamRole::vector, layer});
        out.push_back({block_name(l, "mlp.w1"), {h, f}, ParamRole::matrix, layer});
        out.push_back({block_name(l, "mlp.w2"), {f, h}, ParamRole::matrix, layer});
    }
    out.push_back({"final_ln.gamma", {h}, ParamRole::vector, head_layer});
    out.push_back({"final_ln.beta", {h}, ParamRole::vector, head_layer});
    out.push_back({"head", {h, c.vocab_size}, ParamRole::head, head_layer});
    return out;
}

std::size_t analytic_param_count(const ModelConfig& c) {
    if (c.family == ModelFamily::mlp) {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < c.widths.size(); ++l) {
            n += c.widths[l] * c.widths[l + 1] + (c.bias ? c.widths[l + 1] : 0);
        }
        return n;
    }
    const std::size_t h = c.hidden_size, f = c.intermediate_size;
    const std::size_t per_block = 4 * h * h + 2 * h * f + 4 * h;
    return c.vocab_size * h + c.context_length * h + c.n_layers * per_block + 2 * h + h * c.vocab_size;
}

NormalStream::NormalStream(std::uint64_t seed) : engine_(seed) {}

double NormalStream::next() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    constexpr double scale = 0x1.0p-53;
    double u1 = 0.0;
    while (u1 <= 0.0) {
        u1 = static_cast<double>(engine_() >> 11) * scale;
    }
    const double u2 = static_cast<double>(engine_() >> 11) * scale;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::shared_ptr<const ad::Graph> make_graph(const ModelConfig& config) {
    config.validate();
    if (config.family == ModelFamily::mlp) {
        return std::make_shared<MlpGraph>(config);
    }
    return std::make_shared<TransformerGraph>(config);
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    Model m;
    m.config = config;
    m.graph = make_graph(config);
    NormalStream normal(seed);
    for (const ParamSpec& spec : param_layout(config)) {
        Tensor value(spec.shape);
        const bool is_gamma = spec.name.ends_with(".gamma");
        if (is_gamma) {
            value.fill(1.0);
        } else if (spec.role != ParamRole::vector) {
            const double std = config.init_std > 0.0 ? config.init_std
                                                     : 1.0 / std::sqrt(static_cast<double>(spec.shape.front()));
            for (double& v : value.data()) {
                v = std * normal.next();
            }
        }
        m.params.add(spec.name, std::move(value), spec.role, spec.layer);
    }
    return m;
}

double model_loss(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch) {
    ad::Tape tape = ad::forward(graph, params, batch);
    return LogitLoss::evaluate(loss, tape.output_value(), batch).value();
}

double model_loss(const Model& model, const ParamTree& params, const Batch& batch) {
    return model_loss(*model.graph, model.config.loss, params, batch);
}

}  // namespace gnlab
