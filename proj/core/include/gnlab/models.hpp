#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "gnlab/losses.hpp"
#include "gnlab/param_tree.hpp"
#include "gnlab/tape.hpp"

namespace gnlab {

enum class ModelFamily : std::uint8_t { transformer, mlp };

struct ModelConfig {
    ModelFamily family = ModelFamily::transformer;
    std::size_t hidden_size = 64;
    std::size_t intermediate_size = 128;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 256;
    std::size_t context_length = 128;
    double init_std = 0.02;

    // mlp family: widths[0] inputs ... widths.back() outputs
    std::vector<std::size_t> widths;
    bool bias = true;
    bool activation = true;  // gelu between linear layers
    bool single_layer_group = false;
    LossKind loss = LossKind::cross_entropy;

    void validate() const;

    /// "tiny", "45M", "150M"
    static ModelConfig preset(std::string_view name);
    static ModelConfig mlp(std::vector<std::size_t> widths, bool bias = true, LossKind loss = LossKind::cross_entropy);
};

struct ParamSpec {
    std::string name;
    Shape shape;
    ParamRole role;
    int layer;
};

/// Parameter names, shapes and groups without allocating values.
std::vector<ParamSpec> param_layout(const ModelConfig& config);
std::size_t analytic_param_count(const ModelConfig& config);

struct Model {
    ModelConfig config;
    std::shared_ptr<const ad::Graph> graph;
    ParamTree params;
};

/// Deterministic in (config, seed).
Model build_model(const ModelConfig& config, std::uint64_t seed);

std::shared_ptr<const ad::Graph> make_graph(const ModelConfig& config);

/// Loss of the model output on one batch.
double model_loss(const Model& model, const ParamTree& params, const Batch& batch);
double model_loss(const ad::Graph& graph, LossKind loss, const ParamTree& params, const Batch& batch);

/// Deterministic normal draws (Box-Muller over mt19937_64) so initialization
/// does not depend on the standard library's distribution implementation.
class NormalStream {
public:
    explicit NormalStream(std::uint64_t seed);
    double next();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace gnlab
