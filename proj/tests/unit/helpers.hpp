#pragma once

#include <cstdint>

#include "gnlab/batch.hpp"
#include "gnlab/data.hpp"
#include "gnlab/models.hpp"
#include "gnlab/param_tree.hpp"
#include "gnlab/tape.hpp"

namespace testutil {

inline gnlab::Tensor random_tensor(const gnlab::Shape& shape, std::uint64_t seed, double scale = 1.0) {
    gnlab::NormalStream n(seed);
    gnlab::Tensor t(shape);
    for (double& v : t.data()) v = scale * n.next();
    return t;
}

inline gnlab::ParamTree random_like(const gnlab::ParamTree& layout, std::uint64_t seed, double scale = 1.0) {
    gnlab::ParamTree t = layout.zeros_like();
    gnlab::NormalStream n(seed);
    for (auto& e : t.entries())
        for (double& v : e.value.data()) v = scale * n.next();
    return t;
}

inline gnlab::Batch dense_batch(std::size_t rows, std::size_t in, std::size_t classes, std::uint64_t seed) {
    std::vector<std::int32_t> y(rows);
    for (std::size_t i = 0; i < rows; ++i) y[i] = static_cast<std::int32_t>(gnlab::splitmix64(seed + i) % classes);
    return gnlab::Batch::dense(random_tensor({rows, in}, seed + 101), std::move(y));
}

inline gnlab::Batch regression_batch(std::size_t rows, std::size_t in, std::size_t out, std::uint64_t seed) {
    return gnlab::Batch::regression(random_tensor({rows, in}, seed + 101), random_tensor({rows, out}, seed + 202));
}

inline gnlab::ModelConfig micro_transformer() {
    gnlab::ModelConfig c;
    c.vocab_size = 7;
    c.hidden_size = 8;
    c.n_heads = 2;
    c.intermediate_size = 12;
    c.n_layers = 2;
    c.context_length = 6;
    c.init_std = 0.3;
    return c;
}

inline gnlab::Batch token_batch(std::size_t seqs, std::size_t ctx, std::size_t vocab, std::uint64_t seed) {
    gnlab::Batch b;
    b.b_seqs = seqs;
    b.context = ctx;
    for (std::size_t i = 0; i < seqs * ctx; ++i)
        b.tokens.push_back(static_cast<std::int32_t>(gnlab::splitmix64(seed * 31 + i) % vocab));
    for (std::size_t i = 0; i < seqs * ctx; ++i)
        b.labels.push_back(i % ctx == ctx - 1 ? gnlab::kMaskedLabel : b.tokens[i + 1]);
    return b;
}

// f(theta) = theta * theta, elementwise; ignores the batch.
class SquareGraph final : public gnlab::ad::Graph {
public:
    gnlab::ad::Var build(gnlab::ad::Tape& t, const gnlab::Batch&) const override {
        const auto p = t.param(0);
        return t.mul(p, p);
    }
};

}  // namespace testutil
