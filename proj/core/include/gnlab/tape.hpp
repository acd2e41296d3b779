#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string_view>
#include <vector>

#include "gnlab/batch.hpp"
#include "gnlab/param_tree.hpp"
#include "gnlab/tensor.hpp"

namespace gnlab::ad {

/// Handle to a node on a Tape.
struct Var {
    static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
    std::uint32_t id = kNone;
    bool valid() const noexcept { return id != kNone; }
};

enum class Op : std::uint8_t {
    param,
    constant,
    matmul,
    add,
    add_bias,
    mul,
    scale,
    reshape,
    permute,
    slice_cols,
    concat_cols,
    softmax,
    layer_norm,
    gelu,
    embedding,
    causal_mask,
    sum,
    mean,
    max,
};

const char* op_name(Op op);

/// Recorded forward pass at a fixed parameter point.
///
/// Every op computes its value eagerly and keeps whatever it needs for both
/// reverse mode (`vjp`) and forward mode (`jvp`). A Tape is immutable once
/// the output is set; vjp/jvp are const and may be called any number of
/// times.
class Tape {
public:
    explicit Tape(ParamTree params);

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) noexcept = default;
    Tape& operator=(Tape&&) noexcept = default;

    Var param(std::size_t index);
    Var param(std::string_view name);
    Var constant(Tensor value);

    // C = op(A) op(B); rank 2, or rank 3 batched over the leading axis.
    Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
    Var add(Var a, Var b);
    // x[rows x n] + bias[n] broadcast over rows.
    Var add_bias(Var x, Var bias);
    Var mul(Var a, Var b);
    Var scale(Var x, double s);
    Var reshape(Var x, Shape shape);
    Var permute(Var x, std::vector<std::size_t> perm);
    Var transpose(Var x) { return permute(x, {1, 0}); }
    // Columns [begin, end) of the trailing axis.
    Var slice_cols(Var x, std::size_t begin, std::size_t end);
    Var concat_cols(Var a, Var b);
    Var softmax(Var x);
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
    Var gelu(Var x);
    // table[V x D] gathered at ids -> [ids.size() x D]
    Var embedding(Var table, std::vector<std::int32_t> ids);
    // scores[B x T x T]: entries with key index > query index are masked out.
    Var causal_mask(Var scores);
    Var sum(Var x);
    Var mean(Var x);
    // max over the trailing axis -> [rows]
    Var max(Var x);

    void set_output(Var v);
    Var output() const noexcept { return output_; }
    const Tensor& output_value() const;

    const Tensor& value(Var v) const;
    const Shape& shape(Var v) const { return value(v).shape(); }
    const ParamTree& params() const noexcept { return params_; }
    std::size_t node_count() const noexcept { return nodes_.size(); }

    /// Jᵀ·cotangent, laid out like the parameters.
    ParamTree vjp(const Tensor& cotangent) const;
    /// Same, restricted to entries whose flag is true (others come back zero
    /// and their subgraphs are skipped where possible).
    ParamTree vjp(const Tensor& cotangent, const std::vector<bool>& active) const;
    /// J·direction, shaped like the output.
    Tensor jvp(const ParamTree& direction) const;

private:
    struct Node {
        Op op = Op::constant;
        std::uint32_t in0 = Var::kNone;
        std::uint32_t in1 = Var::kNone;
        std::uint32_t in2 = Var::kNone;
        bool needs_grad = false;
        bool flag_a = false;
        bool flag_b = false;
        double scalar = 0.0;
        std::size_t i0 = 0;
        std::size_t i1 = 0;
        std::size_t param_index = 0;
        Tensor value;
        Tensor saved;   // op-specific: xhat, argmax, ...
        Tensor saved2;  // op-specific: rstd
        std::vector<std::size_t> perm;
        std::vector<std::int32_t> ids;
    };

    Var push(Node node);
    const Node& node(Var v) const;
    void check_finite(const Node& n) const;

    ParamTree params_;
    std::vector<Node> nodes_;
    std::vector<std::uint32_t> param_nodes_;
    Var output_;
};

/// A model as a function from (parameters, batch) to outputs, expressed by
/// recording ops on a Tape.
class Graph {
public:
    virtual ~Graph() = default;
    virtual Var build(Tape& tape, const Batch& batch) const = 0;
};

/// Runs the graph at `params` and returns the tape; the output is
/// `tape.output_value()`.
Tape forward(const Graph& graph, const ParamTree& params, const Batch& batch);

/// J·direction at `params_at` for a fresh forward pass.
Tensor jvp(const Graph& graph, const ParamTree& params_at, const Batch& batch, const ParamTree& direction);

inline ParamTree vjp(const Tape& tape, const Tensor& cotangent) { return tape.vjp(cotangent); }

Tensor permute_tensor(const Tensor& x, const std::vector<std::size_t>& perm);

}  // namespace gnlab::ad
