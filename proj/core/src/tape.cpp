#include "gnlab/tape.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace gnlab::ad {

namespace {

constexpr double kMaskValue = -1e30;

void accumulate(Tensor& slot, const Tensor& contribution) {
    if (slot.empty()) {
        slot = contribution;
    } else {
        slot += contribution;
    }
}

void accumulate(Tensor& slot, Tensor&& contribution) {
    if (slot.empty()) {
        slot = std::move(contribution);
    } else {
        slot += contribution;
    }
}

std::vector<std::size_t> inverse_perm(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        inv[perm[i]] = i;
    }
    return inv;
}

Tensor column_sums(const Tensor& g) {
    const std::size_t rows = g.rows(), cols = g.cols();
    Tensor out(Shape{cols});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[c] += g[r * cols + c];
        }
    }
    return out;
}

// y * (t - rowsum(y * t)) for row-wise softmax outputs y.
Tensor softmax_tangent(const Tensor& y, const Tensor& t) {
    const std::size_t rows = y.rows(), cols = y.cols();
    Tensor out(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.ptr() + r * cols;
        const double* tr = t.ptr() + r * cols;
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            s += yr[c] * tr[c];
        }
        double* o = out.ptr() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = yr[c] * (tr[c] - s);
        }
    }
    return out;
}

// rstd * (t - mean(t) - xhat * mean(t * xhat)) row-wise.
Tensor layer_norm_core(const Tensor& xhat, const Tensor& rstd, const Tensor& t) {
    const std::size_t rows = xhat.rows(), cols = xhat.cols();
    Tensor out(xhat.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xhat.ptr() + r * cols;
        const double* tr = t.ptr() + r * cols;
        double mt = 0.0, mtx = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            mt += tr[c];
            mtx += tr[c] * xr[c];
        }
        mt /= static_cast<double>(cols);
        mtx /= static_cast<double>(cols);
        double* o = out.ptr() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = rstd[r] * (tr[c] - mt - xr[c] * mtx);
        }
    }
    return out;
}

Tensor mul_rows(const Tensor& x, const Tensor& gamma) {
    Tensor out(x.shape());
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = x[r * cols + c] * gamma[c];
        }
    }
    return out;
}

Tensor mask_upper(const Tensor& t) {
    Tensor out = t;
    const std::size_t b = t.dim(0), q = t.dim(1), k = t.dim(2);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t r = 0; r < q; ++r) {
            for (std::size_t c = r + 1; c < k; ++c) {
                out[(i * q + r) * k + c] = 0.0;
            }
        }
    }
    return out;
}

Tensor slice_columns(const Tensor& x, std::size_t begin, std::size_t end) {
    Shape s = x.shape();
    s.back() = end - begin;
    Tensor out(s);
    const std::size_t rows = x.rows(), cols = x.cols(), w = end - begin;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            out[r * w + c] = x[r * cols + begin + c];
        }
    }
    return out;
}

void add_into_columns(Tensor& dst, const Tensor& src, std::size_t begin) {
    const std::size_t rows = dst.rows(), cols = dst.cols(), w = src.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            dst[r * cols + begin + c] += src[r * w + c];
        }
    }
}

Tensor concat_columns(const Tensor& a, const Tensor& b) {
    Shape s = a.shape();
    s.back() = a.cols() + b.cols();
    Tensor out(s);
    const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < ca; ++j) {
            out[r * c + j] = a[r * ca + j];
        }
        for (std::size_t j = 0; j < cb; ++j) {
            out[r * c + ca + j] = b[r * cb + j];
        }
    }
    return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int32_t>& ids) {
    const std::size_t d = table.cols();
    Tensor out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* src = table.ptr() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(src, src + d, out.ptr() + i * d);
    }
    return out;
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::param: return "param";
        case Op::constant: return "constant";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::add_bias: return "add_bias";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::reshape: return "reshape";
        case Op::permute: return "permute";
        case Op::slice_cols: return "slice_cols";
        case Op::concat_cols: return "concat_cols";
        case Op::softmax: return "softmax";
        case Op::layer_norm: return "layer_norm";
        case Op::gelu: return "gelu";
        case Op::embedding: return "embedding";
        case Op::causal_mask: return "causal_mask";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::max: return "max";
    }
    return "unknown";
}

Tensor permute_tensor(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t rank = x.rank();
    if (perm.size() != rank) {
        throw ShapeError("permute: axis count " + std::to_string(perm.size()) + " for tensor " +
                         shape_string(x.shape()));
    }
    std::vector<bool> seen(rank, false);
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (perm[i] >= rank || seen[perm[i]]) {
            throw ShapeError("permute: invalid permutation");
        }
        seen[perm[i]] = true;
        out_shape[i] = x.dim(perm[i]);
    }
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t i = rank; i-- > 1;) {
        in_stride[i - 1] = in_stride[i] * x.dim(i);
    }
    std::vector<std::size_t> step(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        step[i] = in_stride[perm[i]];
    }
    Tensor out(out_shape);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < out.numel(); ++o) {
        out[o] = x[src];
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            src += step[ax];
            if (idx[ax] < out_shape[ax]) {
                break;
            }
            src -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

Tape::Tape(ParamTree params) : params_(std::move(params)), param_nodes_(params_.size(), Var::kNone) {}

Var Tape::push(Node n) {
    check_finite(n);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) {
        throw Error("tape: invalid variable handle");
    }
    return nodes_[v.id];
}

void Tape::check_finite(const Node& n) const {
    if (n.op != Op::param && !all_finite(n.value)) {
        throw NumericalError(std::string("non-finite value produced by op '") + op_name(n.op) + "'");
    }
}

const Tensor& Tape::value(Var v) const {
    const Node& n = node(v);
    return n.op == Op::param ? params_[n.param_index].value : n.value;
}

const Tensor& Tape::output_value() const {
    if (!output_.valid()) {
        throw Error("tape: output not set");
    }
    return value(output_);
}

void Tape::set_output(Var v) {
    node(v);
    output_ = v;
}

Var Tape::param(std::size_t index) {
    if (index >= params_.size()) {
        throw Error("tape: parameter index out of range");
    }
    if (param_nodes_[index] != Var::kNone) {
        return Var{param_nodes_[index]};
    }
    Node n;
    n.op = Op::param;
    n.param_index = index;
    n.needs_grad = true;
    Var v = push(std::move(n));
    param_nodes_[index] = v.id;
    return v;
}

Var Tape::param(std::string_view name) {
    auto idx = params_.index_of(name);
    if (!idx) {
        throw Error("tape: unknown parameter '" + std::string(name) + "'");
    }
    return param(*idx);
}

Var Tape::constant(Tensor value) {
    Node n;
    n.op = Op::constant;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
    Node n;
    n.op = Op::matmul;
    n.in0 = a.id;
    n.in1 = b.id;
    n.flag_a = transpose_a;
    n.flag_b = transpose_b;
    n.value = gnlab::matmul(value(a), value(b), transpose_a, transpose_b);
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb)) {
        throw ShapeError("add: shape mismatch " + shape_string(va.shape()) + " vs " + shape_string(vb.shape()));
    }
    Node n;
    n.op = Op::add;
    n.in0 = a.id;
    n.in1 = b.id;
    n.value = va + vb;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Var Tape::add_bias(Var x, Var bias) {
    const Tensor& vx = value(x);
    const Tensor& vb = value(bias);
    if (vb.rank() != 1 || vb.numel() != vx.cols()) {
        throw ShapeError("add_bias: bias " + shape_string(vb.shape()) + " does not match " +
                         shape_string(vx.shape()));
    }
    Node n;
    n.op = Op::add_bias;
    n.in0 = x.id;
    n.in1 = bias.id;
    n.value = vx;
    const std::size_t rows = vx.rows(), cols = vx.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            n.value[r * cols + c] += vb[c];
        }
    }
    n.needs_grad = node(x).needs_grad || node(bias).needs_grad;
    return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
    Node n;
    n.op = Op::mul;
    n.in0 = a.id;
    n.in1 = b.id;
    n.value = hadamard(value(a), value(b));
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Var Tape::scale(Var x, double s) {
    Node n;
    n.op = Op::scale;
    n.in0 = x.id;
    n.scalar = s;
    n.value = value(x) * s;
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::reshape(Var x, Shape shape) {
    Node n;
    n.op = Op::reshape;
    n.in0 = x.id;
    n.value = value(x).reshaped(std::move(shape));
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::permute(Var x, std::vector<std::size_t> perm) {
    Node n;
    n.op = Op::permute;
    n.in0 = x.id;
    n.value = permute_tensor(value(x), perm);
    n.perm = std::move(perm);
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::slice_cols(Var x, std::size_t begin, std::size_t end) {
    const Tensor& vx = value(x);
    if (begin >= end || end > vx.cols()) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_string(vx.shape()));
    }
    Node n;
    n.op = Op::slice_cols;
    n.in0 = x.id;
    n.i0 = begin;
    n.i1 = end;
    n.value = slice_columns(vx, begin, end);
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    Shape sa = va.shape(), sb = vb.shape();
    if (sa.empty() || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
        throw ShapeError("concat_cols: incompatible " + shape_string(sa) + " and " + shape_string(sb));
    }
    Node n;
    n.op = Op::concat_cols;
    n.in0 = a.id;
    n.in1 = b.id;
    n.i0 = va.cols();
    n.value = concat_columns(va, vb);
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Var Tape::softmax(Var x) {
    const Tensor& vx = value(x);
    Node n;
    n.op = Op::softmax;
    n.in0 = x.id;
    n.value = Tensor(vx.shape());
    const std::size_t rows = vx.rows(), cols = vx.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = vx.ptr() + r * cols;
        double* yr = n.value.ptr() + r * cols;
        double m = xr[0];
        for (std::size_t c = 1; c < cols; ++c) {
            m = std::max(m, xr[c]);
        }
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - m);
            s += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] /= s;
        }
    }
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& vx = value(x);
    const Tensor& vg = value(gamma);
    const Tensor& vb = value(beta);
    const std::size_t rows = vx.rows(), cols = vx.cols();
    if (vg.numel() != cols || vb.numel() != cols) {
        throw ShapeError("layer_norm: gamma/beta " + shape_string(vg.shape()) + "/" + shape_string(vb.shape()) +
                         " for input " + shape_string(vx.shape()));
    }
    Node n;
    n.op = Op::layer_norm;
    n.in0 = x.id;
    n.in1 = gamma.id;
    n.in2 = beta.id;
    n.scalar = eps;
    n.saved = Tensor(vx.shape());
    n.saved2 = Tensor(Shape{rows});
    n.value = Tensor(vx.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = vx.ptr() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            mu += xr[c];
        }
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            var += (xr[c] - mu) * (xr[c] - mu);
        }
        var /= static_cast<double>(cols);
        const double rstd = 1.0 / std::sqrt(var + eps);
        n.saved2[r] = rstd;
        for (std::size_t c = 0; c < cols; ++c) {
            const double xh = (xr[c] - mu) * rstd;
            n.saved[r * cols + c] = xh;
            n.value[r * cols + c] = xh * vg[c] + vb[c];
        }
    }
    n.needs_grad = node(x).needs_grad || node(gamma).needs_grad || node(beta).needs_grad;
    return push(std::move(n));
}

Var Tape::gelu(Var x) {
    const Tensor& vx = value(x);
    Node n;
    n.op = Op::gelu;
    n.in0 = x.id;
    n.value = Tensor(vx.shape());
    n.saved = Tensor(vx.shape());
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < vx.numel(); ++i) {
        const double v = vx[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        n.value[i] = v * cdf;
        n.saved[i] = cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
    }
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::embedding(Var table, std::vector<std::int32_t> ids) {
    const Tensor& vt = value(table);
    if (vt.rank() != 2) {
        throw ShapeError("embedding: table must be rank 2, got " + shape_string(vt.shape()));
    }
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vt.dim(0)) {
            throw ShapeError("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(vt.dim(0)));
        }
    }
    Node n;
    n.op = Op::embedding;
    n.in0 = table.id;
    n.value = gather_rows(vt, ids);
    n.ids = std::move(ids);
    n.needs_grad = node(table).needs_grad;
    return push(std::move(n));
}

Var Tape::causal_mask(Var scores) {
    const Tensor& vs = value(scores);
    if (vs.rank() != 3 || vs.dim(1) != vs.dim(2)) {
        throw ShapeError("causal_mask: expects [B x T x T], got " + shape_string(vs.shape()));
    }
    Node n;
    n.op = Op::causal_mask;
    n.in0 = scores.id;
    n.value = vs;
    const std::size_t b = vs.dim(0), t = vs.dim(1);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t r = 0; r < t; ++r) {
            for (std::size_t c = r + 1; c < t; ++c) {
                n.value[(i * t + r) * t + c] = kMaskValue;
            }
        }
    }
    n.needs_grad = node(scores).needs_grad;
    return push(std::move(n));
}

Var Tape::sum(Var x) {
    Node n;
    n.op = Op::sum;
    n.in0 = x.id;
    n.value = Tensor::scalar(gnlab::sum(value(x)));
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::mean(Var x) {
    const Tensor& vx = value(x);
    Node n;
    n.op = Op::mean;
    n.in0 = x.id;
    n.value = Tensor::scalar(gnlab::sum(vx) / static_cast<double>(vx.numel()));
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::max(Var x) {
    const Tensor& vx = value(x);
    const std::size_t rows = vx.rows(), cols = vx.cols();
    Node n;
    n.op = Op::max;
    n.in0 = x.id;
    n.value = Tensor(Shape{rows});
    n.saved = Tensor(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cols; ++c) {
            if (vx[r * cols + c] > vx[r * cols + best]) {
                best = c;
            }
        }
        n.value[r] = vx[r * cols + best];
        n.saved[r] = static_cast<double>(best);
    }
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Tensor Tape::jvp(const ParamTree& direction) const {
    params_.require_congruent(direction, "jvp");
    if (!output_.valid()) {
        throw Error("tape: output not set");
    }
    // An empty tangent means "exactly zero"; whole subgraphs that do not
    // depend on a nonzero direction entry are skipped.
    std::vector<Tensor> tan(nodes_.size());
    for (std::size_t i = 0; i <= output_.id; ++i) {
        const Node& n = nodes_[i];
        if (!n.needs_grad) {
            continue;
        }
        auto has = [&](std::uint32_t id) { return id != Var::kNone && !tan[id].empty(); };
        auto val = [&](std::uint32_t id) -> const Tensor& { return value(Var{id}); };
        Tensor& t = tan[i];
        switch (n.op) {
            case Op::param: {
                const Tensor& d = direction[n.param_index].value;
                if (!is_all_zero(d)) {
                    t = d;
                }
                break;
            }
            case Op::constant:
                break;
            case Op::matmul:
                if (has(n.in0) || has(n.in1)) {
                    t = Tensor(n.value.shape());
                    if (has(n.in0)) {
                        matmul_accumulate(t, tan[n.in0], val(n.in1), n.flag_a, n.flag_b);
                    }
                    if (has(n.in1)) {
                        matmul_accumulate(t, val(n.in0), tan[n.in1], n.flag_a, n.flag_b);
                    }
                }
                break;
            case Op::add:
                if (has(n.in0)) {
                    t = tan[n.in0];
                }
                if (has(n.in1)) {
                    accumulate(t, tan[n.in1]);
                }
                break;
            case Op::add_bias:
                if (has(n.in0)) {
                    t = tan[n.in0];
                }
                if (has(n.in1)) {
                    if (t.empty()) {
                        t = Tensor(n.value.shape());
                    }
                    const Tensor& tb = tan[n.in1];
                    const std::size_t rows = t.rows(), cols = t.cols();
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < cols; ++c) {
                            t[r * cols + c] += tb[c];
                        }
                    }
                }
                break;
            case Op::mul:
                if (has(n.in0)) {
                    t = hadamard(tan[n.in0], val(n.in1));
                }
                if (has(n.in1)) {
                    accumulate(t, hadamard(val(n.in0), tan[n.in1]));
                }
                break;
            case Op::scale:
                if (has(n.in0)) {
                    t = tan[n.in0] * n.scalar;
                }
                break;
            case Op::reshape:
                if (has(n.in0)) {
                    t = tan[n.in0].reshaped(n.value.shape());
                }
                break;
            case Op::permute:
                if (has(n.in0)) {
                    t = permute_tensor(tan[n.in0], n.perm);
                }
                break;
            case Op::slice_cols:
                if (has(n.in0)) {
                    t = slice_columns(tan[n.in0], n.i0, n.i1);
                }
                break;
            case Op::concat_cols:
                if (has(n.in0) || has(n.in1)) {
                    const Tensor ta = has(n.in0) ? tan[n.in0] : Tensor::zeros_like(val(n.in0));
                    const Tensor tb = has(n.in1) ? tan[n.in1] : Tensor::zeros_like(val(n.in1));
                    t = concat_columns(ta, tb);
                }
                break;
            case Op::softmax:
                if (has(n.in0)) {
                    t = softmax_tangent(n.value, tan[n.in0]);
                }
                break;
            case Op::layer_norm: {
                const Tensor& gamma = val(n.in1);
                if (has(n.in0)) {
                    t = mul_rows(layer_norm_core(n.saved, n.saved2, tan[n.in0]), gamma);
                }
                if (has(n.in1)) {
                    accumulate(t, mul_rows(n.saved, tan[n.in1]));
                }
                if (has(n.in2)) {
                    if (t.empty()) {
                        t = Tensor(n.value.shape());
                    }
                    const Tensor& tb = tan[n.in2];
                    const std::size_t rows = t.rows(), cols = t.cols();
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < cols; ++c) {
                            t[r * cols + c] += tb[c];
                        }
                    }
                }
                break;
            }
            case Op::gelu:
                if (has(n.in0)) {
                    t = hadamard(tan[n.in0], n.saved);
                }
                break;
            case Op::embedding:
                if (has(n.in0)) {
                    t = gather_rows(tan[n.in0], n.ids);
                }
                break;
            case Op::causal_mask:
                if (has(n.in0)) {
                    t = mask_upper(tan[n.in0]);
                }
                break;
            case Op::sum:
                if (has(n.in0)) {
                    t = Tensor::scalar(gnlab::sum(tan[n.in0]));
                }
                break;
            case Op::mean:
                if (has(n.in0)) {
                    t = Tensor::scalar(gnlab::sum(tan[n.in0]) / static_cast<double>(tan[n.in0].numel()));
                }
                break;
            case Op::max:
                if (has(n.in0)) {
                    const Tensor& tx = tan[n.in0];
                    const std::size_t cols = tx.cols();
                    t = Tensor(n.value.shape());
                    for (std::size_t r = 0; r < t.numel(); ++r) {
                        t[r] = tx[r * cols + static_cast<std::size_t>(n.saved[r])];
                    }
                }
                break;
        }
    }
    const Tensor& out = tan[output_.id];
    return out.empty() ? Tensor::zeros_like(output_value()) : out;
}

ParamTree Tape::vjp(const Tensor& cotangent) const {
    return vjp(cotangent, std::vector<bool>(params_.size(), true));
}

ParamTree Tape::vjp(const Tensor& cotangent, const std::vector<bool>& active) const {
    if (!output_.valid()) {
        throw Error("tape: output not set");
    }
    if (!cotangent.same_shape(output_value())) {
        throw ShapeError("vjp: cotangent " + shape_string(cotangent.shape()) + " does not match output " +
                         shape_string(output_value().shape()));
    }
    if (active.size() != params_.size()) {
        throw ShapeError("vjp: active mask size mismatch");
    }
    // live[i]: node i depends on at least one active parameter.
    std::vector<bool> live(output_.id + 1, false);
    for (std::size_t i = 0; i <= output_.id; ++i) {
        const Node& n = nodes_[i];
        if (n.op == Op::param) {
            live[i] = active[n.param_index];
        } else if (n.needs_grad) {
            live[i] = (n.in0 != Var::kNone && live[n.in0]) || (n.in1 != Var::kNone && live[n.in1]) ||
                      (n.in2 != Var::kNone && live[n.in2]);
        }
    }
    ParamTree grads = params_.zeros_like();
    if (!live[output_.id]) {
        return grads;
    }
    std::vector<Tensor> adj(output_.id + 1);
    adj[output_.id] = cotangent;
    auto wants = [&](std::uint32_t id) { return id != Var::kNone && live[id]; };
    auto val = [&](std::uint32_t id) -> const Tensor& { return value(Var{id}); };
    for (std::size_t i = output_.id + 1; i-- > 0;) {
        if (!live[i] || adj[i].empty()) {
            continue;
        }
        const Node& n = nodes_[i];
        Tensor g = std::move(adj[i]);
        switch (n.op) {
            case Op::param:
                grads[n.param_index].value += g;
                break;
            case Op::constant:
                break;
            case Op::matmul: {
                const Tensor& a = val(n.in0);
                const Tensor& b = val(n.in1);
                const bool ta = n.flag_a, tb = n.flag_b;
                if (wants(n.in0)) {
                    Tensor da = !ta ? gnlab::matmul(g, b, false, !tb) : gnlab::matmul(b, g, tb, true);
                    accumulate(adj[n.in0], std::move(da));
                }
                if (wants(n.in1)) {
                    Tensor db = !tb ? gnlab::matmul(a, g, !ta, false) : gnlab::matmul(g, a, true, ta);
                    accumulate(adj[n.in1], std::move(db));
                }
                break;
            }
            case Op::add:
                if (wants(n.in0)) {
                    accumulate(adj[n.in0], g);
                }
                if (wants(n.in1)) {
                    accumulate(adj[n.in1], g);
                }
                break;
            case Op::add_bias:
                if (wants(n.in1)) {
                    accumulate(adj[n.in1], column_sums(g));
                }
                if (wants(n.in0)) {
                    accumulate(adj[n.in0], std::move(g));
                }
                break;
            case Op::mul:
                if (wants(n.in0)) {
                    accumulate(adj[n.in0], hadamard(g, val(n.in1)));
                }
                if (wants(n.in1)) {
                    accumulate(adj[n.in1], hadamard(g, val(n.in0)));
                }
                break;
            case Op::scale:
                accumulate(adj[n.in0], g * n.scalar);
                break;
            case Op::reshape:
                accumulate(adj[n.in0], g.reshaped(val(n.in0).shape()));
                break;
            case Op::permute:
                accumulate(adj[n.in0], permute_tensor(g, inverse_perm(n.perm)));
                break;
            case Op::slice_cols: {
                Tensor& slot = adj[n.in0];
                if (slot.empty()) {
                    slot = Tensor::zeros_like(val(n.in0));
                }
                add_into_columns(slot, g, n.i0);
                break;
            }
            case Op::concat_cols:
                if (wants(n.in0)) {
                    accumulate(adj[n.in0], slice_columns(g, 0, n.i0));
                }
                if (wants(n.in1)) {
                    accumulate(adj[n.in1], slice_columns(g, n.i0, g.cols()));
                }
                break;
            case Op::softmax:
                accumulate(adj[n.in0], softmax_tangent(n.value, g));
                break;
            case Op::layer_norm:
                if (wants(n.in1)) {
                    accumulate(adj[n.in1], column_sums(hadamard(g, n.saved)).reshaped(val(n.in1).shape()));
                }
                if (wants(n.in2)) {
                    accumulate(adj[n.in2], column_sums(g).reshaped(val(n.in2).shape()));
                }
                if (wants(n.in0)) {
                    accumulate(adj[n.in0], layer_norm_core(n.saved, n.saved2, mul_rows(g, val(n.in1))));
                }
                break;
            case Op::gelu:
                accumulate(adj[n.in0], hadamard(g, n.saved));
                break;
            case Op::embedding: {
                Tensor& slot = adj[n.in0];
                if (slot.empty()) {
                    slot = Tensor::zeros_like(val(n.in0));
                }
                const std::size_t d = slot.cols();
                for (std::size_t r = 0; r < n.ids.size(); ++r) {
                    double* dst = slot.ptr() + static_cast<std::size_t>(n.ids[r]) * d;
                    const double* src = g.ptr() + r * d;
                    for (std::size_t c = 0; c < d; ++c) {
                        dst[c] += src[c];
                    }
                }
                break;
            }
            case Op::causal_mask:
                accumulate(adj[n.in0], mask_upper(g));
                break;
            case Op::sum:
                accumulate(adj[n.in0], Tensor(val(n.in0).shape(), g.item()));
                break;
            case Op::mean: {
                const Tensor& x = val(n.in0);
                accumulate(adj[n.in0], Tensor(x.shape(), g.item() / static_cast<double>(x.numel())));
                break;
            }
            case Op::max: {
                const Tensor& x = val(n.in0);
                Tensor& slot = adj[n.in0];
                if (slot.empty()) {
                    slot = Tensor::zeros_like(x);
                }
                const std::size_t cols = x.cols();
                for (std::size_t r = 0; r < g.numel(); ++r) {
                    slot[r * cols + static_cast<std::size_t>(n.saved[r])] += g[r];
                }
                break;
            }
        }
    }
    return grads;
}

Tape forward(const Graph& graph, const ParamTree& params, const Batch& batch) {
    Tape tape(params);
    Var out = graph.build(tape, batch);
    tape.set_output(out);
    return tape;
}

Tensor jvp(const Graph& graph, const ParamTree& params_at, const Batch& batch, const ParamTree& direction) {
    params_at.require_congruent(direction, "jvp");
    return forward(graph, params_at, batch).jvp(direction);
}

}  // namespace gnlab::ad
