#include "gnlab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gnlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

struct GemmDims {
    std::size_t batch = 1;
    std::size_t a_rows = 0, a_cols = 0, b_rows = 0, b_cols = 0;
    std::size_t m = 0, k = 0, n = 0;
    bool batched = false;
};

GemmDims gemm_dims(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    GemmDims d;
    if (a.rank() == 2 && b.rank() == 2) {
        d.a_rows = a.dim(0);
        d.a_cols = a.dim(1);
        d.b_rows = b.dim(0);
        d.b_cols = b.dim(1);
    } else if (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0)) {
        d.batched = true;
        d.batch = a.dim(0);
        d.a_rows = a.dim(1);
        d.a_cols = a.dim(2);
        d.b_rows = b.dim(1);
        d.b_cols = b.dim(2);
    } else {
        throw ShapeError("matmul: unsupported operand shapes " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    d.m = ta ? d.a_cols : d.a_rows;
    d.k = ta ? d.a_rows : d.a_cols;
    const std::size_t kb = tb ? d.b_cols : d.b_rows;
    d.n = tb ? d.b_rows : d.b_cols;
    if (d.k != kb) {
        throw ShapeError("matmul: inner extents disagree " + shape_string(a.shape()) +
                         (ta ? "^T" : "") + " x " + shape_string(b.shape()) + (tb ? "^T" : ""));
    }
    return d;
}

void gemm(double* out, const double* a, const double* b, const GemmDims& d, bool ta, bool tb,
          bool accumulate) {
    ConstMap A(a, static_cast<Eigen::Index>(d.a_rows), static_cast<Eigen::Index>(d.a_cols));
    ConstMap B(b, static_cast<Eigen::Index>(d.b_rows), static_cast<Eigen::Index>(d.b_cols));
    MutMap C(out, static_cast<Eigen::Index>(d.m), static_cast<Eigen::Index>(d.n));
    if (!accumulate) {
        C.setZero();
    }
    if (!ta && !tb) {
        C.noalias() += A * B;
    } else if (ta && !tb) {
        C.noalias() += A.transpose() * B;
    } else if (!ta && tb) {
        C.noalias() += A * B.transpose();
    } else {
        C.noalias() += A.transpose() * B.transpose();
    }
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << 'x';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto e : shape_) {
        if (e == 0) {
            throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
        }
    }
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_) {
        if (e == 0) {
            throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
        }
    }
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("tensor buffer length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
    }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::vector(std::span<const double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("Tensor::matrix: ragged rows");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        t(i, i) = 1.0;
    }
    return t;
}

Tensor Tensor::diag(std::span<const double> values) {
    const std::size_t n = values.size();
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        t(i, i) = values[i];
    }
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
    }
    return shape_[axis];
}

std::size_t Tensor::rows() const noexcept {
    if (shape_.size() < 2) {
        return 1;
    }
    return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item() on tensor with shape " + shape_string(shape_));
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape(std::move(shape));
    return t;
}

void Tensor::reshape(Shape shape) {
    if (shape_numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
}

void Tensor::fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += other.data_[i];
    }
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require_same_shape(*this, other, "subtract");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] -= other.data_[i];
    }
    return *this;
}

Tensor& Tensor::operator*=(double s) noexcept {
    for (auto& v : data_) {
        v *= s;
    }
    return *this;
}

Tensor& Tensor::axpy(double alpha, const Tensor& other) {
    require_same_shape(*this, other, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += alpha * other.data_[i];
    }
    return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }
Tensor operator*(double s, Tensor a) { return a *= s; }

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] *= b[i];
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
    const GemmDims d = gemm_dims(a, b, transpose_a, transpose_b);
    Tensor out = d.batched ? Tensor(Shape{d.batch, d.m, d.n}) : Tensor(Shape{d.m, d.n});
    const std::size_t sa = d.a_rows * d.a_cols, sb = d.b_rows * d.b_cols, sc = d.m * d.n;
    for (std::size_t i = 0; i < d.batch; ++i) {
        gemm(out.ptr() + i * sc, a.ptr() + i * sa, b.ptr() + i * sb, d, transpose_a, transpose_b, true);
    }
    return out;
}

void matmul_accumulate(Tensor& out, const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
    const GemmDims d = gemm_dims(a, b, transpose_a, transpose_b);
    const Shape expect = d.batched ? Shape{d.batch, d.m, d.n} : Shape{d.m, d.n};
    if (out.shape() != expect) {
        throw ShapeError("matmul_accumulate: output " + shape_string(out.shape()) + " expected " +
                         shape_string(expect));
    }
    const std::size_t sa = d.a_rows * d.a_cols, sb = d.b_rows * d.b_cols, sc = d.m * d.n;
    for (std::size_t i = 0; i < d.batch; ++i) {
        gemm(out.ptr() + i * sc, a.ptr() + i * sa, b.ptr() + i * sb, d, transpose_a, transpose_b, true);
    }
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose expects rank 2, got " + shape_string(a.shape()));
    }
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw ShapeError("dot: size mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    return s;
}

double frobenius_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.data()) {
        m = std::max(m, std::abs(v));
    }
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

double trace(const Tensor& a) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
        throw ShapeError("trace expects a square matrix, got " + shape_string(a.shape()));
    }
    double t = 0.0;
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        t += a(i, i);
    }
    return t;
}

bool all_finite(const Tensor& a) noexcept {
    for (double v : a.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

bool is_all_zero(const Tensor& a) noexcept {
    for (double v : a.data()) {
        if (v != 0.0) {
            return false;
        }
    }
    return true;
}

}  // namespace gnlab
