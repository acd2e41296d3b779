#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "gnlab/errors.hpp"

namespace gnlab {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Rank-0 tensors are scalars with one element. Every constructor enforces
/// `product(shape) == data.size()`.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor vector(std::span<const double> values);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);
    static Tensor diag(std::span<const double> values);
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty() && shape_.empty(); }

    /// Product of all extents except the last; 1 for rank 0.
    std::size_t rows() const noexcept;
    /// Last extent; 1 for rank 0.
    std::size_t cols() const noexcept;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* ptr() noexcept { return data_.data(); }
    const double* ptr() const noexcept { return data_.data(); }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // Row/column access treating the tensor as rows() x cols().
    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    double item() const;

    Tensor reshaped(Shape shape) const;
    void reshape(Shape shape);
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    void fill(double value) noexcept;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s) noexcept;
    /// this += alpha * other
    Tensor& axpy(double alpha, const Tensor& other);

    bool operator==(const Tensor& other) const noexcept = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);
Tensor operator*(double s, Tensor a);

Tensor hadamard(const Tensor& a, const Tensor& b);

/// Matrix product. Rank-2 operands give a rank-2 result; two rank-3 operands
/// with equal leading extent are multiplied batch by batch. The transpose
/// flags apply to the trailing two axes.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

/// Accumulating form: out += op(a) * op(b). `out` must already have the
/// result shape.
void matmul_accumulate(Tensor& out, const Tensor& a, const Tensor& b, bool transpose_a = false,
                       bool transpose_b = false);

Tensor transpose(const Tensor& a);

double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double frobenius_norm(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double trace(const Tensor& a);
bool all_finite(const Tensor& a) noexcept;
bool is_all_zero(const Tensor& a) noexcept;

}  // namespace gnlab
