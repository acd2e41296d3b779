#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gnlab/tensor.hpp"

namespace gnlab {

/// How an optimizer should treat a parameter. Muon orthogonalizes `matrix`
/// entries only; everything else takes the AdamW path.
enum class ParamRole : std::uint8_t { matrix, embedding, head, vector };

const char* role_name(ParamRole role);

struct ParamEntry {
    std::string name;
    Tensor value;
    ParamRole role = ParamRole::matrix;
    int layer = 0;  // layerwise partition id
};

/// Ordered, named collection of tensors. Used for parameters, directions,
/// gradients and any other quantity laid out like the parameters.
class ParamTree {
public:
    ParamTree() = default;

    void add(std::string name, Tensor value, ParamRole role, int layer);

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    std::size_t num_params() const noexcept;

    ParamEntry& operator[](std::size_t i) { return entries_[i]; }
    const ParamEntry& operator[](std::size_t i) const { return entries_[i]; }
    std::span<ParamEntry> entries() noexcept { return entries_; }
    std::span<const ParamEntry> entries() const noexcept { return entries_; }

    std::optional<std::size_t> index_of(std::string_view name) const;
    const Tensor& at(std::string_view name) const;
    Tensor& at(std::string_view name);

    /// Distinct layer ids in ascending order.
    std::vector<int> layers() const;
    /// Per-entry membership flags for a set of layer ids.
    std::vector<bool> layer_mask(std::span<const int> layers) const;

    std::vector<double> flatten() const;
    void unflatten(std::span<const double> flat);

    ParamTree zeros_like() const;
    bool congruent(const ParamTree& other) const noexcept;
    void require_congruent(const ParamTree& other, const char* op) const;

    ParamTree& operator+=(const ParamTree& other);
    ParamTree& operator-=(const ParamTree& other);
    ParamTree& operator*=(double s);
    ParamTree& axpy(double alpha, const ParamTree& other);

    /// Zero every entry whose flag is false.
    void apply_mask(const std::vector<bool>& keep);

    bool all_finite() const noexcept;
    bool operator==(const ParamTree& other) const noexcept;

private:
    std::vector<ParamEntry> entries_;
};

ParamTree operator+(ParamTree a, const ParamTree& b);
ParamTree operator-(ParamTree a, const ParamTree& b);
ParamTree operator*(ParamTree a, double s);

double dot(const ParamTree& a, const ParamTree& b);
double squared_norm(const ParamTree& a);
double norm(const ParamTree& a);
double max_abs_diff(const ParamTree& a, const ParamTree& b);

/// Named tensors without layout metadata, used for optimizer state and
/// checkpoint sections.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

}  // namespace gnlab
