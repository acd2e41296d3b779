#include "gnlab/param_tree.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace gnlab {

const char* role_name(ParamRole role) {
    switch (role) {
        case ParamRole::matrix: return "matrix";
        case ParamRole::embedding: return "embedding";
        case ParamRole::head: return "head";
        case ParamRole::vector: return "vector";
    }
    return "unknown";
}

void ParamTree::add(std::string name, Tensor value, ParamRole role, int layer) {
    if (index_of(name)) {
        throw ShapeError("duplicate parameter name '" + name + "'");
    }
    entries_.push_back(ParamEntry{std::move(name), std::move(value), role, layer});
}

std::size_t ParamTree::num_params() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        n += e.value.numel();
    }
    return n;
}

std::optional<std::size_t> ParamTree::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name == name) {
            return i;
        }
    }
    return std::nullopt;
}

const Tensor& ParamTree::at(std::string_view name) const {
    const auto idx = index_of(name);
    if (!idx) {
        throw ShapeError("no parameter named '" + std::string(name) + "'");
    }
    return entries_[*idx].value;
}

Tensor& ParamTree::at(std::string_view name) {
    return const_cast<Tensor&>(static_cast<const ParamTree&>(*this).at(name));
}

std::vector<int> ParamTree::layers() const {
    std::set<int> ids;
    for (const auto& e : entries_) {
        ids.insert(e.layer);
    }
    return {ids.begin(), ids.end()};
}

std::vector<bool> ParamTree::layer_mask(std::span<const int> layers) const {
    std::vector<bool> mask(entries_.size(), false);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        mask[i] = std::find(layers.begin(), layers.end(), entries_[i].layer) != layers.end();
    }
    return mask;
}

std::vector<double> ParamTree::flatten() const {
    std::vector<double> flat;
    flat.reserve(num_params());
    for (const auto& e : entries_) {
        flat.insert(flat.end(), e.value.data().begin(), e.value.data().end());
    }
    return flat;
}

void ParamTree::unflatten(std::span<const double> flat) {
    if (flat.size() != num_params()) {
        throw ShapeError("unflatten: expected " + std::to_string(num_params()) + " values, got " +
                         std::to_string(flat.size()));
    }
    std::size_t off = 0;
    for (auto& e : entries_) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), e.value.numel(), e.value.ptr());
        off += e.value.numel();
    }
}

ParamTree ParamTree::zeros_like() const {
    ParamTree out;
    out.entries_.reserve(entries_.size());
    for (const auto& e : entries_) {
        out.entries_.push_back(ParamEntry{e.name, Tensor(e.value.shape()), e.role, e.layer});
    }
    return out;
}

bool ParamTree::congruent(const ParamTree& other) const noexcept {
    if (entries_.size() != other.entries_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name != other.entries_[i].name ||
            entries_[i].value.shape() != other.entries_[i].value.shape()) {
            return false;
        }
    }
    return true;
}

void ParamTree::require_congruent(const ParamTree& other, const char* op) const {
    if (!congruent(other)) {
        throw ShapeError(std::string(op) + ": parameter trees are not congruent");
    }
}

ParamTree& ParamTree::operator+=(const ParamTree& other) {
    require_congruent(other, "ParamTree add");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        entries_[i].value += other.entries_[i].value;
    }
    return *this;
}

ParamTree& ParamTree::operator-=(const ParamTree& other) {
    require_congruent(other, "ParamTree subtract");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        entries_[i].value -= other.entries_[i].value;
    }
    return *this;
}

ParamTree& ParamTree::operator*=(double s) {
    for (auto& e : entries_) {
        e.value *= s;
    }
    return *this;
}

ParamTree& ParamTree::axpy(double alpha, const ParamTree& other) {
    require_congruent(other, "ParamTree axpy");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        entries_[i].value.axpy(alpha, other.entries_[i].value);
    }
    return *this;
}

void ParamTree::apply_mask(const std::vector<bool>& keep) {
    if (keep.empty()) {
        return;
    }
    if (keep.size() != entries_.size()) {
        throw ShapeError("apply_mask: mask length does not match tree");
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (!keep[i]) {
            entries_[i].value.fill(0.0);
        }
    }
}

bool ParamTree::all_finite() const noexcept {
    return std::all_of(entries_.begin(), entries_.end(),
                       [](const ParamEntry& e) { return gnlab::all_finite(e.value); });
}

bool ParamTree::operator==(const ParamTree& other) const noexcept {
    if (!congruent(other)) {
        return false;
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (!(entries_[i].value == other.entries_[i].value)) {
            return false;
        }
    }
    return true;
}

ParamTree operator+(ParamTree a, const ParamTree& b) { return a += b; }
ParamTree operator-(ParamTree a, const ParamTree& b) { return a -= b; }
ParamTree operator*(ParamTree a, double s) { return a *= s; }

double dot(const ParamTree& a, const ParamTree& b) {
    a.require_congruent(b, "ParamTree dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += dot(a[i].value, b[i].value);
    }
    return s;
}

double squared_norm(const ParamTree& a) { return dot(a, a); }
double norm(const ParamTree& a) { return std::sqrt(squared_norm(a)); }

double max_abs_diff(const ParamTree& a, const ParamTree& b) {
    a.require_congruent(b, "ParamTree max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, max_abs_diff(a[i].value, b[i].value));
    }
    return m;
}

}  // namespace gnlab
