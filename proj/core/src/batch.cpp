#include "gnlab/batch.hpp"

#include <algorithm>

namespace gnlab {

std::size_t Batch::output_rows() const noexcept {
    if (is_token_batch()) {
        return tokens.size();
    }
    return features.empty() ? 0 : features.rows();
}

std::size_t Batch::unmasked_labels() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(labels.begin(), labels.end(), [](std::int32_t l) { return l != kMaskedLabel; }));
}

Batch Batch::slice(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > b_seqs) {
        throw ShapeError("Batch::slice: bad range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") of " + std::to_string(b_seqs));
    }
    Batch out;
    out.b_seqs = end - begin;
    out.context = context;
    out.source_offset = source_offset + begin * context;
    out.epoch = epoch;
    const std::size_t per = context;
    auto cut = [&](const std::vector<std::int32_t>& v) {
        if (v.empty()) {
            return std::vector<std::int32_t>{};
        }
        return std::vector<std::int32_t>(v.begin() + static_cast<std::ptrdiff_t>(begin * per),
                                         v.begin() + static_cast<std::ptrdiff_t>(end * per));
    };
    out.tokens = cut(tokens);
    out.labels = cut(labels);
    auto cut_rows = [&](const Tensor& t) {
        if (t.empty()) {
            return Tensor{};
        }
        const std::size_t c = t.cols();
        std::vector<double> rows(t.data().begin() + static_cast<std::ptrdiff_t>(begin * per * c),
                                 t.data().begin() + static_cast<std::ptrdiff_t>(end * per * c));
        return Tensor(Shape{(end - begin) * per, c}, std::move(rows));
    };
    out.features = cut_rows(features);
    out.targets = cut_rows(targets);
    return out;
}

Batch Batch::dense(Tensor features, std::vector<std::int32_t> labels) {
    Batch b;
    b.b_seqs = features.rows();
    b.context = 1;
    if (!labels.empty() && labels.size() != b.b_seqs) {
        throw ShapeError("Batch::dense: one label per feature row required");
    }
    b.features = std::move(features);
    b.labels = std::move(labels);
    return b;
}

Batch Batch::regression(Tensor features, Tensor targets) {
    Batch b;
    b.b_seqs = features.rows();
    b.context = 1;
    if (targets.rows() != b.b_seqs) {
        throw ShapeError("Batch::regression: one target row per feature row required");
    }
    b.features = std::move(features);
    b.targets = std::move(targets);
    return b;
}

}  // namespace gnlab
