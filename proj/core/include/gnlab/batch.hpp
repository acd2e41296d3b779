#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "gnlab/tensor.hpp"

namespace gnlab {

inline constexpr std::int32_t kMaskedLabel = -1;

/// One batch of model inputs.
///
/// Token batches fill `tokens`/`labels` as [b_seqs x context] row-major;
/// dense batches (MLP family) fill `features` and either `labels` (one per
/// row, classification) or `targets` (regression). `labels[i] ==
/// kMaskedLabel` excludes that position from the loss.
struct Batch {
    std::size_t b_seqs = 0;
    std::size_t context = 0;
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> labels;
    Tensor features;
    Tensor targets;
    std::uint64_t source_offset = 0;
    std::uint64_t epoch = 0;

    bool is_token_batch() const noexcept { return !tokens.empty(); }
    /// Rows of model output: one per token position, or one per feature row.
    std::size_t output_rows() const noexcept;
    std::size_t unmasked_labels() const noexcept;
    std::size_t token_count() const noexcept { return b_seqs * context; }

    /// Sequences [begin, end) as an independent batch.
    Batch slice(std::size_t begin, std::size_t end) const;

    static Batch dense(Tensor features, std::vector<std::int32_t> labels);
    static Batch regression(Tensor features, Tensor targets);
};

}  // namespace gnlab
