#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gnlab/batch.hpp"

namespace gnlab {

/// A token stream addressed by absolute position. Implementations are pure
/// functions of (construction arguments, position).
class DataSource {
public:
    virtual ~DataSource() = default;
    virtual std::int32_t token_at(std::uint64_t position) const = 0;
    virtual std::size_t vocab_size() const = 0;
    /// Length of one pass over a finite source; 0 for unbounded generators.
    virtual std::uint64_t period() const { return 0; }
    virtual std::string name() const = 0;
    /// Best achievable per-token loss in nats, when known in closed form.
    virtual std::optional<double> achievable_loss() const { return std::nullopt; }
};

/// Raw bytes of a file (or an in-memory string), vocabulary 256. Reading past
/// the end wraps around and bumps the epoch.
class TextSource final : public DataSource {
public:
    static TextSource from_file(const std::string& path);
    explicit TextSource(std::string bytes, std::string label = "text");

    std::int32_t token_at(std::uint64_t position) const override;
    std::size_t vocab_size() const override { return 256; }
    std::uint64_t period() const override { return bytes_.size(); }
    std::string name() const override { return label_; }

private:
    std::string bytes_;
    std::string label_;
};

/// Copy task: blocks of `span` random symbols, a separator, then the same
/// symbols again. The second half is exactly predictable.
class CopyTaskSource final : public DataSource {
public:
    CopyTaskSource(std::uint64_t seed, std::size_t span = 8, std::size_t alphabet = 16);

    std::int32_t token_at(std::uint64_t position) const override;
    std::size_t vocab_size() const override { return alphabet_ + 1; }
    std::string name() const override { return "copy"; }
    std::int32_t separator() const noexcept { return static_cast<std::int32_t>(alphabet_); }
    std::size_t block_length() const noexcept { return 2 * span_ + 1; }

private:
    std::uint64_t seed_;
    std::size_t span_;
    std::size_t alphabet_;
};

/// Order-2 Markov chain over a small alphabet. Every two-symbol context has
/// three successors with probabilities 0.6/0.3/0.1, so the entropy rate is
/// known exactly. Symbols are emitted as the bytes 'a', 'b', ... so the
/// stream is also a valid byte-level text (vocabulary 256).
class MarkovSource final : public DataSource {
public:
    explicit MarkovSource(std::uint64_t seed, std::size_t alphabet = 16, std::size_t block = 4096);

    std::int32_t token_at(std::uint64_t position) const override;
    std::size_t vocab_size() const override { return 256; }
    std::string name() const override { return "markov"; }
    std::optional<double> achievable_loss() const override;

    std::size_t alphabet() const noexcept { return alphabet_; }
    /// Probability of symbol `next` after (prev2, prev1), symbols in [0, alphabet).
    double transition(std::size_t prev2, std::size_t prev1, std::size_t next) const;

private:
    void fill_block(std::uint64_t block) const;

    std::uint64_t seed_;
    std::size_t alphabet_;
    std::size_t block_;
    std::vector<std::array<std::uint8_t, 3>> successors_;
    // Not thread safe: one cached block per source object.
    mutable std::uint64_t cached_block_ = ~std::uint64_t{0};
    mutable std::vector<std::uint8_t> cache_;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Batch of `b_seqs` consecutive sequences starting at `position`. Labels
/// are next tokens, with the last position of each sequence masked.
Batch batch_at(const DataSource& source, std::uint64_t position, std::size_t b_seqs, std::size_t context);

/// batch_at(cursor), then advances the cursor by b_seqs * context.
Batch next_batch(const DataSource& source, std::uint64_t& cursor, std::size_t b_seqs, std::size_t context);

struct DataSpec {
    std::string kind = "markov";  // markov | copy | text
    std::string path;             // text only
    std::uint64_t seed = 0;
};

std::unique_ptr<DataSource> make_source(const DataSpec& spec);

}  // namespace gnlab
