#include "gnlab/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

namespace gnlab {

namespace {

constexpr double kSuccessorProbs[3] = {0.6, 0.3, 0.1};

std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept {
    return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0x9E3779B97F4A7C15ULL));
}

double unit_interval(std::uint64_t h) noexcept { return static_cast<double>(h >> 11) * 0x1.0p-53; }

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

TextSource TextSource::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open text corpus '" + path + "'");
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return TextSource(std::move(bytes), path);
}

TextSource::TextSource(std::string bytes, std::string label) : bytes_(std::move(bytes)), label_(std::move(label)) {
    if (bytes_.size() < 2) {
        throw ConfigError("text corpus '" + label_ + "' needs at least 2 bytes");
    }
}

std::int32_t TextSource::token_at(std::uint64_t position) const {
    return static_cast<std::uint8_t>(bytes_[position % bytes_.size()]);
}

CopyTaskSource::CopyTaskSource(std::uint64_t seed, std::size_t span, std::size_t alphabet)
    : seed_(seed), span_(span), alphabet_(alphabet) {
    if (span == 0 || alphabet < 2) {
        throw ConfigError("copy task needs span >= 1 and alphabet >= 2");
    }
}

std::int32_t CopyTaskSource::token_at(std::uint64_t position) const {
    const std::uint64_t len = block_length();
    const std::uint64_t block = position / len;
    const std::uint64_t offset = position % len;
    if (offset == span_) {
        return separator();
    }
    const std::uint64_t i = offset < span_ ? offset : offset - span_ - 1;
    return static_cast<std::int32_t>(mix(seed_, block, i) % alphabet_);
}

MarkovSource::MarkovSource(std::uint64_t seed, std::size_t alphabet, std::size_t block)
    : seed_(seed), alphabet_(alphabet), block_(block) {
    if (alphabet < 3 || alphabet > 26) {
        throw ConfigError("markov alphabet must be in [3, 26]");
    }
    if (block < 3) {
        throw ConfigError("markov block length must be at least 3");
    }
    successors_.resize(alphabet * alphabet);
    for (std::size_t c = 0; c < successors_.size(); ++c) {
        // Three distinct successors via a seeded partial shuffle.
        std::vector<std::uint8_t> pool(alphabet);
        for (std::size_t i = 0; i < alphabet; ++i) {
            pool[i] = static_cast<std::uint8_t>(i);
        }
        for (std::size_t k = 0; k < 3; ++k) {
            const std::size_t j = k + mix(seed_ ^ 0x5EEDULL, c, k) % (alphabet - k);
            std::swap(pool[k], pool[j]);
            successors_[c][k] = pool[k];
        }
    }
}

double MarkovSource::transition(std::size_t prev2, std::size_t prev1, std::size_t next) const {
    const auto& s = successors_[prev2 * alphabet_ + prev1];
    for (std::size_t k = 0; k < 3; ++k) {
        if (s[k] == next) {
            return kSuccessorProbs[k];
        }
    }
    return 0.0;
}

void MarkovSource::fill_block(std::uint64_t block) const {
    cache_.resize(block_);
    cache_[0] = static_cast<std::uint8_t>(mix(seed_, block, 0) % alphabet_);
    cache_[1] = static_cast<std::uint8_t>(mix(seed_, block, 1) % alphabet_);
    for (std::size_t i = 2; i < block_; ++i) {
        const auto& s = successors_[cache_[i - 2] * alphabet_ + cache_[i - 1]];
        const double u = unit_interval(mix(seed_, block, i));
        std::size_t k = 0;
        double acc = kSuccessorProbs[0];
        while (k < 2 && u >= acc) {
            ++k;
            acc += kSuccessorProbs[k];
        }
        cache_[i] = s[k];
    }
    cached_block_ = block;
}

std::int32_t MarkovSource::token_at(std::uint64_t position) const {
    const std::uint64_t block = position / block_;
    if (block != cached_block_) {
        fill_block(block);
    }
    return 'a' + static_cast<std::int32_t>(cache_[position % block_]);
}

std::optional<double> MarkovSource::achievable_loss() const {
    double h = 0.0;
    for (double p : kSuccessorProbs) {
        h -= p * std::log(p);
    }
    return h;
}

Batch batch_at(const DataSource& source, std::uint64_t position, std::size_t b_seqs, std::size_t context) {
    if (b_seqs == 0 || context == 0) {
        throw ConfigError("batch needs at least one sequence and one position");
    }
    Batch b;
    b.b_seqs = b_seqs;
    b.context = context;
    b.source_offset = position;
    b.epoch = source.period() ? position / source.period() : 0;
    b.tokens.resize(b_seqs * context);
    b.labels.resize(b_seqs * context);
    for (std::size_t s = 0; s < b_seqs; ++s) {
        const std::uint64_t start = position + s * context;
        for (std::size_t j = 0; j < context; ++j) {
            b.tokens[s * context + j] = source.token_at(start + j);
            b.labels[s * context + j] = j + 1 < context ? source.token_at(start + j + 1) : kMaskedLabel;
        }
    }
    return b;
}

Batch next_batch(const DataSource& source, std::uint64_t& cursor, std::size_t b_seqs, std::size_t context) {
    Batch b = batch_at(source, cursor, b_seqs, context);
    cursor += static_cast<std::uint64_t>(b_seqs) * context;
    return b;
}

std::unique_ptr<DataSource> make_source(const DataSpec& spec) {
    if (spec.kind == "markov") {
        return std::make_unique<MarkovSource>(spec.seed);
    }
    if (spec.kind == "copy") {
        return std::make_unique<CopyTaskSource>(spec.seed);
    }
    if (spec.kind == "text") {
        if (spec.path.empty()) {
            throw ConfigError("data.kind 'text' requires data.path");
        }
        return std::make_unique<TextSource>(TextSource::from_file(spec.path));
    }
    throw ConfigError("unknown data source '" + spec.kind + "' (expected markov, copy or text)");
}

}  // namespace gnlab
