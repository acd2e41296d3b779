#include "gnlab/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gnlab/errors.hpp"

namespace gnlab {

namespace {

constexpr char kMagic[] = "GNLAB1";
constexpr std::size_t kMagicLen = 6;

template <typename T>
void put_le(std::string& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffU));
    }
}

void put_section(std::string& out, const NamedTensors& section) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(section.size()));
    for (const auto& [name, t] : section) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_le<std::uint8_t>(out, kDtypeF64);
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) {
            put_le<std::uint64_t>(out, e);
        }
        for (double v : t.data()) {
            put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
        }
    }
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    NamedTensors section() {
        const auto count = get<std::uint32_t>();
        NamedTensors out;
        out.reserve(count);
        for (std::uint32_t k = 0; k < count; ++k) {
            std::string name = get_string(get<std::uint32_t>());
            const auto dtype = get<std::uint8_t>();
            if (dtype != kDtypeF64) {
                fail("unsupported dtype code " + std::to_string(dtype) + " for '" + name + "'");
            }
            const auto rank = get<std::uint32_t>();
            Shape shape(rank);
            std::size_t numel = 1;
            for (auto& e : shape) {
                e = static_cast<std::size_t>(get<std::uint64_t>());
                numel *= e;
            }
            if (numel * 8 > bytes_.size() - pos_) {
                fail("truncated data for '" + name + "'");
            }
            std::vector<double> data(numel);
            for (auto& v : data) {
                v = std::bit_cast<double>(get<std::uint64_t>());
            }
            out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
        }
        return out;
    }

    bool done() const noexcept { return pos_ == bytes_.size(); }

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError("checkpoint '" + origin_ + "': " + what);
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            fail("unexpected end of file at byte " + std::to_string(pos_));
        }
    }

    const std::string& bytes_;
    const std::string& origin_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& checkpoint) {
    std::string out(kMagic, kMagicLen);
    put_section(out, checkpoint.params);
    put_section(out, checkpoint.state);
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
    Reader r(bytes, origin);
    if (r.get_string(std::min(kMagicLen, bytes.size())) != std::string(kMagic, kMagicLen)) {
        r.fail("bad magic");
    }
    Checkpoint c;
    c.params = r.section();
    c.state = r.section();
    if (!r.done()) {
        r.fail("trailing bytes");
    }
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
    const std::string bytes = encode_checkpoint(checkpoint);
    const std::filesystem::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(target.parent_path(), ec);
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write checkpoint '" + tmp + "'");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("short write to '" + tmp + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, target, ec);
    if (ec) {
        throw IoError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str(), path);
}

NamedTensors named(const ParamTree& tree, const std::string& prefix) {
    NamedTensors out;
    out.reserve(tree.size());
    for (const auto& e : tree.entries()) {
        out.emplace_back(prefix + e.name, e.value);
    }
    return out;
}

void assign_named(ParamTree& layout, const NamedTensors& values, const std::string& prefix) {
    for (auto& e : layout.entries()) {
        const Tensor* t = find_named(values, prefix + e.name);
        if (!t) {
            throw IoError("checkpoint has no entry '" + prefix + e.name + "'");
        }
        if (t->shape() != e.value.shape()) {
            throw ShapeError("checkpoint entry '" + prefix + e.name + "' has shape " + shape_string(t->shape()) +
                             ", expected " + shape_string(e.value.shape()));
        }
        e.value = *t;
    }
}

NamedTensors with_prefix(const NamedTensors& values, const std::string& prefix) {
    NamedTensors out;
    for (const auto& [name, t] : values) {
        if (name.compare(0, prefix.size(), prefix) == 0) {
            out.emplace_back(name.substr(prefix.size()), t);
        }
    }
    return out;
}

const Tensor* find_named(const NamedTensors& values, const std::string& name) {
    for (const auto& [n, t] : values) {
        if (n == name) {
            return &t;
        }
    }
    return nullptr;
}

Tensor counter_tensor(std::uint64_t value) { return Tensor::scalar(static_cast<double>(value)); }

std::uint64_t counter_value(const Tensor& t) {
    const double v = t.item();
    if (!(v >= 0.0) || v != std::floor(v)) {
        throw IoError("counter entry is not a non-negative integer");
    }
    return static_cast<std::uint64_t>(v);
}

}  // namespace gnlab
