#include "ivoct/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ivoct::nn {

namespace {

constexpr char kMagic[8] = {'I', 'V', 'O', 'C', 'T', 'N', 'N', '\0'};

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(const std::string& b) : b_(b) {}
    template <typename U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (b_.size() - pos_ < n) throw FormatError("checkpoint: truncated file");
    }
    const std::string& b_;
    std::size_t pos_ = 0;
};

}  // namespace

const Tensor& Checkpoint::at(const std::string& name) const {
    for (const auto& [n, t] : entries)
        if (n == name) return t;
    throw FormatError("checkpoint: missing entry '" + name + "'");
}

std::string encode_checkpoint(const nlohmann::json& config, const NamedTensors& tensors) {
    std::string out(kMagic, kMagic + 8);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    const std::string cfg = config.dump();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_le<std::uint32_t>(out, 4);
        for (int d : t->shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    }
    for (const auto& [name, t] : tensors)
        for (double v : t->values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.bytes(8) != std::string(kMagic, kMagic + 8)) throw FormatError("checkpoint: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    const auto cfg_len = r.get<std::uint32_t>();
    try {
        ck.config = nlohmann::json::parse(r.bytes(cfg_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: config JSON: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto len = r.get<std::uint32_t>();
        std::string name = r.bytes(len);
        if (r.get<std::uint32_t>() != 4) throw FormatError("checkpoint: entry '" + name + "' is not rank 4");
        std::array<int, 4> shape{};
        for (int& d : shape) {
            auto v = r.get<std::uint64_t>();
            if (v > (1u << 30)) throw FormatError("checkpoint: implausible dimension in '" + name + "'");
            d = static_cast<int>(v);
        }
        ck.entries.emplace_back(std::move(name), Tensor(shape));
    }
    for (auto& [name, t] : ck.entries)
        for (double& v : t.values()) v = std::bit_cast<double>(r.get<std::uint64_t>());
    if (!r.done()) throw FormatError("checkpoint: trailing bytes");
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const NamedTensors& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    const std::string b = encode_checkpoint(config, tensors);
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return decode_checkpoint(ss.str());
}

void restore_tensors(const Checkpoint& ck, const std::vector<std::pair<std::string, Tensor*>>& targets) {
    for (const auto& [name, t] : targets) {
        const Tensor& src = ck.at(name);
        if (!src.same_shape(*t))
            throw FormatError("checkpoint: entry '" + name + "' has shape " + src.shape_string() + ", model expects " +
                              t->shape_string());
        *t = src;
    }
}

}  // namespace ivoct::nn
