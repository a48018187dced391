#include "haan/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>

namespace haan {

namespace {

constexpr char kMagic[4] = {'H', 'A', 'A', 'N'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kMaxRank = 8;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(std::uint8_t(v));
    out.push_back(std::uint8_t(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    void need(std::size_t n, const std::string& what) const {
        if (pos_ + n > size_) throw FormatError("checkpoint truncated while reading " + what);
    }
    std::uint8_t u8(const std::string& what) {
        need(1, what);
        return data_[pos_++];
    }
    std::uint16_t u16(const std::string& what) {
        need(2, what);
        std::uint16_t v = std::uint16_t(data_[pos_]) | (std::uint16_t(data_[pos_ + 1]) << 8);
        pos_ += 2;
        return v;
    }
    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const std::string& what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string str(std::size_t n, const std::string& what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    float f32(const std::string& what) { return std::bit_cast<float>(u32(what)); }
    std::size_t remaining() const { return size_ - pos_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace

const Checkpoint::Section* Checkpoint::find(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

void Checkpoint::add(const std::string& name, Shape dims, std::vector<float> values) {
    if (shape_size(dims) != values.size())
        throw ContractError("checkpoint section " + name + ": dims do not match value count");
    if (name.empty() || name.size() > 0xFFFF)
        throw ContractError("checkpoint section name length out of range");
    sections.push_back({name, std::move(dims), std::move(values)});
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(ckpt.sections.size()));
    for (const auto& s : ckpt.sections) {
        if (s.dims.size() > kMaxRank)
            throw ContractError("checkpoint section " + s.name + ": rank too large");
        put_u16(out, static_cast<std::uint16_t>(s.name.size()));
        out.insert(out.end(), s.name.begin(), s.name.end());
        out.push_back(static_cast<std::uint8_t>(s.dims.size()));
        for (std::size_t d : s.dims) put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : s.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    put_u64(out, ckpt.step);

    const std::string tmp = path + ".tmp";
    {
        std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(tmp.c_str(), "wb"), std::fclose);
        if (!f) throw IoError("cannot write checkpoint: " + tmp);
        if (std::fwrite(out.data(), 1, out.size(), f.get()) != out.size())
            throw IoError("short write: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot move checkpoint into place: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"), std::fclose);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::fseek(f.get(), 0, SEEK_END);
    const long size = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_SET);
    if (size < 0) throw IoError("cannot stat checkpoint: " + path);

    // The magic is validated before any tensor payload is touched.
    char magic[4];
    if (size < 4 || std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("not a HAAN checkpoint: " + path);

    std::vector<std::uint8_t> rest(static_cast<std::size_t>(size) - 4);
    if (!rest.empty() && std::fread(rest.data(), 1, rest.size(), f.get()) != rest.size())
        throw IoError("short read: " + path);

    Reader r(rest.data(), rest.size());
    const std::uint32_t version = r.u32("version");
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path);

    Checkpoint ckpt;
    const std::uint32_t count = r.u32("section count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("section name length");
        const std::string name = r.str(name_len, "section name");
        const std::uint8_t rank = r.u8("rank of " + name);
        if (rank > kMaxRank) throw FormatError("checkpoint section " + name + ": rank too large");
        Shape dims(rank);
        std::size_t n = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            dims[d] = r.u32("dims of " + name);
            n *= dims[d];
        }
        r.need(n * 4, "payload of " + name);
        std::vector<float> values(n);
        for (std::size_t v = 0; v < n; ++v) values[v] = r.f32("payload of " + name);
        ckpt.sections.push_back({name, std::move(dims), std::move(values)});
    }
    ckpt.step = r.u64("step counter");
    return ckpt;
}

// ---- bridges ----------------------------------------------------------

void append_params(Checkpoint& ckpt, const std::string& prefix, const NetworkParams<float>& params) {
    for (const auto& e : params.entries)
        ckpt.add(prefix + "." + e.name, e.tensor.shape(), e.tensor.data());
}

void append_adam(Checkpoint& ckpt, const std::string& prefix, const NetworkParams<float>& params,
                 const AdamState<float>& state) {
    for (const auto& e : params.entries) {
        if (!e.trainable) continue;
        auto it = state.slots.find(e.name);
        if (it == state.slots.end()) continue;
        ckpt.add(prefix + "." + e.name + ".m", e.tensor.shape(), it->second.m);
        ckpt.add(prefix + "." + e.name + ".v", e.tensor.shape(), it->second.v);
    }
}

void load_params(const Checkpoint& ckpt, const std::string& prefix, NetworkParams<float>& params) {
    for (auto& e : params.entries) {
        const std::string name = prefix + "." + e.name;
        const Checkpoint::Section* s = ckpt.find(name);
        if (!s) throw FormatError("checkpoint missing section " + name);
        if (s->dims != e.tensor.shape())
            throw FormatError("checkpoint section " + name + ": shape " + shape_str(s->dims) +
                              " does not match network " + shape_str(e.tensor.shape()));
        e.tensor.data() = s->values;
    }
}

bool load_adam(const Checkpoint& ckpt, const std::string& prefix, const NetworkParams<float>& params,
               AdamState<float>& state) {
    bool any = false;
    for (const auto& e : params.entries) {
        if (!e.trainable) continue;
        const Checkpoint::Section* m = ckpt.find(prefix + "." + e.name + ".m");
        const Checkpoint::Section* v = ckpt.find(prefix + "." + e.name + ".v");
        if (!m || !v) continue;
        if (m->values.size() != e.tensor.size() || v->values.size() != e.tensor.size())
            throw FormatError("checkpoint Adam state size mismatch for " + prefix + "." + e.name);
        state.slots[e.name] = {m->values, v->values};
        any = true;
    }
    return any;
}

void append_arch(Checkpoint& ckpt, const ArchConfig& arch) {
    ckpt.add("meta.arch", {5},
             {static_cast<float>(arch.width_scale), static_cast<float>(arch.image_size),
              static_cast<float>(arch.resblock_count), static_cast<float>(arch.ssm_resblocks),
              static_cast<float>(arch.channel_attention_reduction)});
}

std::optional<ArchConfig> read_arch(const Checkpoint& ckpt) {
    const Checkpoint::Section* s = ckpt.find("meta.arch");
    if (!s || s->values.size() != 5) return std::nullopt;
    ArchConfig arch;
    arch.width_scale = static_cast<int>(s->values[0]);
    arch.image_size = static_cast<int>(s->values[1]);
    arch.resblock_count = static_cast<int>(s->values[2]);
    arch.ssm_resblocks = static_cast<int>(s->values[3]);
    arch.channel_attention_reduction = static_cast<int>(s->values[4]);
    return arch;
}

}  // namespace haan
