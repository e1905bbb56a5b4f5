#include "fyseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fyseg {

namespace {

constexpr char kMagic[4] = {'F', 'Y', 'S', '1'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u32(out, bits);
}

struct Reader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > bytes.size())
            throw std::runtime_error("checkpoint: truncated at byte " + std::to_string(pos));
    }
    std::uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : entries)
        if (n == name) return &t;
    return nullptr;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, static_cast<std::uint32_t>(ckpt.entries.size()));
    for (const auto& [name, t] : ckpt.entries) {
        if (name.size() > 0xffff)
            throw std::invalid_argument("checkpoint: tensor name too long: " + name);
        if (t.rank() > 0xff)
            throw std::invalid_argument("checkpoint: tensor rank too large for " + name);
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t e : t.shape) put_u32(out, static_cast<std::uint32_t>(e));
        for (double v : t.data) put_f32(out, static_cast<float>(v));
    }
    return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes};
    r.need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic bytes");
    r.pos = 4;
    const std::uint32_t count = r.u32();
    Checkpoint ckpt;
    ckpt.entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16();
        r.need(name_len);
        std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
        r.pos += name_len;
        const std::uint8_t rank = r.u8();
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = r.u32();
        Tensor t(shape);
        for (double& v : t.data) v = static_cast<double>(r.f32());
        ckpt.entries.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace fyseg
