#include "crmatch/model.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace crmatch {

namespace {

constexpr char kMagic[4] = {'C', 'R', 'M', 'T'};
constexpr uint32_t kVersion = 1;

void put_u16(std::ostream& os, uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                                static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

uint16_t get_u16(std::istream& is, const std::string& path) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) fail("truncated checkpoint '", path, "'");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) fail("truncated checkpoint '", path, "'");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

void write_tensor(std::ostream& os, const std::string& name, const Shape& shape,
                  const std::vector<float>& data) {
    put_u16(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(shape.size()));
    for (int d : shape) put_u32(os, static_cast<uint32_t>(d));
    for (float v : data) put_f32(os, v);
}

} // namespace

void save_checkpoint(const std::string& path, const ModelState<float>& m,
                     const EmaState<float>& ema) {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail("cannot open '", path, "' for writing");
    f.write(kMagic, 4);
    put_u32(f, kVersion);
    put_u32(f, static_cast<uint32_t>(m.params.size() + ema.shadow.size()));
    for (const auto& [name, t] : m.params) write_tensor(f, name, t.shape, t.vals());
    for (const auto& [name, t] : ema.shadow) write_tensor(f, "ema/" + name, t.shape, t.vals());
    if (!f) fail("failed writing checkpoint '", path, "'");
}

std::vector<NamedBuffer> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail("cannot open checkpoint '", path, "'");
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        fail("'", path, "' is not a checkpoint (bad magic)");
    const uint32_t version = get_u32(f, path);
    if (version != kVersion) fail("unsupported checkpoint version ", version, " in '", path, "'");
    const uint32_t count = get_u32(f, path);

    std::vector<NamedBuffer> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedBuffer buf;
        const uint16_t name_len = get_u16(f, path);
        buf.name.resize(name_len);
        if (!f.read(buf.name.data(), name_len)) fail("truncated checkpoint '", path, "'");
        const int ndim = f.get();
        if (ndim < 0) fail("truncated checkpoint '", path, "'");
        int64_t n = 1;
        for (int d = 0; d < ndim; ++d) {
            buf.shape.push_back(static_cast<int>(get_u32(f, path)));
            n *= buf.shape.back();
        }
        buf.data.resize(static_cast<size_t>(n));
        for (auto& v : buf.data) {
            const uint32_t bits = get_u32(f, path);
            std::memcpy(&v, &bits, 4);
        }
        out.push_back(std::move(buf));
    }
    return out;
}

void load_checkpoint(const std::string& path, ModelState<float>& m, EmaState<float>& ema) {
    auto read_all = read_checkpoint(path);
    auto fill = [&](const std::string& name, Tensor<float>& dst) {
        for (const auto& buf : read_all) {
            if (buf.name != name) continue;
            if (buf.shape != dst.shape)
                fail("checkpoint tensor '", name, "' has shape ", shape_str(buf.shape),
                     ", model expects ", shape_str(dst.shape));
            dst.vals() = buf.data;
            return;
        }
        fail("checkpoint '", path, "' is missing tensor '", name, "'");
    };
    for (auto& [name, t] : m.params) fill(name, t);
    for (auto& [name, t] : ema.shadow) fill("ema/" + name, t);
}

} // namespace crmatch
