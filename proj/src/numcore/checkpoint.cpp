#include "cbv/numcore/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace cbv::numcore {

namespace {

// The build targets little-endian hosts; serialize by memcpy of fixed-width
// integers so files are identical across runs.
template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos, const std::string& path) {
    if (pos + sizeof(T) > in.size()) throw CheckpointError("truncated checkpoint: " + path);
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamMap& tensors) {
    std::string out;
    out.append("CBVW", 4);
    put<std::uint16_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw CheckpointError("tensor name too long: " + name);
        if (t.rank() > 0xff) throw CheckpointError("tensor rank too large: " + name);
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.append(name);
        put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
        for (std::size_t e : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
        const std::size_t bytes = t.numel() * sizeof(float);
        const std::size_t base = out.size();
        out.resize(base + bytes);
        std::memcpy(out.data() + base, t.data(), bytes);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw MissingFile("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write: " + path);
}

ParamMap load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingFile("cannot open: " + path);
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    if (in.size() < 4 || in.compare(0, 4, "CBVW") != 0) {
        throw CheckpointError("bad magic in " + path);
    }
    pos = 4;
    const auto version = take<std::uint16_t>(in, pos, path);
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    }
    const auto count = take<std::uint32_t>(in, pos, path);
    ParamMap out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = take<std::uint16_t>(in, pos, path);
        if (pos + name_len > in.size()) throw CheckpointError("truncated checkpoint: " + path);
        std::string name(in, pos, name_len);
        pos += name_len;
        const auto rank = take<std::uint8_t>(in, pos, path);
        Shape shape(rank);
        for (auto& e : shape) {
            e = take<std::uint32_t>(in, pos, path);
            if (e == 0) throw CheckpointError("zero extent for tensor '" + name + "' in " + path);
        }
        const std::size_t n = shape_numel(shape);
        if (pos + n * sizeof(float) > in.size()) throw CheckpointError("truncated checkpoint: " + path);
        std::vector<float> data(n);
        std::memcpy(data.data(), in.data() + pos, n * sizeof(float));
        pos += n * sizeof(float);
        if (out.count(name)) throw CheckpointError("duplicate tensor '" + name + "' in " + path);
        out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (pos != in.size()) throw CheckpointError("trailing bytes in " + path);
    return out;
}

}  // namespace cbv::numcore
