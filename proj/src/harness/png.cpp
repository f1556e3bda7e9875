#include "cbv/harness/png.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "cbv/error.hpp"

namespace cbv::harness {
namespace {

constexpr std::uint8_t kMagic[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) << 24 | std::uint32_t(p[1]) << 16 | std::uint32_t(p[2]) << 8 |
           std::uint32_t(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[5],
                  const std::vector<std::uint8_t>& payload) {
    put_u32(out, std::uint32_t(payload.size()));
    const std::size_t crc_from = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc =
        crc32(0, reinterpret_cast<const Bytef*>(out.data() + crc_from), uInt(4 + payload.size()));
    put_u32(out, std::uint32_t(crc));
}

std::uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return std::uint8_t(a);
    if (pb <= pc) return std::uint8_t(b);
    return std::uint8_t(c);
}

}  // namespace

std::vector<std::uint8_t> encode_png(const PngImage& img) {
    if (img.width == 0 || img.height == 0) throw BadConfig("png: empty image");
    if (img.channels != 1 && img.channels != 3)
        throw BadConfig("png: channels must be 1 or 3");
    if (img.pixels.size() != img.width * img.height * img.channels)
        throw ShapeMismatch("png: pixel buffer does not match dimensions");

    const std::size_t row = img.width * img.channels;
    std::vector<std::uint8_t> raw((row + 1) * img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        raw[y * (row + 1)] = 0;  // filter type 0
        std::memcpy(raw.data() + y * (row + 1) + 1, img.pixels.data() + y * row, row);
    }

    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> deflated(bound);
    if (compress2(deflated.data(), &bound, raw.data(), uLong(raw.size()), 9) != Z_OK)
        throw BadConfig("png: deflate failed");
    deflated.resize(bound);

    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, std::uint32_t(img.width));
    put_u32(ihdr, std::uint32_t(img.height));
    ihdr.push_back(8);                                    // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : 2);            // gray / truecolor
    ihdr.push_back(0);                                    // compression
    ihdr.push_back(0);                                    // filter method
    ihdr.push_back(0);                                    // no interlace

    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", deflated);
    append_chunk(out, "IEND", {});
    return out;
}

PngImage decode_png(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw ParseError("png: bad signature");

    std::size_t width = 0, height = 0, depth = 0, channels = 0;
    bool seen_ihdr = false, seen_iend = false;
    std::vector<std::uint8_t> idat;

    std::size_t off = 8;
    while (off < bytes.size()) {
        if (off + 12 > bytes.size()) throw ParseError("png: truncated chunk");
        const std::size_t len = get_u32(bytes.data() + off);
        if (off + 12 + len > bytes.size()) throw ParseError("png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + off + 4);
        const std::uint8_t* payload = bytes.data() + off + 8;
        const auto crc = crc32(0, bytes.data() + off + 4, uInt(4 + len));
        if (std::uint32_t(crc) != get_u32(payload + len)) throw ParseError("png: crc mismatch");

        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw ParseError("png: bad IHDR");
            width = get_u32(payload);
            height = get_u32(payload + 4);
            depth = payload[8];
            const std::uint8_t color = payload[9];
            if (payload[12] != 0) throw ParseError("png: interlacing unsupported");
            if (color == 0)
                channels = 1;
            else if (color == 2)
                channels = 3;
            else
                throw ParseError("png: only gray and RGB supported");
            if (!(depth == 8 || (depth == 1 && channels == 1)))
                throw ParseError("png: unsupported bit depth");
            if (width == 0 || height == 0) throw ParseError("png: empty image");
            seen_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            seen_iend = true;
            break;
        } else if (std::memcmp(type, "PLTE", 4) == 0) {
            throw ParseError("png: palette unsupported");
        }
        off += 12 + len;
    }
    if (!seen_ihdr || !seen_iend || idat.empty()) throw ParseError("png: missing chunks");

    const std::size_t row =
        depth == 8 ? width * channels : (width + 7) / 8;  // packed bits for depth 1
    std::vector<std::uint8_t> raw((row + 1) * height);
    uLongf raw_len = uLongf(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw ParseError("png: inflate failed");

    // Undo per-scanline filtering in place; prior = reconstructed row above.
    const std::size_t bpp = depth == 8 ? channels : 1;
    std::vector<std::uint8_t> cur(row), prior(row, 0);
    PngImage img{width, height, channels, {}};
    img.pixels.resize(width * height * channels);
    for (std::size_t y = 0; y < height; ++y) {
        const std::uint8_t filter = raw[y * (row + 1)];
        const std::uint8_t* src = raw.data() + y * (row + 1) + 1;
        for (std::size_t i = 0; i < row; ++i) {
            const int left = i >= bpp ? cur[i - bpp] : 0;
            const int up = prior[i];
            const int corner = i >= bpp ? prior[i - bpp] : 0;
            int rec = src[i];
            switch (filter) {
                case 0: break;
                case 1: rec += left; break;
                case 2: rec += up; break;
                case 3: rec += (left + up) / 2; break;
                case 4: rec += paeth(left, up, corner); break;
                default: throw ParseError("png: unknown filter type");
            }
            cur[i] = std::uint8_t(rec);
        }
        if (depth == 8) {
            std::memcpy(img.pixels.data() + y * row, cur.data(), row);
        } else {
            for (std::size_t x = 0; x < width; ++x) {
                const std::uint8_t bit = (cur[x / 8] >> (7 - x % 8)) & 1;
                img.pixels[y * width + x] = bit ? 255 : 0;
            }
        }
        std::swap(cur, prior);
    }
    return img;
}

void write_png(const std::string& path, const PngImage& img) {
    const auto bytes = encode_png(img);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw MissingFile("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw MissingFile("short write to " + path);
}

PngImage read_png_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFile("cannot open " + path);
    std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>()};
    return decode_png(bytes);
}

std::uint8_t quantize8(float v) {
    const float c = std::fmin(std::fmax(v, 0.0f), 1.0f);
    return std::uint8_t(std::lround(c * 255.0f));
}

void write_png_rgb(const std::string& path, const numcore::Tensor& image) {
    if (image.rank() != 3 || image.extent(0) != 3)
        throw ShapeMismatch("write_png_rgb expects [3,H,W]");
    const std::size_t h = image.extent(1), w = image.extent(2);
    PngImage img{w, h, 3, std::vector<std::uint8_t>(3 * h * w)};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.pixels[(y * w + x) * 3 + c] = quantize8(image[(c * h + y) * w + x]);
    write_png(path, img);
}

void write_png_gray(const std::string& path, const numcore::Tensor& map) {
    if (map.rank() != 2) throw ShapeMismatch("write_png_gray expects [H,W]");
    const std::size_t h = map.extent(0), w = map.extent(1);
    PngImage img{w, h, 1, std::vector<std::uint8_t>(h * w)};
    for (std::size_t i = 0; i < h * w; ++i) img.pixels[i] = quantize8(map[i]);
    write_png(path, img);
}

void write_png_mask(const std::string& path, const numcore::Tensor& mask) {
    if (mask.rank() != 2) throw ShapeMismatch("write_png_mask expects [H,W]");
    const std::size_t h = mask.extent(0), w = mask.extent(1);
    for (float v : mask.values())
        if (v != 0.0f && v != 1.0f) throw BadRange("mask entries must be exactly 0 or 1");

    const std::size_t row = (w + 7) / 8;
    std::vector<std::uint8_t> raw((row + 1) * h, 0);
    for (std::size_t y = 0; y < h; ++y) {
        std::uint8_t* bits = raw.data() + y * (row + 1) + 1;
        for (std::size_t x = 0; x < w; ++x)
            if (mask[y * w + x] == 1.0f) bits[x / 8] |= std::uint8_t(0x80 >> (x % 8));
    }

    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> deflated(bound);
    if (compress2(deflated.data(), &bound, raw.data(), uLong(raw.size()), 9) != Z_OK)
        throw BadConfig("png: deflate failed");
    deflated.resize(bound);

    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, std::uint32_t(w));
    put_u32(ihdr, std::uint32_t(h));
    ihdr.push_back(1);  // 1-bit
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);

    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", deflated);
    append_chunk(out, "IEND", {});
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw MissingFile("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    if (!f) throw MissingFile("short write to " + path);
}

void write_filmstrip(const std::string& path, std::span<const numcore::Tensor> frames) {
    if (frames.empty()) throw EmptyInput("filmstrip needs at least one frame");
    const numcore::Tensor& first = frames.front();
    if (first.rank() != 3 || first.extent(0) != 3)
        throw ShapeMismatch("filmstrip frames must be [3,H,W]");
    const std::size_t h = first.extent(1), w = first.extent(2);

    PngImage img{w * frames.size(), h, 3, std::vector<std::uint8_t>(3 * h * w * frames.size())};
    for (std::size_t k = 0; k < frames.size(); ++k) {
        const numcore::Tensor& f = frames[k];
        if (!f.same_shape(first)) throw ShapeMismatch("filmstrip frames disagree in shape");
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    img.pixels[(y * img.width + k * w + x) * 3 + c] =
                        quantize8(f[(c * h + y) * w + x]);
    }
    write_png(path, img);
}

numcore::Tensor read_png_tensor(const std::string& path) {
    const PngImage img = read_png_file(path);
    numcore::Tensor t({img.channels, img.height, img.width});
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < img.channels; ++c)
                t[(c * img.height + y) * img.width + x] =
                    float(img.pixels[(y * img.width + x) * img.channels + c]) / 255.0f;
    return t;
}

}  // namespace cbv::harness
