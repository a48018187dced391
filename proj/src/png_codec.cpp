#include "haan/png_codec.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <memory>

#include "haan/common.hpp"

namespace haan::png {

namespace {

constexpr std::uint8_t kSignature[8] = {0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A};

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"), std::fclose);
    if (!f) throw IoError("cannot open file: " + path);
    std::fseek(f.get(), 0, SEEK_END);
    const long size = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_SET);
    if (size < 0) throw IoError("cannot stat file: " + path);
    std::vector<std::uint8_t> data(static_cast<std::size_t>(size));
    if (!data.empty() && std::fread(data.data(), 1, data.size(), f.get()) != data.size())
        throw IoError("short read: " + path);
    return data;
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

void unfilter(std::vector<std::uint8_t>& raw, std::uint32_t height, std::size_t row_bytes,
              int bpp, const std::string& path) {
    std::vector<std::uint8_t> prev(row_bytes, 0);
    for (std::uint32_t y = 0; y < height; ++y) {
        std::uint8_t* row = raw.data() + y * (row_bytes + 1);
        const int filter = row[0];
        std::uint8_t* cur = row + 1;
        switch (filter) {
            case 0:
                break;
            case 1:
                for (std::size_t i = bpp; i < row_bytes; ++i) cur[i] = std::uint8_t(cur[i] + cur[i - bpp]);
                break;
            case 2:
                for (std::size_t i = 0; i < row_bytes; ++i) cur[i] = std::uint8_t(cur[i] + prev[i]);
                break;
            case 3:
                for (std::size_t i = 0; i < row_bytes; ++i) {
                    const int left = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
                    cur[i] = std::uint8_t(cur[i] + (left + prev[i]) / 2);
                }
                break;
            case 4:
                for (std::size_t i = 0; i < row_bytes; ++i) {
                    const int left = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
                    const int upleft = i >= static_cast<std::size_t>(bpp) ? prev[i - bpp] : 0;
                    cur[i] = std::uint8_t(cur[i] + paeth(left, prev[i], upleft));
                }
                break;
            default:
                throw FormatError("unsupported PNG filter type in " + path);
        }
        std::memcpy(prev.data(), cur, row_bytes);
    }
}

}  // namespace

Decoded read_png(const std::string& path) {
    const std::vector<std::uint8_t> file = read_file(path);
    if (file.size() < 8 || std::memcmp(file.data(), kSignature, 8) != 0)
        throw FormatError("not a PNG file: " + path);

    Decoded img;
    int bit_depth = 0, color_type = -1;
    std::vector<std::uint8_t> idat;
    bool saw_ihdr = false, saw_iend = false;

    std::size_t pos = 8;
    while (pos + 8 <= file.size() && !saw_iend) {
        const std::uint32_t len = be32(&file[pos]);
        if (pos + 12 + len > file.size()) throw FormatError("truncated PNG chunk in " + path);
        char type[5] = {0};
        std::memcpy(type, &file[pos + 4], 4);
        const std::uint8_t* payload = &file[pos + 8];
        const std::uint32_t crc = be32(&file[pos + 8 + len]);
        std::uint32_t computed = static_cast<std::uint32_t>(
            ::crc32(::crc32(0L, &file[pos + 4], 4), payload, len));
        if (crc != computed) throw FormatError("PNG chunk CRC mismatch in " + path);

        if (std::strcmp(type, "IHDR") == 0) {
            if (len != 13) throw FormatError("bad IHDR in " + path);
            img.width = be32(payload);
            img.height = be32(payload + 4);
            bit_depth = payload[8];
            color_type = payload[9];
            if (payload[10] != 0 || payload[11] != 0) throw FormatError("bad IHDR method in " + path);
            if (payload[12] != 0) throw FormatError("interlaced PNG not supported: " + path);
            saw_ihdr = true;
        } else if (std::strcmp(type, "IDAT") == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::strcmp(type, "IEND") == 0) {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || !saw_iend) throw FormatError("missing PNG chunks in " + path);
    if (bit_depth != 8) throw FormatError("only 8-bit PNG supported: " + path);
    if (color_type == 0)
        img.channels = 1;
    else if (color_type == 2)
        img.channels = 3;
    else
        throw FormatError("only grayscale or RGB PNG supported: " + path);
    if (img.width == 0 || img.height == 0) throw FormatError("empty PNG: " + path);

    const std::size_t row_bytes = std::size_t(img.width) * img.channels;
    const std::size_t raw_size = std::size_t(img.height) * (row_bytes + 1);
    std::vector<std::uint8_t> raw(raw_size);
    uLongf dest_len = raw_size;
    const int rc = ::uncompress(raw.data(), &dest_len, idat.data(), idat.size());
    if (rc != Z_OK || dest_len != raw_size) throw FormatError("PNG inflate failed: " + path);

    unfilter(raw, img.height, row_bytes, img.channels, path);

    img.pixels.resize(std::size_t(img.height) * row_bytes);
    for (std::uint32_t y = 0; y < img.height; ++y)
        std::memcpy(img.pixels.data() + std::size_t(y) * row_bytes, raw.data() + std::size_t(y) * (row_bytes + 1) + 1,
                    row_bytes);
    return img;
}

void write_png(const std::string& path, std::uint32_t width, std::uint32_t height, int channels,
               const std::uint8_t* pixels) {
    if (channels != 1 && channels != 3) throw ContractError("write_png: channels must be 1 or 3");
    if (width == 0 || height == 0) throw ContractError("write_png: empty image");

    const std::size_t row_bytes = std::size_t(width) * channels;
    std::vector<std::uint8_t> raw(std::size_t(height) * (row_bytes + 1));
    for (std::uint32_t y = 0; y < height; ++y) {
        raw[std::size_t(y) * (row_bytes + 1)] = 0;  // filter: none
        std::memcpy(raw.data() + std::size_t(y) * (row_bytes + 1) + 1, pixels + std::size_t(y) * row_bytes,
                    row_bytes);
    }

    uLongf bound = ::compressBound(raw.size());
    std::vector<std::uint8_t> compressed(bound);
    if (::compress2(compressed.data(), &bound, raw.data(), raw.size(), 6) != Z_OK)
        throw IoError("PNG deflate failed: " + path);
    compressed.resize(bound);

    std::vector<std::uint8_t> out;
    out.insert(out.end(), kSignature, kSignature + 8);

    auto chunk = [&out](const char* type, const std::vector<std::uint8_t>& payload) {
        put_be32(out, static_cast<std::uint32_t>(payload.size()));
        const std::size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), payload.begin(), payload.end());
        const std::uint32_t crc = static_cast<std::uint32_t>(
            ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
        put_be32(out, crc);
    };

    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, width);
    put_be32(ihdr, height);
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(channels == 3 ? std::uint8_t(2) : std::uint8_t(0));  // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    chunk("IHDR", ihdr);
    chunk("IDAT", compressed);
    chunk("IEND", {});

    std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "wb"), std::fclose);
    if (!f) throw IoError("cannot write file: " + path);
    if (std::fwrite(out.data(), 1, out.size(), f.get()) != out.size())
        throw IoError("short write: " + path);
}

}  // namespace haan::png
