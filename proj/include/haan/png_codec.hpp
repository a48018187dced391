#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace haan::png {

// Minimal 8-bit PNG support: grayscale (1 channel) and truecolor RGB
// (3 channels), no interlacing. Pixels are row-major, interleaved.
struct Decoded {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;
};

Decoded read_png(const std::string& path);

void write_png(const std::string& path, std::uint32_t width, std::uint32_t height, int channels,
               const std::uint8_t* pixels);

}  // namespace haan::png
