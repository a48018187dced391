#include "haan/image.hpp"

#include <algorithm>
#include <cmath>

#include "haan/png_codec.hpp"

namespace haan {

namespace {

std::uint8_t quantize(float v) {
    const float c = std::min(1.0f, std::max(0.0f, v));
    return static_cast<std::uint8_t>(std::floor(c * 255.0f + 0.5f));
}

void require_unit(const ImageRGB& image, const char* op) {
    if (image.range != Range::kUnit)
        throw ContractError(std::string(op) + ": expected unit-range image");
}

struct BilinearAxis {
    int i0, i1;
    float w1;
};

BilinearAxis axis_sample(int out_i, int out_n, int in_n) {
    const float scale = static_cast<float>(in_n) / static_cast<float>(out_n);
    float src = (static_cast<float>(out_i) + 0.5f) * scale - 0.5f;
    src = std::min(static_cast<float>(in_n - 1), std::max(0.0f, src));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(in_n - 1, i0 + 1);
    return {i0, i1, src - static_cast<float>(i0)};
}

}  // namespace

ImageRGB ImageRGB::filled(int height, int width, float value, Range range) {
    if (height < 1 || width < 1) throw ContractError("image dims must be >= 1");
    ImageRGB img;
    img.height = height;
    img.width = width;
    img.range = range;
    img.pixels.assign(std::size_t(height) * width * 3, value);
    return img;
}

ImageRGB load_image(const std::string& path) {
    const png::Decoded dec = png::read_png(path);
    if (dec.channels != 3) throw FormatError("expected 8-bit RGB PNG: " + path);
    ImageRGB img;
    img.height = static_cast<int>(dec.height);
    img.width = static_cast<int>(dec.width);
    img.range = Range::kUnit;
    img.pixels.resize(dec.pixels.size());
    for (std::size_t i = 0; i < dec.pixels.size(); ++i)
        img.pixels[i] = static_cast<float>(dec.pixels[i]) / 255.0f;
    return img;
}

void save_image(const ImageRGB& image, const std::string& path) {
    require_unit(image, "save_image");
    std::vector<std::uint8_t> bytes(image.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize(image.pixels[i]);
    png::write_png(path, static_cast<std::uint32_t>(image.width),
                   static_cast<std::uint32_t>(image.height), 3, bytes.data());
}

GrayImage load_gray(const std::string& path) {
    const png::Decoded dec = png::read_png(path);
    if (dec.channels != 1) throw FormatError("expected 8-bit grayscale PNG: " + path);
    GrayImage img;
    img.height = static_cast<int>(dec.height);
    img.width = static_cast<int>(dec.width);
    img.values.resize(dec.pixels.size());
    for (std::size_t i = 0; i < dec.pixels.size(); ++i)
        img.values[i] = static_cast<float>(dec.pixels[i]) / 255.0f;
    return img;
}

void save_gray(const GrayImage& image, const std::string& path) {
    std::vector<std::uint8_t> bytes(image.values.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize(image.values[i]);
    png::write_png(path, static_cast<std::uint32_t>(image.width),
                   static_cast<std::uint32_t>(image.height), 1, bytes.data());
}

ImageRGB to_signed(const ImageRGB& image) {
    require_unit(image, "to_signed");
    ImageRGB out = image;
    out.range = Range::kSigned;
    for (float& v : out.pixels) v = 2.0f * v - 1.0f;
    return out;
}

ImageRGB to_unit(const ImageRGB& image) {
    if (image.range != Range::kSigned) throw ContractError("to_unit: expected signed-range image");
    ImageRGB out = image;
    out.range = Range::kUnit;
    for (float& v : out.pixels) v = (v + 1.0f) / 2.0f;
    return out;
}

ImageRGB resize(const ImageRGB& image, int target_h, int target_w) {
    if (target_h < 1 || target_w < 1) throw ContractError("resize: targets must be >= 1");
    if (target_h == image.height && target_w == image.width) return image;
    ImageRGB out;
    out.height = target_h;
    out.width = target_w;
    out.range = image.range;
    out.pixels.resize(std::size_t(target_h) * target_w * 3);
    for (int y = 0; y < target_h; ++y) {
        const BilinearAxis ay = axis_sample(y, target_h, image.height);
        for (int x = 0; x < target_w; ++x) {
            const BilinearAxis ax = axis_sample(x, target_w, image.width);
            for (int c = 0; c < 3; ++c) {
                const float top = image.at(ay.i0, ax.i0, c) * (1.0f - ax.w1) + image.at(ay.i0, ax.i1, c) * ax.w1;
                const float bot = image.at(ay.i1, ax.i0, c) * (1.0f - ax.w1) + image.at(ay.i1, ax.i1, c) * ax.w1;
                out.at(y, x, c) = top * (1.0f - ay.w1) + bot * ay.w1;
            }
        }
    }
    return out;
}

GrayImage resize_gray(const GrayImage& image, int target_h, int target_w) {
    if (target_h < 1 || target_w < 1) throw ContractError("resize_gray: targets must be >= 1");
    if (target_h == image.height && target_w == image.width) return image;
    GrayImage out;
    out.height = target_h;
    out.width = target_w;
    out.values.resize(std::size_t(target_h) * target_w);
    for (int y = 0; y < target_h; ++y) {
        const BilinearAxis ay = axis_sample(y, target_h, image.height);
        for (int x = 0; x < target_w; ++x) {
            const BilinearAxis ax = axis_sample(x, target_w, image.width);
            const float top = image.at(ay.i0, ax.i0) * (1.0f - ax.w1) + image.at(ay.i0, ax.i1) * ax.w1;
            const float bot = image.at(ay.i1, ax.i0) * (1.0f - ax.w1) + image.at(ay.i1, ax.i1) * ax.w1;
            out.at(y, x) = top * (1.0f - ay.w1) + bot * ay.w1;
        }
    }
    return out;
}

float mean_luminance(const ImageRGB& image) {
    double s = 0.0;
    for (float v : image.pixels) s += v;
    return static_cast<float>(s / static_cast<double>(image.pixels.size()));
}

ImageRGB white_balance(const ImageRGB& image) {
    require_unit(image, "white_balance");
    double mean[3] = {0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < image.pixels.size(); i += 3) {
        mean[0] += image.pixels[i];
        mean[1] += image.pixels[i + 1];
        mean[2] += image.pixels[i + 2];
    }
    const double n = static_cast<double>(image.pixel_count());
    for (double& m : mean) m /= n;
    for (int c = 0; c < 3; ++c)
        if (mean[c] <= 0.0)
            throw ContractError("white_balance: channel " + std::to_string(c) + " has zero mean");
    const double gray = (mean[0] + mean[1] + mean[2]) / 3.0;
    const float gain[3] = {static_cast<float>(gray / mean[0]), static_cast<float>(gray / mean[1]),
                           static_cast<float>(gray / mean[2])};

    ImageRGB out = image;
    for (std::size_t i = 0; i < out.pixels.size(); i += 3)
        for (int c = 0; c < 3; ++c)
            out.pixels[i + c] = std::min(1.0f, std::max(0.0f, image.pixels[i + c] * gain[c]));
    return out;
}

ImageRGB contrast_enhance(const ImageRGB& image) {
    require_unit(image, "contrast_enhance");
    const float mean = mean_luminance(image);
    const float mu = 2.0f * (0.5f + mean);
    ImageRGB out = image;
    for (float& v : out.pixels) v = std::min(1.0f, std::max(0.0f, mu * (v - mean)));
    return out;
}

ImageRGB gamma_correct(const ImageRGB& image) {
    require_unit(image, "gamma_correct");
    ImageRGB out = image;
    for (float& v : out.pixels) v = std::pow(std::max(0.0f, v), 2.5f);
    return out;
}

DerivedInputs derive_inputs(const ImageRGB& image) {
    require_unit(image, "derive_inputs");
    DerivedInputs d;
    d.wb = to_signed(white_balance(image));
    d.ce = to_signed(contrast_enhance(image));
    d.gc = to_signed(gamma_correct(image));
    return d;
}

Tensor<float> image_to_tensor(const ImageRGB& image) {
    const std::size_t H = image.height, W = image.width;
    Tensor<float> t = Tensor<float>::zeros({1, 3, H, W});
    float* out = t.data().data();
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                out[(c * H + y) * W + x] = image.pixels[(y * W + x) * 3 + c];
    return t;
}

ImageRGB tensor_to_image(const Tensor<float>& tensor, Range range) {
    if (tensor.rank() != 4 || tensor.dim(0) != 1 || tensor.dim(1) != 3)
        throw DimensionError("tensor_to_image: expected 1x3xHxW tensor");
    const std::size_t H = tensor.dim(2), W = tensor.dim(3);
    ImageRGB img;
    img.height = static_cast<int>(H);
    img.width = static_cast<int>(W);
    img.range = range;
    img.pixels.resize(H * W * 3);
    const float* in = tensor.data().data();
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.pixels[(y * W + x) * 3 + c] = in[(c * H + y) * W + x];
    return img;
}

}  // namespace haan
