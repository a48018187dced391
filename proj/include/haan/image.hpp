#pragma once

#include <string>
#include <vector>

#include "haan/common.hpp"
#include "haan/tensor.hpp"

namespace haan {

enum class Range { kUnit, kSigned };

// HxWx3 interleaved raster with a declared value domain.
struct ImageRGB {
    int height = 0;
    int width = 0;
    Range range = Range::kUnit;
    std::vector<float> pixels;

    static ImageRGB filled(int height, int width, float value, Range range = Range::kUnit);

    float& at(int y, int x, int c) { return pixels[(std::size_t(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[(std::size_t(y) * width + x) * 3 + c]; }
    std::size_t pixel_count() const { return std::size_t(height) * width; }
};

// Single-channel raster (depth maps, masks, gray conversions).
struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    float& at(int y, int x) { return values[std::size_t(y) * width + x]; }
    float at(int y, int x) const { return values[std::size_t(y) * width + x]; }
};

// 8-bit RGB PNG; byte v maps to v/255 in unit range. Save rounds half-up.
ImageRGB load_image(const std::string& path);
void save_image(const ImageRGB& image, const std::string& path);

// 8-bit grayscale PNG, same byte mapping.
GrayImage load_gray(const std::string& path);
void save_gray(const GrayImage& image, const std::string& path);

// [0,1] <-> [-1,1], exact mutual inverses.
ImageRGB to_signed(const ImageRGB& image);
ImageRGB to_unit(const ImageRGB& image);

// Bilinear, half-pixel centers; identity when the size is unchanged.
ImageRGB resize(const ImageRGB& image, int target_h, int target_w);
GrayImage resize_gray(const GrayImage& image, int target_h, int target_w);

// Gray-world gains, clamped to [0,1]. Unit-range input.
ImageRGB white_balance(const ImageRGB& image);

// mu*(I - mean) with mu = 2*(0.5 + mean), clamped to [0,1].
ImageRGB contrast_enhance(const ImageRGB& image);

// I^2.5 per component.
ImageRGB gamma_correct(const ImageRGB& image);

// The three derived images fed to the attention-fusion generator, already
// converted to signed range.
struct DerivedInputs {
    ImageRGB wb, ce, gc;
};
DerivedInputs derive_inputs(const ImageRGB& image);

// Bridges between rasters and 1x3xHxW tensors.
Tensor<float> image_to_tensor(const ImageRGB& image);
ImageRGB tensor_to_image(const Tensor<float>& tensor, Range range);

float mean_luminance(const ImageRGB& image);

}  // namespace haan
