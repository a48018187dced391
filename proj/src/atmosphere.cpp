#include "haan/atmosphere.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace haan {

namespace {
constexpr int kDarkChannelWindow = 15;
constexpr float kSkyCoverageThreshold = 0.01f;

void require_match(const ImageRGB& img, const TransmissionMap& t, const char* op) {
    if (img.height != t.height || img.width != t.width)
        throw DimensionError(std::string(op) + ": image and transmission dims differ");
}
}  // namespace

TransmissionMap TransmissionMap::filled(int height, int width, float value) {
    if (height < 1 || width < 1) throw ContractError("transmission dims must be >= 1");
    if (!(value > 0.0f && value <= 1.0f)) throw ContractError("transmission values must lie in (0,1]");
    TransmissionMap t;
    t.height = height;
    t.width = width;
    t.values.assign(std::size_t(height) * width, value);
    return t;
}

TransmissionMap transmission_from_depth(const GrayImage& depth, float beta) {
    if (!(beta >= 0.0f) || !std::isfinite(beta))
        throw ContractError("transmission_from_depth: beta must be finite and >= 0");
    TransmissionMap t;
    t.height = depth.height;
    t.width = depth.width;
    t.values.resize(depth.values.size());
    for (std::size_t i = 0; i < depth.values.size(); ++i) {
        const float d = depth.values[i];
        if (!(d >= 0.0f) || !std::isfinite(d))
            throw ContractError("transmission_from_depth: depth must be finite and >= 0");
        t.values[i] = std::exp(-beta * d);
    }
    return t;
}

// Pixel math runs in double so the only float rounding is the stored result;
// dividing by a floored transmission would otherwise amplify it past the
// round-trip tolerance.
ImageRGB synthesize_fog(const ImageRGB& clear, const TransmissionMap& t, const AtmosphericLight& a) {
    if (clear.range != Range::kUnit) throw ContractError("synthesize_fog: expected unit-range image");
    require_match(clear, t, "synthesize_fog");
    ImageRGB out = clear;
    for (std::size_t p = 0; p < clear.pixel_count(); ++p) {
        const double tv = t.values[p];
        for (int c = 0; c < 3; ++c)
            out.pixels[p * 3 + c] = static_cast<float>(
                double(clear.pixels[p * 3 + c]) * tv + double(a.rgb[c]) * (1.0 - tv));
    }
    return out;
}

ImageRGB invert_fog(const ImageRGB& foggy, const TransmissionMap& t, const AtmosphericLight& a,
                    float t_floor) {
    if (foggy.range != Range::kUnit) throw ContractError("invert_fog: expected unit-range image");
    if (!(t_floor > 0.0f)) throw ContractError("invert_fog: t_floor must be positive");
    require_match(foggy, t, "invert_fog");
    ImageRGB out = foggy;
    for (std::size_t p = 0; p < foggy.pixel_count(); ++p) {
        const double tv = std::max(t.values[p], t_floor);
        for (int c = 0; c < 3; ++c) {
            const double j = (double(foggy.pixels[p * 3 + c]) - double(a.rgb[c]) * (1.0 - tv)) / tv;
            out.pixels[p * 3 + c] = static_cast<float>(std::min(1.0, std::max(0.0, j)));
        }
    }
    return out;
}

AtmosphericLight atmospheric_light_dark_channel(const ImageRGB& foggy, float top_fraction) {
    if (foggy.range != Range::kUnit)
        throw ContractError("atmospheric_light_dark_channel: expected unit-range image");
    const int H = foggy.height, W = foggy.width;
    const int r = kDarkChannelWindow / 2;

    // Per-pixel min over channels, then min over the window.
    std::vector<float> chan_min(foggy.pixel_count());
    for (std::size_t p = 0; p < foggy.pixel_count(); ++p)
        chan_min[p] = std::min({foggy.pixels[p * 3], foggy.pixels[p * 3 + 1], foggy.pixels[p * 3 + 2]});

    std::vector<float> dark(foggy.pixel_count());
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            float m = 1.0f;
            for (int wy = std::max(0, y - r); wy <= std::min(H - 1, y + r); ++wy)
                for (int wx = std::max(0, x - r); wx <= std::min(W - 1, x + r); ++wx)
                    m = std::min(m, chan_min[std::size_t(wy) * W + wx]);
            dark[std::size_t(y) * W + x] = m;
        }
    }

    const std::size_t n = foggy.pixel_count();
    const std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(static_cast<double>(n) * top_fraction)));
    std::vector<float> intensity(n);
    for (std::size_t p = 0; p < n; ++p)
        intensity[p] = (foggy.pixels[p * 3] + foggy.pixels[p * 3 + 1] + foggy.pixels[p * 3 + 2]) / 3.0f;

    // Brightest dark-channel pixels first; ties fall back to image intensity
    // so a saturated pixel is never shadowed by an equal-dark neighbor.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&dark, &intensity](std::size_t a, std::size_t b) {
                          if (dark[a] != dark[b]) return dark[a] > dark[b];
                          if (intensity[a] != intensity[b]) return intensity[a] > intensity[b];
                          return a < b;
                      });

    std::size_t best = order[0];
    for (std::size_t i = 1; i < k; ++i)
        if (intensity[order[i]] > intensity[best]) best = order[i];
    return {{foggy.pixels[best * 3], foggy.pixels[best * 3 + 1], foggy.pixels[best * 3 + 2]}};
}

SkyLightEstimate atmospheric_light_from_sky(const ImageRGB& foggy, const GrayImage& sky_mask) {
    if (foggy.height != sky_mask.height || foggy.width != sky_mask.width)
        throw DimensionError("atmospheric_light_from_sky: mask dims differ from image");
    double sum[3] = {0.0, 0.0, 0.0};
    std::size_t count = 0;
    for (std::size_t p = 0; p < foggy.pixel_count(); ++p) {
        if (sky_mask.values[p] > 0.5f) {
            sum[0] += foggy.pixels[p * 3];
            sum[1] += foggy.pixels[p * 3 + 1];
            sum[2] += foggy.pixels[p * 3 + 2];
            ++count;
        }
    }
    const double coverage = static_cast<double>(count) / static_cast<double>(foggy.pixel_count());
    if (coverage < kSkyCoverageThreshold)
        return {atmospheric_light_dark_channel(foggy), true};
    return {{{static_cast<float>(sum[0] / count), static_cast<float>(sum[1] / count),
              static_cast<float>(sum[2] / count)}},
            false};
}

}  // namespace haan
