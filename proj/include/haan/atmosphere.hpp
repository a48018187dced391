#pragma once

#include <array>

#include "haan/image.hpp"

namespace haan {

// Per-pixel fraction of scene radiance surviving the atmosphere, in (0,1].
struct TransmissionMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    static TransmissionMap filled(int height, int width, float value);
    float at(int y, int x) const { return values[std::size_t(y) * width + x]; }
};

struct AtmosphericLight {
    std::array<float, 3> rgb{0.0f, 0.0f, 0.0f};
};

// t = exp(-beta * d). depth must be non-negative and finite; beta >= 0
// (beta == 0 gives the fog-free identity).
TransmissionMap transmission_from_depth(const GrayImage& depth, float beta);

// I = J*t + A*(1-t), t broadcast across channels.
ImageRGB synthesize_fog(const ImageRGB& clear, const TransmissionMap& t, const AtmosphericLight& a);

// J = (I - A*(1-t')) / t' with t' = max(t, t_floor), clamped to [0,1].
ImageRGB invert_fog(const ImageRGB& foggy, const TransmissionMap& t, const AtmosphericLight& a,
                    float t_floor = 0.05f);

// Dark-channel airlight: brightest top fraction of dark-channel pixels
// (15x15 min window), then the max-intensity pixel's RGB among them.
AtmosphericLight atmospheric_light_dark_channel(const ImageRGB& foggy, float top_fraction = 0.001f);

struct SkyLightEstimate {
    AtmosphericLight light;
    bool used_dark_channel_fallback = false;
};

// Mean RGB over pixels with mask > 0.5; dark-channel fallback when the sky
// covers less than 1% of the image.
SkyLightEstimate atmospheric_light_from_sky(const ImageRGB& foggy, const GrayImage& sky_mask);

}  // namespace haan
