#include <doctest.h>

#include <cmath>

#include "haan/atmosphere.hpp"
#include "support/testutil.hpp"

using namespace haan;

namespace {
GrayImage flat_depth(int h, int w, float value) {
    GrayImage d;
    d.height = h;
    d.width = w;
    d.values.assign(std::size_t(h) * w, value);
    return d;
}
}  // namespace

TEST_CASE("transmission_from_depth point values") {
    CHECK(transmission_from_depth(flat_depth(1, 1, 0.0f), 2.0f).values[0] == doctest::Approx(1.0f));
    CHECK(transmission_from_depth(flat_depth(1, 1, std::log(2.0f)), 1.0f).values[0] ==
          doctest::Approx(0.5f));
    CHECK(transmission_from_depth(flat_depth(1, 1, 50.0f), 0.04f).values[0] ==
          doctest::Approx(std::exp(-2.0)).epsilon(1e-6));
    CHECK_THROWS_AS(transmission_from_depth(flat_depth(1, 1, -0.5f), 1.0f), ContractError);
    CHECK_THROWS_AS(transmission_from_depth(flat_depth(1, 1, 1.0f), -1.0f), ContractError);
}

TEST_CASE("transmission is monotone decreasing in beta and depth") {
    float prev = 2.0f;
    for (float beta : {0.01f, 0.05f, 0.2f, 1.0f}) {
        const float t = transmission_from_depth(flat_depth(1, 1, 10.0f), beta).values[0];
        CHECK(t < prev);
        prev = t;
    }
    prev = 2.0f;
    for (float d : {0.0f, 1.0f, 5.0f, 20.0f}) {
        const float t = transmission_from_depth(flat_depth(1, 1, d), 0.1f).values[0];
        CHECK(t <= prev);
        prev = t;
    }
}

TEST_CASE("synthesize_fog endpoint and scalar cases") {
    Rng rng(51);
    ImageRGB clear = testutil::toy_scene(rng, 6);
    AtmosphericLight a{{0.9f, 0.9f, 0.9f}};

    ImageRGB unchanged = synthesize_fog(clear, TransmissionMap::filled(6, 6, 1.0f), a);
    for (std::size_t i = 0; i < clear.pixels.size(); ++i)
        CHECK(unchanged.pixels[i] == doctest::Approx(clear.pixels[i]));

    TransmissionMap tiny = TransmissionMap::filled(6, 6, 1.0f);
    for (float& v : tiny.values) v = 1e-20f;
    ImageRGB all_air = synthesize_fog(clear, tiny, a);
    for (std::size_t i = 0; i < all_air.pixels.size(); ++i)
        CHECK(all_air.pixels[i] == doctest::Approx(0.9f).epsilon(1e-6));

    ImageRGB j = ImageRGB::filled(1, 1, 0.8f);
    ImageRGB fogged = synthesize_fog(j, TransmissionMap::filled(1, 1, 0.25f), a);
    CHECK(fogged.at(0, 0, 0) == doctest::Approx(0.8 * 0.25 + 0.9 * 0.75));  // 0.875

    ImageRGB wrong = ImageRGB::filled(3, 3, 0.5f);
    CHECK_THROWS_AS(synthesize_fog(wrong, TransmissionMap::filled(2, 2, 0.5f), a), DimensionError);
}

TEST_CASE("synthesis stays in the convex hull of scene and airlight") {
    Rng rng(52);
    ImageRGB clear = testutil::toy_scene(rng, 8);
    AtmosphericLight a{{0.8f, 0.85f, 0.95f}};
    TransmissionMap t = TransmissionMap::filled(8, 8, 1.0f);
    for (float& v : t.values) v = static_cast<float>(rng.uniform(0.05, 1.0));
    ImageRGB foggy = synthesize_fog(clear, t, a);
    for (std::size_t p = 0; p < foggy.pixel_count(); ++p)
        for (int c = 0; c < 3; ++c) {
            const float lo = std::min(clear.pixels[p * 3 + c], a.rgb[c]);
            const float hi = std::max(clear.pixels[p * 3 + c], a.rgb[c]);
            CHECK(foggy.pixels[p * 3 + c] >= lo - 1e-6f);
            CHECK(foggy.pixels[p * 3 + c] <= hi + 1e-6f);
        }
}

TEST_CASE("invert_fog round trips and saturates at the floor") {
    Rng rng(53);
    ImageRGB clear = testutil::toy_scene(rng, 8);
    AtmosphericLight a{{0.85f, 0.9f, 0.8f}};
    TransmissionMap t = TransmissionMap::filled(8, 8, 1.0f);
    for (float& v : t.values) v = static_cast<float>(rng.uniform(0.05, 1.0));

    ImageRGB recovered = invert_fog(synthesize_fog(clear, t, a), t, a, 0.05f);
    for (std::size_t i = 0; i < clear.pixels.size(); ++i)
        CHECK(recovered.pixels[i] == doctest::Approx(clear.pixels[i]).epsilon(1e-5));

    ImageRGB foggy = testutil::toy_scene(rng, 4);
    ImageRGB same = invert_fog(foggy, TransmissionMap::filled(4, 4, 1.0f), a);
    for (std::size_t i = 0; i < foggy.pixels.size(); ++i)
        CHECK(same.pixels[i] == doctest::Approx(foggy.pixels[i]));

    // I = A collapses to J = A regardless of the floored transmission.
    ImageRGB air = ImageRGB::filled(2, 2, 0.0f);
    for (std::size_t p = 0; p < air.pixel_count(); ++p)
        for (int c = 0; c < 3; ++c) air.pixels[p * 3 + c] = a.rgb[c];
    TransmissionMap below = TransmissionMap::filled(2, 2, 0.01f);
    ImageRGB j = invert_fog(air, below, a, 0.05f);
    for (std::size_t p = 0; p < j.pixel_count(); ++p)
        for (int c = 0; c < 3; ++c) CHECK(j.pixels[p * 3 + c] == doctest::Approx(a.rgb[c]));

    CHECK_THROWS_AS(invert_fog(air, below, a, 0.0f), ContractError);
}

TEST_CASE("dark channel airlight: constant image and bright-pixel recovery") {
    ImageRGB constant = ImageRGB::filled(10, 10, 0.43f);
    AtmosphericLight a = atmospheric_light_dark_channel(constant);
    for (int c = 0; c < 3; ++c) CHECK(a.rgb[c] == doctest::Approx(0.43f));

    // One bright pixel in a dark field at 8x8; brute force says it wins.
    ImageRGB field = ImageRGB::filled(8, 8, 0.1f);
    field.at(5, 2, 0) = 0.95f;
    field.at(5, 2, 1) = 0.9f;
    field.at(5, 2, 2) = 0.85f;
    AtmosphericLight bright = atmospheric_light_dark_channel(field, 0.02f);
    CHECK(bright.rgb[0] == doctest::Approx(0.95f));
    CHECK(bright.rgb[1] == doctest::Approx(0.9f));
    CHECK(bright.rgb[2] == doctest::Approx(0.85f));
}

TEST_CASE("dark channel candidate count rounds up to at least one") {
    ImageRGB tiny = ImageRGB::filled(3, 3, 0.2f);
    tiny.at(1, 1, 0) = tiny.at(1, 1, 1) = tiny.at(1, 1, 2) = 0.7f;
    // 9 pixels * 0.001 < 1, so exactly one candidate must still exist.
    AtmosphericLight a = atmospheric_light_dark_channel(tiny, 0.001f);
    CHECK(a.rgb[0] >= 0.2f);
}

TEST_CASE("dark channel estimate is invariant under horizontal flip") {
    Rng rng(54);
    ImageRGB img = testutil::toy_scene(rng, 12);
    ImageRGB flipped = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) flipped.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    AtmosphericLight a1 = atmospheric_light_dark_channel(img);
    AtmosphericLight a2 = atmospheric_light_dark_channel(flipped);
    for (int c = 0; c < 3; ++c) CHECK(a1.rgb[c] == doctest::Approx(a2.rgb[c]));
}

TEST_CASE("sky-region airlight with fallback") {
    Rng rng(55);
    ImageRGB img = testutil::toy_scene(rng, 10);

    GrayImage all_sky = flat_depth(10, 10, 1.0f);
    SkyLightEstimate est = atmospheric_light_from_sky(img, all_sky);
    CHECK_FALSE(est.used_dark_channel_fallback);
    double mean[3] = {0, 0, 0};
    for (std::size_t p = 0; p < img.pixel_count(); ++p)
        for (int c = 0; c < 3; ++c) mean[c] += img.pixels[p * 3 + c];
    for (int c = 0; c < 3; ++c)
        CHECK(est.light.rgb[c] == doctest::Approx(mean[c] / img.pixel_count()).epsilon(1e-5));

    GrayImage no_sky = flat_depth(10, 10, 0.0f);
    SkyLightEstimate fallback = atmospheric_light_from_sky(img, no_sky);
    CHECK(fallback.used_dark_channel_fallback);
    AtmosphericLight direct = atmospheric_light_dark_channel(img);
    for (int c = 0; c < 3; ++c) CHECK(fallback.light.rgb[c] == doctest::Approx(direct.rgb[c]));

    // Half-sky constant 0.9 gray.
    ImageRGB half = ImageRGB::filled(10, 10, 0.2f);
    GrayImage half_mask = flat_depth(10, 10, 0.0f);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 10; ++x) {
            for (int c = 0; c < 3; ++c) half.at(y, x, c) = 0.9f;
            half_mask.at(y, x) = 1.0f;
        }
    SkyLightEstimate half_est = atmospheric_light_from_sky(half, half_mask);
    CHECK_FALSE(half_est.used_dark_channel_fallback);
    for (int c = 0; c < 3; ++c) CHECK(half_est.light.rgb[c] == doctest::Approx(0.9f));
}
