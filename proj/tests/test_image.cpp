#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "haan/image.hpp"
#include "support/testutil.hpp"

using namespace haan;

TEST_CASE("png byte mapping and exact round trip") {
    const std::string dir = testutil::temp_dir("png");
    Rng rng(41);
    ImageRGB img = ImageRGB::filled(13, 9, 0.0f);
    for (float& v : img.pixels)
        v = static_cast<float>(rng.index(256)) / 255.0f;
    img.at(0, 0, 0) = 1.0f;  // byte 255
    img.at(0, 0, 1) = 0.0f;  // byte 0

    const std::string path = dir + "/a.png";
    save_image(img, path);
    ImageRGB back = load_image(path);
    REQUIRE(back.height == 13);
    REQUIRE(back.width == 9);
    CHECK(back.at(0, 0, 0) == 1.0f);
    CHECK(back.at(0, 0, 1) == 0.0f);

    // save-load-save is byte identical
    const std::string path2 = dir + "/b.png";
    save_image(back, path2);
    ImageRGB again = load_image(path2);
    for (std::size_t i = 0; i < back.pixels.size(); ++i) CHECK(back.pixels[i] == again.pixels[i]);
}

TEST_CASE("value 0.5 quantizes to byte 128 (round half-up)") {
    const std::string dir = testutil::temp_dir("png_round");
    ImageRGB img = ImageRGB::filled(1, 1, 0.5f);
    save_image(img, dir + "/half.png");
    ImageRGB back = load_image(dir + "/half.png");
    CHECK(back.at(0, 0, 0) == doctest::Approx(128.0f / 255.0f));
}

TEST_CASE("gray png round trip") {
    const std::string dir = testutil::temp_dir("gray");
    GrayImage g;
    g.height = 4;
    g.width = 5;
    g.values.assign(20, 0.0f);
    for (int i = 0; i < 20; ++i) g.values[i] = static_cast<float>(i) / 255.0f;
    save_gray(g, dir + "/g.png");
    GrayImage back = load_gray(dir + "/g.png");
    for (int i = 0; i < 20; ++i) CHECK(back.values[i] == doctest::Approx(g.values[i]).epsilon(1e-6));
}

TEST_CASE("wrong format and missing files raise io errors with the path") {
    const std::string dir = testutil::temp_dir("badpng");
    CHECK_THROWS_WITH_AS(load_image(dir + "/missing.png"),
                         doctest::Contains("missing.png"), IoError);

    // gray file loaded as RGB
    GrayImage g;
    g.height = 2;
    g.width = 2;
    g.values.assign(4, 0.5f);
    save_gray(g, dir + "/gray.png");
    CHECK_THROWS_AS(load_image(dir + "/gray.png"), FormatError);

    // garbage payload
    {
        std::FILE* f = std::fopen((dir + "/junk.png").c_str(), "wb");
        std::fputs("definitely not a png", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_image(dir + "/junk.png"), FormatError);
}

TEST_CASE("signed/unit conversions are exact inverses") {
    CHECK(to_signed(ImageRGB::filled(1, 1, 0.0f)).at(0, 0, 0) == -1.0f);
    CHECK(to_signed(ImageRGB::filled(1, 1, 1.0f)).at(0, 0, 0) == 1.0f);
    CHECK(to_signed(ImageRGB::filled(1, 1, 0.5f)).at(0, 0, 0) == 0.0f);
    CHECK(to_unit(to_signed(ImageRGB::filled(1, 1, 0.5f))).at(0, 0, 0) == 0.5f);

    Rng rng(42);
    ImageRGB img = testutil::toy_scene(rng, 16);
    ImageRGB round = to_unit(to_signed(img));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(round.pixels[i] == img.pixels[i]);
}

TEST_CASE("resize identity, constants, and a bilinear oracle") {
    Rng rng(43);
    ImageRGB img = testutil::toy_scene(rng, 8);
    ImageRGB same = resize(img, 8, 8);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(same.pixels[i] == img.pixels[i]);

    ImageRGB constant = ImageRGB::filled(4, 6, 0.42f);
    ImageRGB grown = resize(constant, 9, 5);
    for (float v : grown.pixels) CHECK(v == doctest::Approx(0.42f));

    // 2x2 checkerboard to 4x4, against a direct half-pixel bilinear oracle.
    ImageRGB checker = ImageRGB::filled(2, 2, 0.0f);
    checker.at(0, 0, 0) = checker.at(0, 0, 1) = checker.at(0, 0, 2) = 1.0f;
    checker.at(1, 1, 0) = checker.at(1, 1, 1) = checker.at(1, 1, 2) = 1.0f;
    ImageRGB up = resize(checker, 4, 4);
    auto oracle = [&](int y, int x, int c) {
        const float sy = std::clamp((y + 0.5f) * 0.5f - 0.5f, 0.0f, 1.0f);
        const float sx = std::clamp((x + 0.5f) * 0.5f - 0.5f, 0.0f, 1.0f);
        const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
        const int y1 = std::min(1, y0 + 1), x1 = std::min(1, x0 + 1);
        const float fy = sy - y0, fx = sx - x0;
        return (checker.at(y0, x0, c) * (1 - fx) + checker.at(y0, x1, c) * fx) * (1 - fy) +
               (checker.at(y1, x0, c) * (1 - fx) + checker.at(y1, x1, c) * fx) * fy;
    };
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(up.at(y, x, 0) == doctest::Approx(oracle(y, x, 0)).epsilon(1e-6));
}

TEST_CASE("white balance: gray-world fixed point and gain arithmetic") {
    ImageRGB gray = ImageRGB::filled(8, 8, 0.37f);
    ImageRGB balanced = white_balance(gray);
    for (std::size_t i = 0; i < gray.pixels.size(); ++i)
        CHECK(balanced.pixels[i] == doctest::Approx(0.37f));

    // channel means (0.2, 0.4, 0.4): gains 5/3, 5/6, 5/6 against gray mean 1/3
    ImageRGB img = ImageRGB::filled(4, 4, 0.0f);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            img.at(y, x, 0) = 0.2f;
            img.at(y, x, 1) = 0.4f;
            img.at(y, x, 2) = 0.4f;
        }
    ImageRGB out = white_balance(img);
    double mean[3] = {0, 0, 0};
    for (std::size_t p = 0; p < out.pixel_count(); ++p)
        for (int c = 0; c < 3; ++c) mean[c] += out.pixels[p * 3 + c];
    for (double& m : mean) m /= out.pixel_count();
    CHECK(mean[0] == doctest::Approx(0.2 * 5.0 / 3.0).epsilon(1e-6));
    CHECK(mean[1] == doctest::Approx(0.4 * 5.0 / 6.0).epsilon(1e-6));
    CHECK(mean[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    CHECK(mean[0] == doctest::Approx(mean[1]).epsilon(1e-6));
    CHECK(mean[1] == doctest::Approx(mean[2]).epsilon(1e-6));
}

TEST_CASE("white balance equalizes channel means absent clamping") {
    Rng rng(44);
    ImageRGB img = testutil::toy_scene(rng, 12);
    for (float& v : img.pixels) v = 0.1f + 0.4f * v;  // keep gains from clamping
    ImageRGB out = white_balance(img);
    double mean[3] = {0, 0, 0};
    for (std::size_t p = 0; p < out.pixel_count(); ++p)
        for (int c = 0; c < 3; ++c) mean[c] += out.pixels[p * 3 + c];
    for (double& m : mean) m /= out.pixel_count();
    CHECK(std::abs(mean[0] - mean[1]) < 1e-6);
    CHECK(std::abs(mean[1] - mean[2]) < 1e-6);
}

TEST_CASE("white balance rejects a zero-mean channel") {
    ImageRGB img = ImageRGB::filled(4, 4, 0.5f);
    for (std::size_t p = 0; p < img.pixel_count(); ++p) img.pixels[p * 3 + 2] = 0.0f;
    CHECK_THROWS_AS(white_balance(img), ContractError);
}

TEST_CASE("contrast enhancement substitution cases") {
    // mean 0.5 -> mu = 2: pixel 0.75 -> 0.5
    ImageRGB img = ImageRGB::filled(2, 2, 0.5f);
    img.at(0, 0, 0) = 0.75f;
    img.at(1, 1, 2) = 0.25f;  // keeps the mean at exactly 0.5
    ImageRGB out = contrast_enhance(img);
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.5f));

    ImageRGB constant = ImageRGB::filled(3, 3, 0.8f);
    ImageRGB ce = contrast_enhance(constant);
    for (float v : ce.pixels) CHECK(v == doctest::Approx(0.0f));

    // mean 0.25 -> mu = 1.5: pixel 0.25 -> 0
    ImageRGB quarter = ImageRGB::filled(4, 4, 0.25f);
    ImageRGB ce2 = contrast_enhance(quarter);
    for (float v : ce2.pixels) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("contrast enhancement is zero-mean before clamping") {
    Rng rng(45);
    ImageRGB img = testutil::toy_scene(rng, 10);
    const float mean = mean_luminance(img);
    const float mu = 2.0f * (0.5f + mean);
    double sum = 0.0;
    for (float v : img.pixels) sum += mu * (v - mean);
    CHECK(std::abs(sum / img.pixels.size()) < 1e-6);
}

TEST_CASE("gamma correction fixed points, value, and monotonicity") {
    ImageRGB img = ImageRGB::filled(1, 3, 0.0f);
    img.at(0, 1, 0) = img.at(0, 1, 1) = img.at(0, 1, 2) = 1.0f;
    img.at(0, 2, 0) = img.at(0, 2, 1) = img.at(0, 2, 2) = 0.5f;
    ImageRGB out = gamma_correct(img);
    CHECK(out.at(0, 0, 0) == 0.0f);
    CHECK(out.at(0, 1, 0) == 1.0f);
    CHECK(out.at(0, 2, 0) == doctest::Approx(0.176777).epsilon(1e-5));

    float prev = -1.0f;
    for (int i = 0; i <= 1000; ++i) {
        ImageRGB px = ImageRGB::filled(1, 1, static_cast<float>(i) / 1000.0f);
        const float v = gamma_correct(px).at(0, 0, 0);
        CHECK(v >= prev);
        CHECK(v <= px.at(0, 0, 0) + 1e-7f);
        prev = v;
    }
}

TEST_CASE("derive_inputs on constant gray, shape preservation, determinism") {
    ImageRGB gray = ImageRGB::filled(6, 6, 0.5f);
    DerivedInputs d = derive_inputs(gray);
    CHECK(d.wb.range == Range::kSigned);
    CHECK(d.ce.range == Range::kSigned);
    CHECK(d.gc.range == Range::kSigned);
    CHECK(d.wb.height == 6);
    CHECK(d.ce.width == 6);

    // wb unchanged: 0.5 unit -> 0 signed; ce zero unit -> -1 signed;
    // gc = 0.5^2.5 unit -> 2*0.5^2.5 - 1 signed.
    for (float v : d.wb.pixels) CHECK(v == doctest::Approx(0.0f));
    for (float v : d.ce.pixels) CHECK(v == doctest::Approx(-1.0f));
    const float gc_expected = 2.0f * std::pow(0.5f, 2.5f) - 1.0f;
    for (float v : d.gc.pixels) CHECK(v == doctest::Approx(gc_expected).epsilon(1e-6));

    Rng rng(46);
    ImageRGB img = testutil::toy_scene(rng, 8);
    DerivedInputs d1 = derive_inputs(img);
    DerivedInputs d2 = derive_inputs(img);
    for (std::size_t i = 0; i < d1.wb.pixels.size(); ++i) {
        CHECK(d1.wb.pixels[i] == d2.wb.pixels[i]);
        CHECK(d1.ce.pixels[i] == d2.ce.pixels[i]);
        CHECK(d1.gc.pixels[i] == d2.gc.pixels[i]);
    }
}

TEST_CASE("image-tensor bridge round trips") {
    Rng rng(47);
    ImageRGB img = to_signed(testutil::toy_scene(rng, 5));
    Tensor<float> t = image_to_tensor(img);
    REQUIRE(t.shape() == Shape{1, 3, 5, 5});
    ImageRGB back = tensor_to_image(t, Range::kSigned);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(back.pixels[i] == img.pixels[i]);
}
