#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "haan/image.hpp"
#include "haan/metrics.hpp"
#include "haan/training.hpp"
#include "support/testutil.hpp"

using namespace haan;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code;
    std::string output;
};

CliResult run_cli(const std::string& args, const std::string& dir) {
    const std::string out_file = dir + "/cli_out.txt";
    const std::string cmd = std::string(HAAN_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(out_file);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WEXITSTATUS(status), ss.str()};
}

std::vector<char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
    const std::string dir = testutil::temp_dir("cli_usage");
    CHECK(run_cli("", dir).exit_code == 1);
    CHECK(run_cli("synth --no-such-flag", dir).exit_code == 1);
    CHECK(run_cli("unknown-subcommand", dir).exit_code == 1);
    CHECK(run_cli("--help", dir).exit_code == 0);
}

TEST_CASE("synth with beta zero reproduces the clear input byte for byte") {
    const std::string dir = testutil::temp_dir("cli_synth");
    Rng rng(110);
    ImageRGB clear = testutil::toy_scene(rng, 16);
    save_image(clear, dir + "/clear.png");
    GrayImage depth = testutil::toy_depth(rng, 16);
    for (float& v : depth.values) v /= 25.0f;  // keep within [0,1] for the PNG
    save_gray(depth, dir + "/depth.png");

    CliResult r = run_cli("synth --clear " + dir + "/clear.png --depth " + dir +
                              "/depth.png --beta 0 --airlight 0.9,0.9,0.9 --out " + dir + "/fog.png",
                          dir);
    CHECK(r.exit_code == 0);
    CHECK(file_bytes(dir + "/clear.png") == file_bytes(dir + "/fog.png"));
}

TEST_CASE("synth round trip through the inversion flag stays within one byte") {
    const std::string dir = testutil::temp_dir("cli_round");
    Rng rng(111);
    ImageRGB clear = testutil::toy_scene(rng, 16);
    save_image(clear, dir + "/clear.png");
    GrayImage depth = testutil::toy_depth(rng, 16);
    for (float& v : depth.values) v /= 25.0f;
    save_gray(depth, dir + "/depth.png");

    const std::string common = " --depth " + dir + "/depth.png --beta 0.04 --dmax 25 --airlight 0.9,0.85,0.8 ";
    CHECK(run_cli("synth --clear " + dir + "/clear.png" + common + "--out " + dir + "/fog.png", dir)
              .exit_code == 0);
    CHECK(run_cli("synth --invert --clear " + dir + "/fog.png" + common + "--out " + dir +
                      "/back.png",
                  dir)
              .exit_code == 0);

    ImageRGB original = load_image(dir + "/clear.png");
    ImageRGB back = load_image(dir + "/back.png");
    for (std::size_t i = 0; i < original.pixels.size(); ++i)
        CHECK(std::abs(original.pixels[i] - back.pixels[i]) <= 1.5f / 255.0f);
}

TEST_CASE("synth auto airlight prints the sampled value") {
    const std::string dir = testutil::temp_dir("cli_auto");
    Rng rng(112);
    save_image(testutil::toy_scene(rng, 16), dir + "/clear.png");
    GrayImage depth = testutil::toy_depth(rng, 16);
    for (float& v : depth.values) v /= 25.0f;
    save_gray(depth, dir + "/depth.png");
    CliResult r = run_cli("--seed 9 synth --clear " + dir + "/clear.png --depth " + dir +
                              "/depth.png --beta 0.05 --airlight auto --out " + dir + "/fog.png",
                          dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("airlight:") != std::string::npos);
    CHECK(r.output.find("rng seed: 9") != std::string::npos);
}

TEST_CASE("derive writes the three derived images, matching the module output") {
    const std::string dir = testutil::temp_dir("cli_derive");
    Rng rng(113);
    ImageRGB img = testutil::toy_scene(rng, 16);
    save_image(img, dir + "/scene.png");

    CliResult r = run_cli("derive --in " + dir + "/scene.png --outdir " + dir + "/derived", dir);
    CHECK(r.exit_code == 0);

    ImageRGB loaded = load_image(dir + "/scene.png");
    const std::string tmp = dir + "/expected.png";
    save_image(white_balance(loaded), tmp);
    CHECK(file_bytes(tmp) == file_bytes(dir + "/derived/scene_wb.png"));
    save_image(contrast_enhance(loaded), tmp);
    CHECK(file_bytes(tmp) == file_bytes(dir + "/derived/scene_ce.png"));
    save_image(gamma_correct(loaded), tmp);
    CHECK(file_bytes(tmp) == file_bytes(dir + "/derived/scene_gc.png"));
}

TEST_CASE("missing inputs exit with code 2 and name the path") {
    const std::string dir = testutil::temp_dir("cli_missing");
    CliResult r = run_cli("derive --in " + dir + "/absent.png --outdir " + dir, dir);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("absent.png") != std::string::npos);
}

TEST_CASE("malformed train config exits with code 1 and a field message") {
    const std::string dir = testutil::temp_dir("cli_cfg");
    {
        std::ofstream cfg(dir + "/bad.json");
        cfg << R"({"lr": "warp"})";
    }
    CliResult r = run_cli("train --config " + dir + "/bad.json", dir);
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("lr") != std::string::npos);
}

TEST_CASE("train, defog, segment-sky, and eval drive end to end at toy scale") {
    const std::string dir = testutil::temp_dir("cli_e2e");
    testutil::write_toy_dataset(dir + "/clear", dir + "/fog", 4, 24, 114);

    nlohmann::json cfg = {{"image_size", 24},   {"width_scale", 16},
                          {"batch_size", 2},    {"epochs", 1},
                          {"seed", 3},          {"fog_dir", dir + "/fog"},
                          {"clear_dir", dir + "/clear"}, {"checkpoint_out", dir + "/m.ckpt"},
                          {"log_interval", 1}};
    {
        std::ofstream out(dir + "/train.json");
        out << cfg.dump(2);
    }
    CHECK(run_cli("train --config " + dir + "/train.json", dir).exit_code == 0);
    CHECK(fs::exists(dir + "/m.ckpt"));
    CHECK(fs::exists(dir + "/m.ckpt.losses.jsonl"));

    // Fixed seed reproduces an identical checkpoint.
    nlohmann::json cfg2 = cfg;
    cfg2["checkpoint_out"] = dir + "/m2.ckpt";
    {
        std::ofstream out(dir + "/train2.json");
        out << cfg2.dump(2);
    }
    CHECK(run_cli("train --config " + dir + "/train2.json", dir).exit_code == 0);
    CHECK(file_bytes(dir + "/m.ckpt") == file_bytes(dir + "/m2.ckpt"));

    // defog a directory: every readable PNG is processed at its (floored) size.
    CHECK(run_cli("defog --in " + dir + "/fog --ckpt " + dir + "/m.ckpt --out " + dir + "/defog",
                  dir)
              .exit_code == 0);
    int produced = 0;
    for (const auto& e : fs::directory_iterator(dir + "/defog")) {
        ImageRGB out_img = load_image(e.path().string());
        CHECK(out_img.height == 24);
        CHECK(out_img.width == 24);
        ++produced;
    }
    CHECK(produced == 4);

    // --use-ctr refines through the attention generator and changes bytes.
    CHECK(run_cli("defog --use-ctr --in " + dir + "/fog --ckpt " + dir + "/m.ckpt --out " + dir +
                      "/defog_ctr",
                  dir)
              .exit_code == 0);
    bool any_diff = false;
    for (const auto& e : fs::directory_iterator(dir + "/defog")) {
        const std::string name = e.path().filename().string();
        any_diff = any_diff ||
                   file_bytes(e.path().string()) != file_bytes(dir + "/defog_ctr/" + name);
    }
    CHECK(any_diff);

    // eval against the clear references: report parses with matching schema.
    CHECK(run_cli("eval --foggy " + dir + "/fog --ref " + dir + "/clear --ckpt " + dir +
                      "/m.ckpt --report " + dir + "/report.json",
                  dir)
              .exit_code == 0);
    auto report = nlohmann::json::parse(std::ifstream(dir + "/report.json"));
    CHECK(report["records"].size() == 4);
    double mean = 0;
    for (const auto& rec : report["records"]) mean += rec["psnr_db"].get<double>();
    mean /= 4;
    CHECK(report["aggregates"]["mean_psnr_db"].get<double>() == doctest::Approx(mean).epsilon(1e-9));

    // segment-sky over an all-ground scene falls back to the dark channel.
    CHECK(run_cli("train-ssm --config " + dir + "/ssm.json", dir).exit_code == 2);  // missing file
    nlohmann::json ssm_cfg = {{"image_size", 24}, {"width_scale", 16}, {"batch_size", 2},
                              {"epochs", 1},      {"seed", 4},         {"ssm_dataset_size", 4},
                              {"checkpoint_out", dir + "/ssm.ckpt"}};
    {
        std::ofstream out(dir + "/ssm.json");
        out << ssm_cfg.dump(2);
    }
    CHECK(run_cli("train-ssm --config " + dir + "/ssm.json", dir).exit_code == 0);
    Rng rng(115);
    save_image(testutil::toy_scene(rng, 24), dir + "/ground.png");
    CliResult seg = run_cli("segment-sky --in " + dir + "/ground.png --ckpt " + dir +
                                "/ssm.ckpt --out " + dir + "/mask.png",
                            dir);
    CHECK(seg.exit_code == 0);
    CHECK(seg.output.find("airlight:") != std::string::npos);
    GrayImage mask = load_gray(dir + "/mask.png");
    CHECK(mask.height == 24);
    CHECK(mask.width == 24);
}

TEST_CASE("defog with an unreadable file in the directory reports and continues") {
    const std::string dir = testutil::temp_dir("cli_skip");
    testutil::write_toy_dataset(dir + "/clear", dir + "/fog", 2, 24, 116);
    {
        std::ofstream junk(dir + "/fog/zz_bad.png");
        junk << "nope";
    }
    nlohmann::json cfg = {{"image_size", 24},   {"width_scale", 16},
                          {"batch_size", 2},    {"epochs", 1},
                          {"seed", 5},          {"fog_dir", dir + "/fog"},
                          {"clear_dir", dir + "/clear"}, {"checkpoint_out", dir + "/m.ckpt"}};
    {
        std::ofstream out(dir + "/train.json");
        out << cfg.dump(2);
    }
    // The dataset loader wants valid PNGs, so train on the clear set twice.
    cfg["fog_dir"] = dir + "/clear";
    {
        std::ofstream out(dir + "/train.json");
        out << cfg.dump(2);
    }
    REQUIRE(run_cli("train --config " + dir + "/train.json", dir).exit_code == 0);

    CliResult r = run_cli("defog --in " + dir + "/fog --ckpt " + dir + "/m.ckpt --out " + dir +
                              "/out",
                          dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("zz_bad.png") != std::string::npos);
    int produced = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir + "/out")) ++produced;
    CHECK(produced == 2);
}
