#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "haan/training.hpp"
#include "support/testutil.hpp"

using namespace haan;
namespace fs = std::filesystem;

namespace {

std::vector<char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

TrainConfig tiny_config(const std::string& dir, std::uint64_t seed) {
    const std::string clear_dir = dir + "/clear", fog_dir = dir + "/fog";
    testutil::write_toy_dataset(clear_dir, fog_dir, 4, 24, 99);
    TrainConfig c;
    c.image_size = 24;
    c.width_scale = 16;
    c.batch_size = 2;
    c.epochs = 2;  // 4 images / batch 2 -> 2 iterations per epoch
    c.seed = seed;
    c.fog_dir = fog_dir;
    c.clear_dir = clear_dir;
    c.checkpoint_out = dir + "/out.ckpt";
    c.log_interval = 1;
    return c;
}

HaanNets tiny_nets(std::uint64_t seed) {
    ArchConfig arch;
    arch.width_scale = 16;
    arch.image_size = 24;
    return make_haan_nets(arch, seed);
}

std::vector<double> log_totals(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<double> totals;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        for (const char* key : {"step", "adv_r", "adv_ctr", "adv_s", "cyc1", "cyc2", "perc", "total"})
            REQUIRE(j.contains(key));
        totals.push_back(j.at("total").get<double>());
    }
    return totals;
}

}  // namespace

TEST_CASE("dual-path steps preserve shapes and signed range") {
    HaanNets nets = tiny_nets(1);
    Rng rng(90);
    Tensor<float> foggy = testutil::random_tensor<float>(rng, {2, 3, 24, 24}, -0.9, 0.9);
    Tensor<float> clear = testutil::random_tensor<float>(rng, {2, 3, 24, 24}, -0.9, 0.9);

    Fog2FogfreeOutputs f2 = fog2fogfree_step(nets, foggy, Mode::kEval);
    for (const Tensor<float>* t : {&f2.defogged, &f2.recon_fog1, &f2.recovered, &f2.recon_fog2}) {
        CHECK(t->shape() == foggy.shape());
        for (float v : t->data()) {
            CHECK(v >= -1.0f);
            CHECK(v <= 1.0f);
        }
    }

    Fogfree2FogOutputs ff2 = fogfree2fog_step(nets, clear, rng, Mode::kEval);
    for (const Tensor<float>* t :
         {&ff2.synthesized, &ff2.recon_fogfree, &ff2.defogged_synth, &ff2.recovered}) {
        CHECK(t->shape() == clear.shape());
        for (float v : t->data()) {
            CHECK(v >= -1.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("cycle loss reaches the defog generator but not the discriminators") {
    HaanNets nets = tiny_nets(2);
    Rng rng(91);
    Tensor<float> foggy = testutil::random_tensor<float>(rng, {1, 3, 24, 24}, -0.9, 0.9);

    nets.defog.params.zero_grads();
    Tape<float> tape;
    {
        Tape<float>::TapeScope scope(tape);
        Fog2FogfreeOutputs f2 = fog2fogfree_step(nets, foggy, Mode::kTrain);
        tape.backward(cycle_loss(foggy, f2.recon_fog1, f2.recon_fog2));
    }

    bool defog_touched = false;
    for (const auto& e : nets.defog.params.entries)
        if (e.trainable && e.tensor.has_grad())
            for (float g : e.tensor.grad()) defog_touched = defog_touched || g != 0.0f;
    CHECK(defog_touched);

    for (const auto& e : nets.d_fogfree.params.entries)
        if (e.tensor.has_grad())
            for (float g : e.tensor.grad()) CHECK(g == 0.0f);
    for (const auto& e : nets.d_fog.params.entries)
        if (e.tensor.has_grad())
            for (float g : e.tensor.grad()) CHECK(g == 0.0f);
}

TEST_CASE("fogfree path feeds gradient into the defog generator as well") {
    HaanNets nets = tiny_nets(3);
    Rng rng(92);
    Tensor<float> clear = testutil::random_tensor<float>(rng, {1, 3, 24, 24}, -0.9, 0.9);

    nets.defog.params.zero_grads();
    Tape<float> tape;
    {
        Tape<float>::TapeScope scope(tape);
        Fogfree2FogOutputs ff2 = fogfree2fog_step(nets, clear, rng, Mode::kTrain);
        tape.backward(cycle_loss(clear, ff2.recon_fogfree, ff2.recovered));
    }
    bool touched = false;
    for (const auto& e : nets.defog.params.entries)
        if (e.trainable && e.tensor.has_grad())
            for (float g : e.tensor.grad()) touched = touched || g != 0.0f;
    CHECK(touched);
}

TEST_CASE("a generator step leaves discriminator parameter bytes untouched") {
    HaanNets nets = tiny_nets(4);
    Rng rng(93);
    Tensor<float> foggy = testutil::random_tensor<float>(rng, {1, 3, 24, 24}, -0.9, 0.9);

    std::vector<std::vector<float>> d_before;
    for (const auto& e : nets.d_fogfree.params.entries) d_before.push_back(e.tensor.data());

    nets.defog.params.zero_grads();
    nets.d_fogfree.params.zero_grads();
    Tape<float> tape;
    {
        Tape<float>::TapeScope scope(tape);
        Fog2FogfreeOutputs f2 = fog2fogfree_step(nets, foggy, Mode::kTrain);
        Tensor<float> adv = lsgan_generator_loss(
            discriminator_forward(nets.d_fogfree, f2.defogged, Mode::kFrozenStats));
        tape.backward(add(adv, cycle_loss(foggy, f2.recon_fog1, f2.recon_fog2)));
    }
    AdamState<float> state;
    AdamHyper<float> hyper{1e-3f, 0.9f, 0.999f, 1e-8f};
    adam_step(nets.defog.params, state, hyper, 1);

    for (std::size_t i = 0; i < nets.d_fogfree.params.entries.size(); ++i) {
        const auto& now = nets.d_fogfree.params.entries[i].tensor.data();
        REQUIRE(now.size() == d_before[i].size());
        for (std::size_t j = 0; j < now.size(); ++j) CHECK(now[j] == d_before[i][j]);
    }
}

TEST_CASE("checkpoint save/load round trip is bitwise identical") {
    HaanNets nets = tiny_nets(5);
    Checkpoint ckpt = nets_to_checkpoint(nets, 1234);
    const std::string dir = testutil::temp_dir("ckpt");
    save_checkpoint(ckpt, dir + "/a.ckpt");

    Checkpoint loaded = load_checkpoint(dir + "/a.ckpt");
    CHECK(loaded.step == 1234);
    REQUIRE(loaded.sections.size() == ckpt.sections.size());
    for (std::size_t i = 0; i < ckpt.sections.size(); ++i) {
        CHECK(loaded.sections[i].name == ckpt.sections[i].name);
        CHECK(loaded.sections[i].dims == ckpt.sections[i].dims);
        REQUIRE(loaded.sections[i].values.size() == ckpt.sections[i].values.size());
        for (std::size_t j = 0; j < ckpt.sections[i].values.size(); ++j)
            CHECK(loaded.sections[i].values[j] == ckpt.sections[i].values[j]);
    }

    save_checkpoint(loaded, dir + "/b.ckpt");
    CHECK(file_bytes(dir + "/a.ckpt") == file_bytes(dir + "/b.ckpt"));

    HaanNets restored = tiny_nets(17);  // different init, then overwritten
    nets_from_checkpoint(loaded, restored);
    for (std::size_t i = 0; i < nets.defog.params.entries.size(); ++i) {
        const auto& a = nets.defog.params.entries[i].tensor.data();
        const auto& b = restored.defog.params.entries[i].tensor.data();
        for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
    }
}

TEST_CASE("checkpoint loader rejects corruption before returning state") {
    const std::string dir = testutil::temp_dir("badckpt");
    HaanNets nets = tiny_nets(6);
    save_checkpoint(nets_to_checkpoint(nets, 7), dir + "/good.ckpt");

    SUBCASE("magic mismatch") {
        std::vector<char> bytes = file_bytes(dir + "/good.ckpt");
        bytes[0] = 'X';
        std::ofstream out(dir + "/bad_magic.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<long>(bytes.size()));
        out.close();
        CHECK_THROWS_AS(load_checkpoint(dir + "/bad_magic.ckpt"), FormatError);
    }
    SUBCASE("truncation names the failing section") {
        std::vector<char> bytes = file_bytes(dir + "/good.ckpt");
        bytes.resize(bytes.size() / 2);
        std::ofstream out(dir + "/trunc.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<long>(bytes.size()));
        out.close();
        CHECK_THROWS_WITH_AS(load_checkpoint(dir + "/trunc.ckpt"), doctest::Contains("truncated"),
                             FormatError);
    }
    SUBCASE("unknown version is rejected") {
        std::vector<char> bytes = file_bytes(dir + "/good.ckpt");
        bytes[4] = 9;  // version field
        std::ofstream out(dir + "/vers.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<long>(bytes.size()));
        out.close();
        CHECK_THROWS_WITH_AS(load_checkpoint(dir + "/vers.ckpt"), doctest::Contains("version"),
                             FormatError);
    }
}

TEST_CASE("config parsing validates fields") {
    CHECK_THROWS_WITH_AS(train_config_from_json_text("{ nope", "cfg"), doctest::Contains("invalid JSON"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(train_config_from_json_text(R"({"mystery": 1})", "cfg"),
                         doctest::Contains("mystery"), ConfigError);
    CHECK_THROWS_WITH_AS(train_config_from_json_text(R"({"lr": "fast"})", "cfg"),
                         doctest::Contains("lr"), ConfigError);
    CHECK_THROWS_WITH_AS(train_config_from_json_text(R"({"image_size": 30})", "cfg"),
                         doctest::Contains("image_size"), ConfigError);

    TrainConfig c = train_config_from_json_text(
        R"({"image_size": 24, "width_scale": 16, "lr": 2e-4, "batch_size": 1, "epochs": 3,
            "seed": 5, "lambdas": {"lambda1": 7.5}, "fog_dir": "f", "clear_dir": "c",
            "checkpoint_out": "o.ckpt"})",
        "cfg");
    CHECK(c.image_size == 24);
    CHECK(c.lr == doctest::Approx(2e-4));
    CHECK(c.lambdas.lambda1 == doctest::Approx(7.5));
    CHECK(c.lambdas.lambda2 == doctest::Approx(10.0));  // untouched default
    CHECK(c.epochs == 3);
}

TEST_CASE("training is deterministic and resumable") {
    const std::string dir = testutil::temp_dir("train");

    TrainConfig a = tiny_config(dir + "/a", 42);
    TrainConfig b = tiny_config(dir + "/b", 42);
    Checkpoint ca = train(a);
    Checkpoint cb = train(b);
    CHECK(file_bytes(a.checkpoint_out) == file_bytes(b.checkpoint_out));
    CHECK(ca.step == 4);
    CHECK(cb.step == 4);

    // Interrupted at step 2, resumed to 4: same bytes and same logged losses.
    TrainConfig first_half = tiny_config(dir + "/c", 42);
    first_half.epochs = 1;
    train(first_half);
    TrainConfig second_half = first_half;
    second_half.epochs = 2;
    second_half.resume_from = first_half.checkpoint_out;
    second_half.checkpoint_out = dir + "/c/resumed.ckpt";
    second_half.log_path = dir + "/c/resumed.jsonl";
    train(second_half);
    CHECK(file_bytes(second_half.checkpoint_out) == file_bytes(a.checkpoint_out));

    std::vector<double> full = log_totals(a.resolved_log_path());
    std::vector<double> resumed = log_totals(second_half.log_path);
    REQUIRE(full.size() == 4);
    REQUIRE(resumed.size() == 2);
    CHECK(resumed[0] == doctest::Approx(full[2]).epsilon(1e-6));
    CHECK(resumed[1] == doctest::Approx(full[3]).epsilon(1e-6));
}

TEST_CASE("training aborts with a step diagnostic when the loss explodes") {
    const std::string dir = testutil::temp_dir("nan");
    TrainConfig c = tiny_config(dir, 43);
    c.lr = 1e12;
    CHECK_THROWS_WITH_AS(train(c), doctest::Contains("step"), NumericError);
}

TEST_CASE("synthetic sky samples are deterministic and labeled sensibly") {
    Rng r1(44), r2(44);
    SkySample s1 = synth_sky_sample(r1, 24);
    SkySample s2 = synth_sky_sample(r2, 24);
    for (std::size_t i = 0; i < s1.foggy.pixels.size(); ++i)
        CHECK(s1.foggy.pixels[i] == s2.foggy.pixels[i]);

    // Sky occupies the top, ground the bottom.
    CHECK(s1.mask.at(0, 0) == 1.0f);
    CHECK(s1.mask.at(23, 0) == 0.0f);

    // The fogged sky sits close to the airlight (deep fog).
    double sky_err = 0.0;
    std::size_t sky_count = 0;
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x)
            if (s1.mask.at(y, x) > 0.5f) {
                for (int c = 0; c < 3; ++c)
                    sky_err += std::abs(s1.foggy.at(y, x, c) - s1.airlight.rgb[c]);
                sky_count += 3;
            }
    CHECK(sky_err / sky_count < 0.05);
}

TEST_CASE("train_ssm runs and produces a loadable sky checkpoint") {
    const std::string dir = testutil::temp_dir("ssm");
    TrainConfig c;
    c.image_size = 24;
    c.width_scale = 16;
    c.batch_size = 2;
    c.epochs = 1;
    c.seed = 45;
    c.ssm_dataset_size = 4;
    c.checkpoint_out = dir + "/ssm.ckpt";
    Checkpoint ckpt = train_ssm(c);
    CHECK(ckpt.find("ssm.seg.out.weight") != nullptr);
    CHECK(ckpt.find("meta.ssm_trained") != nullptr);

    // Loadable into a HAAN bundle as the frozen airlight estimator.
    ArchConfig arch;
    arch.width_scale = 16;
    arch.image_size = 24;
    HaanNets nets = make_haan_nets(arch, 46);
    load_params(ckpt, "ssm", nets.ssm.params);
}
