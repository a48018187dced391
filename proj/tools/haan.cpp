#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "haan/atmosphere.hpp"
#include "haan/checkpoint.hpp"
#include "haan/image.hpp"
#include "haan/metrics.hpp"
#include "haan/networks.hpp"
#include "haan/training.hpp"

namespace fs = std::filesystem;
using namespace haan;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

AtmosphericLight parse_airlight(const std::string& text) {
    AtmosphericLight a;
    std::istringstream ss(text);
    char comma1 = 0, comma2 = 0;
    if (!(ss >> a.rgb[0] >> comma1 >> a.rgb[1] >> comma2 >> a.rgb[2]) || comma1 != ',' ||
        comma2 != ',')
        throw ConfigError("airlight must be \"r,g,b\" or \"auto\": " + text);
    for (float v : a.rgb)
        if (v < 0.0f || v > 1.0f) throw ConfigError("airlight components must be in [0,1]");
    return a;
}

std::vector<fs::path> png_inputs(const std::string& in) {
    std::vector<fs::path> files;
    if (fs::is_directory(in)) {
        for (const auto& entry : fs::directory_iterator(in))
            if (entry.is_regular_file() && entry.path().extension() == ".png")
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(in);
    }
    return files;
}

int floor_to_multiple(int v, int m) { return std::max(m, (v / m) * m); }

struct SynthArgs {
    std::string clear, depth, airlight = "auto", out;
    double beta = 0.0, dmax = 50.0;
    bool invert = false;
};

int cmd_synth(const SynthArgs& args, Rng& rng) {
    ImageRGB clear = load_image(args.clear);
    GrayImage depth = load_gray(args.depth);
    if (depth.height != clear.height || depth.width != clear.width)
        depth = resize_gray(depth, clear.height, clear.width);
    for (float& v : depth.values) v *= static_cast<float>(args.dmax);

    AtmosphericLight a;
    if (args.airlight == "auto") {
        const float g = static_cast<float>(rng.uniform(0.7, 1.0));
        a = {{g, g, g}};
        std::cout << "airlight: " << g << "," << g << "," << g << "\n";
    } else {
        a = parse_airlight(args.airlight);
    }

    const TransmissionMap t = transmission_from_depth(depth, static_cast<float>(args.beta));
    const ImageRGB result = args.invert ? invert_fog(clear, t, a) : synthesize_fog(clear, t, a);
    save_image(result, args.out);
    return kExitOk;
}

int cmd_derive(const std::string& in, const std::string& outdir) {
    ImageRGB image = load_image(in);
    fs::create_directories(outdir);
    const std::string stem = fs::path(in).stem().string();
    save_image(white_balance(image), (fs::path(outdir) / (stem + "_wb.png")).string());
    save_image(contrast_enhance(image), (fs::path(outdir) / (stem + "_ce.png")).string());
    save_image(gamma_correct(image), (fs::path(outdir) / (stem + "_gc.png")).string());
    return kExitOk;
}

int cmd_train(const std::string& config_path) {
    TrainConfig config = train_config_from_json_file(config_path);
    train(config, &std::cerr);
    std::cerr << "checkpoint written: " << config.checkpoint_out << "\n";
    // A checkpoint that cannot be reloaded is useless; validate now.
    load_checkpoint(config.checkpoint_out);
    return kExitOk;
}

int cmd_train_ssm(const std::string& config_path) {
    TrainConfig config = train_config_from_json_file(config_path);
    train_ssm(config, &std::cerr);
    std::cerr << "checkpoint written: " << config.checkpoint_out << "\n";
    load_checkpoint(config.checkpoint_out);
    return kExitOk;
}

int cmd_defog(const std::string& in, const std::string& ckpt_path, const std::string& out_dir,
              bool use_ctr) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    auto arch = read_arch(ckpt);
    if (!arch) throw FormatError("checkpoint has no architecture metadata: " + ckpt_path);

    Rng rng = Rng::derive(0, 1);
    DefogGenerator<float> defog = make_defog_generator<float>(*arch, rng);
    load_params(ckpt, "m_r", defog.params);
    CtrGenerator<float> ctr;
    if (use_ctr) {
        Rng ctr_rng = Rng::derive(0, 4);
        ctr = make_ctr_generator<float>(*arch, ctr_rng);
        load_params(ckpt, "m_ctr", ctr.params);
    }

    fs::create_directories(out_dir);
    for (const fs::path& path : png_inputs(in)) {
        try {
            ImageRGB foggy = load_image(path.string());
            foggy = resize(foggy, floor_to_multiple(foggy.height, 4), floor_to_multiple(foggy.width, 4));
            Tensor<float> result = defog_forward(defog, image_to_tensor(to_signed(foggy)), Mode::kEval);
            if (use_ctr) {
                DerivedInputs d = derive_inputs(foggy);
                result = ctr_forward(ctr, result, image_to_tensor(d.wb), image_to_tensor(d.ce),
                                     image_to_tensor(d.gc), Mode::kEval);
            }
            const fs::path out_path = fs::path(out_dir) / path.filename();
            save_image(to_unit(tensor_to_image(result, Range::kSigned)), out_path.string());
        } catch (const Error& e) {
            std::cerr << "skipping " << path.string() << ": " << e.what() << "\n";
        }
    }
    return kExitOk;
}

int cmd_eval(const std::string& foggy_dir, const std::string& ref_dir, const std::string& ckpt_path,
             const std::string& report_path) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    MetricsReport report = evaluate(foggy_dir, ref_dir, ckpt, fs::path(ckpt_path).filename().string());
    write_report(report, report_path);
    std::cerr << "evaluated " << report.records.size() << " images; report: " << report_path << "\n";
    return kExitOk;
}

int cmd_segment_sky(const std::string& in, const std::string& ckpt_path, const std::string& out) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    auto arch = read_arch(ckpt);
    if (!arch) throw FormatError("checkpoint has no architecture metadata: " + ckpt_path);
    Rng rng = Rng::derive(0, 3);
    SkySegmenter<float> ssm = make_sky_segmenter<float>(*arch, rng);
    load_params(ckpt, "ssm", ssm.params);

    const ImageRGB original = load_image(in);
    ImageRGB resized = resize(original, floor_to_multiple(original.height, 8),
                              floor_to_multiple(original.width, 8));
    SsmOutput<float> result = ssm_forward(ssm, image_to_tensor(to_signed(resized)), Mode::kEval);

    GrayImage mask;
    mask.height = static_cast<int>(result.sky_prob.dim(2));
    mask.width = static_cast<int>(result.sky_prob.dim(3));
    mask.values = result.sky_prob.data();
    mask = resize_gray(mask, original.height, original.width);
    save_gray(mask, out);

    const SkyLightEstimate estimate = atmospheric_light_from_sky(original, mask);
    std::cout << "airlight: " << estimate.light.rgb[0] << "," << estimate.light.rgb[1] << ","
              << estimate.light.rgb[2] << "\n";
    if (estimate.used_dark_channel_fallback)
        std::cout << "note: sky coverage below 1%, dark-channel fallback used\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"HAAN single-image defogging toolkit"};
    app.require_subcommand(1);
    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "seed for the process-wide random generator");

    SynthArgs synth_args;
    CLI::App* synth = app.add_subcommand("synth", "synthesize (or invert) fog with the scattering model");
    synth->add_option("--clear", synth_args.clear, "input image (foggy input when --invert)")->required();
    synth->add_option("--depth", synth_args.depth, "single-channel depth PNG")->required();
    synth->add_option("--beta", synth_args.beta, "scattering coefficient (>= 0)")->required();
    synth->add_option("--airlight", synth_args.airlight, "\"r,g,b\" or auto");
    synth->add_option("--out", synth_args.out, "output PNG")->required();
    synth->add_option("--dmax", synth_args.dmax, "depth of byte 255, scene units");
    synth->add_flag("--invert", synth_args.invert, "recover the clear image instead");

    std::string derive_in, derive_outdir;
    CLI::App* derive = app.add_subcommand("derive", "write the white-balance/contrast/gamma derived inputs");
    derive->add_option("--in", derive_in)->required();
    derive->add_option("--outdir", derive_outdir)->required();

    std::string train_config;
    CLI::App* train_cmd = app.add_subcommand("train", "run HAAN dual-path training");
    train_cmd->add_option("--config", train_config, "JSON config")->required();

    std::string train_ssm_config;
    CLI::App* train_ssm_cmd = app.add_subcommand("train-ssm", "train the sky segmenter on synthetic data");
    train_ssm_cmd->add_option("--config", train_ssm_config, "JSON config")->required();

    std::string defog_in, defog_ckpt, defog_out;
    bool use_ctr = false;
    CLI::App* defog = app.add_subcommand("defog", "defog a PNG or a directory of PNGs");
    defog->add_option("--in", defog_in)->required();
    defog->add_option("--ckpt", defog_ckpt)->required();
    defog->add_option("--out", defog_out)->required();
    defog->add_flag("--use-ctr", use_ctr, "apply the color-texture recovery generator");

    std::string eval_foggy, eval_ref, eval_ckpt, eval_report;
    CLI::App* eval_cmd = app.add_subcommand("eval", "run metrics over a directory");
    eval_cmd->add_option("--foggy", eval_foggy)->required();
    eval_cmd->add_option("--ref", eval_ref, "reference directory, matched by file stem");
    eval_cmd->add_option("--ckpt", eval_ckpt)->required();
    eval_cmd->add_option("--report", eval_report)->required();

    std::string seg_in, seg_ckpt, seg_out;
    CLI::App* seg = app.add_subcommand("segment-sky", "sky probability mask plus airlight estimate");
    seg->add_option("--in", seg_in)->required();
    seg->add_option("--ckpt", seg_ckpt)->required();
    seg->add_option("--out", seg_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    std::cerr << "rng seed: " << seed << "\n";
    Rng rng(seed);

    try {
        if (synth->parsed()) return cmd_synth(synth_args, rng);
        if (derive->parsed()) return cmd_derive(derive_in, derive_outdir);
        if (train_cmd->parsed()) return cmd_train(train_config);
        if (train_ssm_cmd->parsed()) return cmd_train_ssm(train_ssm_config);
        if (defog->parsed()) return cmd_defog(defog_in, defog_ckpt, defog_out, use_ctr);
        if (eval_cmd->parsed()) return cmd_eval(eval_foggy, eval_ref, eval_ckpt, eval_report);
        if (seg->parsed()) return cmd_segment_sky(seg_in, seg_ckpt, seg_out);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
