#include "haan/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace haan {

namespace {

using Json = nlohmann::json;

// Generator updates per discriminator update.
constexpr std::uint64_t kDiscriminatorEvery = 6;

std::vector<std::string> list_pngs(const std::string& dir) {
    if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    return files;
}

std::vector<ImageRGB> load_dataset(const std::string& dir, int image_size) {
    std::vector<ImageRGB> images;
    for (const std::string& path : list_pngs(dir))
        images.push_back(to_signed(resize(load_image(path), image_size, image_size)));
    if (images.empty()) throw ConfigError("no PNG images in " + dir);
    return images;
}

ImageRGB slice_batch_item(const Tensor<float>& batch, std::size_t index, Range range) {
    const std::size_t C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    ImageRGB img;
    img.height = static_cast<int>(H);
    img.width = static_cast<int>(W);
    img.range = range;
    img.pixels.resize(H * W * 3);
    const float* src = batch.data().data() + index * C * H * W;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.pixels[(y * W + x) * 3 + c] = src[(c * H + y) * W + x];
    return img;
}

// -mean(m*ln(p) + (1-m)*ln(1-p)) with the probability clamped away from the
// log singularities.
Tensor<float> binary_cross_entropy(const Tensor<float>& prob, const Tensor<float>& mask) {
    const float eps = 1e-6f;
    Tensor<float> p = clamp(prob, eps, 1.0f - eps);
    Tensor<float> pos = mul(mask, ln(p));
    Tensor<float> neg = mul(affine(mask, -1.0f, 1.0f), ln(affine(p, -1.0f, 1.0f)));
    return affine(mean_all(add(pos, neg)), -1.0f, 0.0f);
}

struct LossRecord {
    std::uint64_t step;
    double adv_r, adv_ctr, adv_s, cyc1, cyc2, perc, total;
};

void write_loss_line(std::ofstream& log, const LossRecord& r) {
    Json j;
    j["step"] = r.step;
    j["adv_r"] = r.adv_r;
    j["adv_ctr"] = r.adv_ctr;
    j["adv_s"] = r.adv_s;
    j["cyc1"] = r.cyc1;
    j["cyc2"] = r.cyc2;
    j["perc"] = r.perc;
    j["total"] = r.total;
    log << j.dump() << "\n";
    log.flush();
}

template <typename V>
V json_field(const Json& j, const std::string& key, V fallback, const std::string& origin) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<V>();
    } catch (const Json::exception&) {
        throw ConfigError(origin + ": field '" + key + "' has the wrong type");
    }
}

}  // namespace

std::string TrainConfig::resolved_log_path() const {
    if (!log_path.empty()) return log_path;
    return checkpoint_out + ".losses.jsonl";
}

TrainConfig train_config_from_json_text(const std::string& text, const std::string& origin) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception& e) {
        throw ConfigError(origin + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError(origin + ": expected a JSON object");

    static const char* known[] = {"image_size", "width_scale", "lr",           "beta1",
                                  "beta2",      "batch_size",  "epochs",       "lambdas",
                                  "seed",       "fog_dir",     "clear_dir",    "ssm_checkpoint",
                                  "checkpoint_out", "log_interval", "log_path", "resume_from",
                                  "ssm_dataset_size"};
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError(origin + ": unknown field '" + key + "'");
    }

    TrainConfig c;
    c.image_size = json_field(j, "image_size", c.image_size, origin);
    c.width_scale = json_field(j, "width_scale", c.width_scale, origin);
    c.lr = json_field(j, "lr", c.lr, origin);
    c.beta1 = json_field(j, "beta1", c.beta1, origin);
    c.beta2 = json_field(j, "beta2", c.beta2, origin);
    c.batch_size = json_field(j, "batch_size", c.batch_size, origin);
    c.epochs = json_field(j, "epochs", c.epochs, origin);
    c.seed = json_field(j, "seed", c.seed, origin);
    c.fog_dir = json_field(j, "fog_dir", c.fog_dir, origin);
    c.clear_dir = json_field(j, "clear_dir", c.clear_dir, origin);
    c.ssm_checkpoint = json_field(j, "ssm_checkpoint", c.ssm_checkpoint, origin);
    c.checkpoint_out = json_field(j, "checkpoint_out", c.checkpoint_out, origin);
    c.log_interval = json_field(j, "log_interval", c.log_interval, origin);
    c.log_path = json_field(j, "log_path", c.log_path, origin);
    c.resume_from = json_field(j, "resume_from", c.resume_from, origin);
    c.ssm_dataset_size = json_field(j, "ssm_dataset_size", c.ssm_dataset_size, origin);

    if (j.contains("lambdas")) {
        const Json& l = j.at("lambdas");
        if (!l.is_object()) throw ConfigError(origin + ": field 'lambdas' must be an object");
        c.lambdas.lambda1 = json_field(l, "lambda1", c.lambdas.lambda1, origin);
        c.lambdas.lambda2 = json_field(l, "lambda2", c.lambdas.lambda2, origin);
        c.lambdas.lambda3 = json_field(l, "lambda3", c.lambdas.lambda3, origin);
        c.lambdas.lambda4 = json_field(l, "lambda4", c.lambdas.lambda4, origin);
        c.lambdas.lambda5 = json_field(l, "lambda5", c.lambdas.lambda5, origin);
        c.lambdas.lambda6 = json_field(l, "lambda6", c.lambdas.lambda6, origin);
    }

    if (c.lr <= 0) throw ConfigError(origin + ": lr must be positive");
    if (c.batch_size < 1) throw ConfigError(origin + ": batch_size must be >= 1");
    if (c.epochs < 1) throw ConfigError(origin + ": epochs must be >= 1");
    if (c.image_size < 8 || c.image_size % 8 != 0)
        throw ConfigError(origin + ": image_size must be a positive multiple of 8");
    return c;
}

TrainConfig train_config_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return train_config_from_json_text(text, path);
}

HaanNets make_haan_nets(const ArchConfig& arch, std::uint64_t seed) {
    HaanNets nets{arch,
                  {}, {}, {}, {}, {}, {}, false};
    Rng r1 = Rng::derive(seed, 1);
    Rng r2 = Rng::derive(seed, 2);
    Rng r3 = Rng::derive(seed, 3);
    Rng r4 = Rng::derive(seed, 4);
    Rng r5 = Rng::derive(seed, 5);
    Rng r6 = Rng::derive(seed, 6);
    nets.defog = make_defog_generator<float>(arch, r1);
    nets.synth = make_transmission_net<float>(arch, r2);
    nets.ssm = make_sky_segmenter<float>(arch, r3);
    nets.ctr = make_ctr_generator<float>(arch, r4);
    nets.d_fogfree = make_discriminator<float>(arch, r5);
    nets.d_fog = make_discriminator<float>(arch, r6);
    return nets;
}

Checkpoint nets_to_checkpoint(const HaanNets& nets, std::uint64_t step) {
    Checkpoint ckpt;
    append_arch(ckpt, nets.arch);
    ckpt.add("meta.ssm_trained", {1}, {nets.ssm_trained ? 1.0f : 0.0f});
    append_params(ckpt, "m_r", nets.defog.params);
    append_params(ckpt, "m_s", nets.synth.params);
    append_params(ckpt, "ssm", nets.ssm.params);
    append_params(ckpt, "m_ctr", nets.ctr.params);
    append_params(ckpt, "d_ff", nets.d_fogfree.params);
    append_params(ckpt, "d_f", nets.d_fog.params);
    ckpt.step = step;
    return ckpt;
}

void nets_from_checkpoint(const Checkpoint& ckpt, HaanNets& nets) {
    load_params(ckpt, "m_r", nets.defog.params);
    load_params(ckpt, "m_s", nets.synth.params);
    load_params(ckpt, "ssm", nets.ssm.params);
    load_params(ckpt, "m_ctr", nets.ctr.params);
    load_params(ckpt, "d_ff", nets.d_fogfree.params);
    load_params(ckpt, "d_f", nets.d_fog.params);
    const Checkpoint::Section* trained = ckpt.find("meta.ssm_trained");
    nets.ssm_trained = trained && !trained->values.empty() && trained->values[0] != 0.0f;
}

Tensor<float> stack_images(std::span<const ImageRGB> images) {
    if (images.empty()) throw ContractError("stack_images: empty batch");
    const std::size_t N = images.size(), H = images[0].height, W = images[0].width;
    Tensor<float> batch = Tensor<float>::zeros({N, 3, H, W});
    float* out = batch.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        if (static_cast<std::size_t>(images[n].height) != H ||
            static_cast<std::size_t>(images[n].width) != W)
            throw DimensionError("stack_images: image sizes differ");
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    out[((n * 3 + c) * H + y) * W + x] = images[n].pixels[(y * W + x) * 3 + c];
    }
    return batch;
}

Tensor<float> estimate_airlight_batch(HaanNets& nets, const Tensor<float>& foggy_signed) {
    Tape<float>::PauseScope pause;
    const std::size_t N = foggy_signed.dim(0);
    const std::size_t H = foggy_signed.dim(2), W = foggy_signed.dim(3);
    Tensor<float> airlight = Tensor<float>::zeros({N, 3, 1, 1});

    Tensor<float> sky_prob;
    if (nets.ssm_trained && H % 8 == 0 && W % 8 == 0)
        sky_prob = ssm_forward(nets.ssm, foggy_signed.detach(), Mode::kEval).sky_prob;

    for (std::size_t n = 0; n < N; ++n) {
        ImageRGB unit = to_unit(slice_batch_item(foggy_signed, n, Range::kSigned));
        AtmosphericLight a;
        if (sky_prob.defined()) {
            GrayImage mask;
            mask.height = static_cast<int>(H);
            mask.width = static_cast<int>(W);
            mask.values.assign(sky_prob.data().begin() + n * H * W,
                               sky_prob.data().begin() + (n + 1) * H * W);
            a = atmospheric_light_from_sky(unit, mask).light;
        } else {
            a = atmospheric_light_dark_channel(unit);
        }
        for (int c = 0; c < 3; ++c) airlight.data()[n * 3 + c] = a.rgb[c];
    }
    return airlight;
}

DerivedBatch derive_inputs_batch(const Tensor<float>& signed_batch) {
    Tape<float>::PauseScope pause;
    const std::size_t N = signed_batch.dim(0);
    std::vector<ImageRGB> wb, ce, gc;
    for (std::size_t n = 0; n < N; ++n) {
        ImageRGB unit = to_unit(slice_batch_item(signed_batch, n, Range::kSigned));
        DerivedInputs d = derive_inputs(unit);
        wb.push_back(std::move(d.wb));
        ce.push_back(std::move(d.ce));
        gc.push_back(std::move(d.gc));
    }
    return {stack_images(wb), stack_images(ce), stack_images(gc)};
}

Fog2FogfreeOutputs fog2fogfree_step(HaanNets& nets, const Tensor<float>& foggy_batch, Mode mode) {
    Tensor<float> airlight = estimate_airlight_batch(nets, foggy_batch);
    DerivedBatch derived = derive_inputs_batch(foggy_batch);

    Fog2FogfreeOutputs out;
    out.defogged = defog_forward(nets.defog, foggy_batch, mode);
    out.recon_fog1 = synth_forward(nets.synth, out.defogged, airlight, mode);
    out.recovered = ctr_forward(nets.ctr, out.defogged, derived.wb, derived.ce, derived.gc, mode);
    out.recon_fog2 = synth_forward(nets.synth, out.recovered, airlight, mode);
    return out;
}

Fogfree2FogOutputs fogfree2fog_step(HaanNets& nets, const Tensor<float>& clear_batch, Rng& rng,
                                    Mode mode) {
    const std::size_t N = clear_batch.dim(0);
    Tensor<float> airlight = Tensor<float>::zeros({N, 3, 1, 1});
    for (std::size_t n = 0; n < N; ++n) {
        const float a = static_cast<float>(rng.uniform(0.7, 1.0));
        for (int c = 0; c < 3; ++c) airlight.data()[n * 3 + c] = a;
    }

    Fogfree2FogOutputs out;
    out.synthesized = synth_forward(nets.synth, clear_batch, airlight, mode);
    out.recon_fogfree = defog_forward(nets.defog, out.synthesized, mode);
    out.defogged_synth = out.recon_fogfree;  // both roles are the same forward pass
    DerivedBatch derived = derive_inputs_batch(out.synthesized.detach());
    out.recovered =
        ctr_forward(nets.ctr, out.defogged_synth, derived.wb, derived.ce, derived.gc, mode);
    return out;
}

namespace {

struct TrainerState {
    AdamState<float> gen_defog, gen_synth, gen_ctr, d_ff, d_f;
};

void checkpoint_with_adam(const HaanNets& nets, const TrainerState& state, std::uint64_t step,
                          const std::string& path) {
    Checkpoint ckpt = nets_to_checkpoint(nets, step);
    append_adam(ckpt, "m_r", nets.defog.params, state.gen_defog);
    append_adam(ckpt, "m_s", nets.synth.params, state.gen_synth);
    append_adam(ckpt, "m_ctr", nets.ctr.params, state.gen_ctr);
    append_adam(ckpt, "d_ff", nets.d_fogfree.params, state.d_ff);
    append_adam(ckpt, "d_f", nets.d_fog.params, state.d_f);
    save_checkpoint(ckpt, path);
}

}  // namespace

Checkpoint train(const TrainConfig& config, std::ostream* progress) {
    if (config.checkpoint_out.empty()) throw ConfigError("train: checkpoint_out is required");
    std::vector<ImageRGB> foggy_set = load_dataset(config.fog_dir, config.image_size);
    std::vector<ImageRGB> clear_set = load_dataset(config.clear_dir, config.image_size);

    ArchConfig arch;
    arch.width_scale = config.width_scale;
    arch.image_size = config.image_size;
    HaanNets nets = make_haan_nets(arch, config.seed);

    if (!config.ssm_checkpoint.empty()) {
        Checkpoint ssm_ckpt = load_checkpoint(config.ssm_checkpoint);
        load_params(ssm_ckpt, "ssm", nets.ssm.params);
        nets.ssm_trained = true;
    }

    TrainerState state;
    std::uint64_t step = 0;
    if (!config.resume_from.empty()) {
        Checkpoint prev = load_checkpoint(config.resume_from);
        nets_from_checkpoint(prev, nets);
        load_adam(prev, "m_r", nets.defog.params, state.gen_defog);
        load_adam(prev, "m_s", nets.synth.params, state.gen_synth);
        load_adam(prev, "m_ctr", nets.ctr.params, state.gen_ctr);
        load_adam(prev, "d_ff", nets.d_fogfree.params, state.d_ff);
        load_adam(prev, "d_f", nets.d_fog.params, state.d_f);
        step = prev.step;
    }

    AdamHyper<float> hyper{static_cast<float>(config.lr), static_cast<float>(config.beta1),
                           static_cast<float>(config.beta2), 1e-8f};
    PerceptualExtractor<float> extractor = make_perceptual_extractor<float>();

    const std::size_t per_epoch = std::max<std::size_t>(
        1, std::max(foggy_set.size(), clear_set.size()) / static_cast<std::size_t>(config.batch_size));
    const std::uint64_t total_steps = static_cast<std::uint64_t>(config.epochs) * per_epoch;

    std::ofstream log(config.resolved_log_path(), step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open loss log: " + config.resolved_log_path());

    while (step < total_steps) {
        const std::uint64_t iteration = step + 1;
        Rng iter_rng = Rng::derive(config.seed, 0x1000 + iteration);

        std::vector<ImageRGB> fog_batch, clear_batch;
        for (int b = 0; b < config.batch_size; ++b)
            fog_batch.push_back(foggy_set[iter_rng.index(foggy_set.size())]);
        for (int b = 0; b < config.batch_size; ++b)
            clear_batch.push_back(clear_set[iter_rng.index(clear_set.size())]);
        Tensor<float> i_rf = stack_images(fog_batch);
        Tensor<float> i_rff = stack_images(clear_batch);

        // Generator phase: M_R, M_S, M_CTR step; discriminators held fixed.
        nets.defog.params.zero_grads();
        nets.synth.params.zero_grads();
        nets.ctr.params.zero_grads();
        nets.d_fogfree.params.zero_grads();
        nets.d_fog.params.zero_grads();

        Tensor<float> df_detached, rr_detached, sf_detached;
        LossRecord rec{};
        {
            Tape<float> tape;
            Tape<float>::TapeScope scope(tape);

            Fog2FogfreeOutputs f2 = fog2fogfree_step(nets, i_rf, Mode::kTrain);
            Fogfree2FogOutputs ff2 = fogfree2fog_step(nets, i_rff, iter_rng, Mode::kTrain);

            LossComponents<float> comps;
            comps.adv_removal = lsgan_generator_loss(
                discriminator_forward(nets.d_fogfree, f2.defogged, Mode::kFrozenStats));
            comps.adv_ctr = lsgan_generator_loss(
                discriminator_forward(nets.d_fogfree, f2.recovered, Mode::kFrozenStats));
            comps.adv_synth = lsgan_generator_loss(
                discriminator_forward(nets.d_fog, ff2.synthesized, Mode::kFrozenStats));
            comps.cycle_fog = cycle_loss(i_rf, f2.recon_fog1, f2.recon_fog2);
            comps.cycle_fogfree = cycle_loss(i_rff, ff2.recon_fogfree, ff2.recovered);
            std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs = {
                {i_rf, f2.recon_fog1},
                {i_rf, f2.recon_fog2},
                {i_rff, ff2.recon_fogfree},
                {i_rff, ff2.recovered}};
            comps.perceptual =
                perceptual_loss(extractor, std::span<const std::pair<Tensor<float>, Tensor<float>>>(pairs));

            Tensor<float> total;
            try {
                total = total_loss(config.lambdas, comps);
            } catch (const NumericError& e) {
                throw NumericError("training aborted at step " + std::to_string(iteration) + ": " +
                                   e.what());
            }
            tape.backward(total);

            rec = {iteration,
                   comps.adv_removal.item(),
                   comps.adv_ctr.item(),
                   comps.adv_synth.item(),
                   comps.cycle_fog.item(),
                   comps.cycle_fogfree.item(),
                   comps.perceptual.item(),
                   total.item()};

            df_detached = f2.defogged.detach();
            rr_detached = f2.recovered.detach();
            sf_detached = ff2.synthesized.detach();
        }
        adam_step(nets.defog.params, state.gen_defog, hyper, static_cast<long>(iteration));
        adam_step(nets.synth.params, state.gen_synth, hyper, static_cast<long>(iteration));
        adam_step(nets.ctr.params, state.gen_ctr, hyper, static_cast<long>(iteration));

        // Discriminator phase on detached fakes. The discriminators see a
        // third of the generator updates (k-step schedule) at half loss;
        // they overpower the generators on desk-scale data otherwise.
        const bool update_discriminators = iteration % kDiscriminatorEvery == 1;
        if (update_discriminators) {
            nets.d_fogfree.params.zero_grads();
            nets.d_fog.params.zero_grads();
        }
        if (update_discriminators) {
            Tape<float> tape;
            Tape<float>::TapeScope scope(tape);
            std::vector<Tensor<float>> ff_fakes = {
                discriminator_forward(nets.d_fogfree, df_detached, Mode::kTrain),
                discriminator_forward(nets.d_fogfree, rr_detached, Mode::kTrain)};
            Tensor<float> d_ff_loss = lsgan_discriminator_loss(
                discriminator_forward(nets.d_fogfree, i_rff, Mode::kTrain),
                std::span<const Tensor<float>>(ff_fakes));
            std::vector<Tensor<float>> f_fakes = {
                discriminator_forward(nets.d_fog, sf_detached, Mode::kTrain)};
            Tensor<float> d_f_loss =
                lsgan_discriminator_loss(discriminator_forward(nets.d_fog, i_rf, Mode::kTrain),
                                         std::span<const Tensor<float>>(f_fakes));
            // Discriminators train at half rate so the generators keep a
            // usable adversarial signal at toy scale.
            tape.backward(affine(add(d_ff_loss, d_f_loss), 0.5f, 0.0f));
            adam_step(nets.d_fogfree.params, state.d_ff, hyper,
                      static_cast<long>((iteration - 1) / kDiscriminatorEvery + 1));
            adam_step(nets.d_fog.params, state.d_f, hyper,
                      static_cast<long>((iteration - 1) / kDiscriminatorEvery + 1));
        }

        step = iteration;
        if (config.log_interval > 0 && step % static_cast<std::uint64_t>(config.log_interval) == 0)
            write_loss_line(log, rec);
        if (progress && (step % 10 == 0 || step == total_steps))
            *progress << "step " << step << "/" << total_steps << " total=" << rec.total << "\n";
    }

    checkpoint_with_adam(nets, state, step, config.checkpoint_out);
    return load_checkpoint(config.checkpoint_out);
}

SkySample synth_sky_sample(Rng& rng, int size) {
    SkySample s;
    s.clear = ImageRGB::filled(size, size, 0.0f);
    s.mask.height = size;
    s.mask.width = size;
    s.mask.values.assign(std::size_t(size) * size, 0.0f);

    const int horizon = static_cast<int>(size * rng.uniform(0.3, 0.6));
    const float a = static_cast<float>(rng.uniform(0.7, 1.0));
    s.airlight = {{a, a, a}};

    // Bright gradient sky over darker textured ground.
    const float sky_top = static_cast<float>(rng.uniform(0.75, 0.95));
    const float sky_horizon = sky_top - static_cast<float>(rng.uniform(0.1, 0.2));
    const float ground_base = static_cast<float>(rng.uniform(0.15, 0.35));
    const float fx = static_cast<float>(rng.uniform(0.5, 2.0));
    const float fy = static_cast<float>(rng.uniform(0.5, 2.0));
    const float phase = static_cast<float>(rng.uniform(0.0, 6.28));

    GrayImage depth;
    depth.height = size;
    depth.width = size;
    depth.values.assign(std::size_t(size) * size, 0.0f);
    const float beta = static_cast<float>(rng.uniform(0.05, 0.08));

    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            if (y < horizon) {
                const float t = horizon > 1 ? static_cast<float>(y) / (horizon - 1) : 0.0f;
                const float v = sky_top + (sky_horizon - sky_top) * t;
                s.clear.at(y, x, 0) = v;
                s.clear.at(y, x, 1) = v;
                s.clear.at(y, x, 2) = std::min(1.0f, v + 0.04f);
                s.mask.at(y, x) = 1.0f;
                depth.at(y, x) = 80.0f;
            } else {
                const float wave = 0.5f + 0.5f * std::sin(fx * x * 0.4f + phase) *
                                              std::cos(fy * y * 0.4f - phase);
                const float speck = static_cast<float>(rng.uniform(-0.06, 0.06));
                const float v = std::min(0.85f, std::max(0.02f, ground_base + 0.3f * wave + speck));
                s.clear.at(y, x, 0) = v;
                s.clear.at(y, x, 1) = std::min(1.0f, v * 1.08f);
                s.clear.at(y, x, 2) = v * 0.9f;
                const float frac = static_cast<float>(y - horizon) / std::max(1, size - horizon);
                depth.at(y, x) = 28.0f - 22.0f * frac;  // near the bottom is close
            }
        }
    }
    s.foggy = synthesize_fog(s.clear, transmission_from_depth(depth, beta), s.airlight);
    return s;
}

Checkpoint train_ssm(const TrainConfig& config, std::ostream* progress) {
    if (config.checkpoint_out.empty()) throw ConfigError("train_ssm: checkpoint_out is required");
    if (config.ssm_dataset_size < 1) throw ConfigError("train_ssm: ssm_dataset_size must be >= 1");

    Rng data_rng = Rng::derive(config.seed, 0x55);
    std::vector<SkySample> dataset;
    for (int i = 0; i < config.ssm_dataset_size; ++i)
        dataset.push_back(synth_sky_sample(data_rng, config.image_size));

    ArchConfig arch;
    arch.width_scale = config.width_scale;
    arch.image_size = config.image_size;
    Rng net_rng = Rng::derive(config.seed, 3);  // same stream as make_haan_nets' SSM
    SkySegmenter<float> ssm = make_sky_segmenter<float>(arch, net_rng);

    AdamHyper<float> hyper{static_cast<float>(config.lr), static_cast<float>(config.beta1),
                           static_cast<float>(config.beta2), 1e-8f};
    AdamState<float> state;

    const std::size_t per_epoch =
        std::max<std::size_t>(1, dataset.size() / static_cast<std::size_t>(config.batch_size));
    const std::uint64_t total_steps = static_cast<std::uint64_t>(config.epochs) * per_epoch;

    for (std::uint64_t iteration = 1; iteration <= total_steps; ++iteration) {
        Rng iter_rng = Rng::derive(config.seed, 0x2000 + iteration);
        std::vector<ImageRGB> foggy, clear;
        std::vector<const GrayImage*> masks;
        for (int b = 0; b < config.batch_size; ++b) {
            const SkySample& sample = dataset[iter_rng.index(dataset.size())];
            foggy.push_back(to_signed(sample.foggy));
            clear.push_back(to_signed(sample.clear));
            masks.push_back(&sample.mask);
        }
        Tensor<float> x = stack_images(foggy);
        Tensor<float> target = stack_images(clear);
        const std::size_t H = x.dim(2), W = x.dim(3);
        Tensor<float> mask = Tensor<float>::zeros({static_cast<std::size_t>(config.batch_size), 1, H, W});
        for (std::size_t n = 0; n < masks.size(); ++n)
            std::copy(masks[n]->values.begin(), masks[n]->values.end(),
                      mask.data().begin() + n * H * W);

        ssm.params.zero_grads();
        double loss_value = 0.0;
        {
            Tape<float> tape;
            Tape<float>::TapeScope scope(tape);
            SsmOutput<float> out = ssm_forward(ssm, x, Mode::kTrain);
            Tensor<float> loss =
                add(binary_cross_entropy(out.sky_prob, mask), mse(out.enhanced, target));
            if (!std::isfinite(loss.item()))
                throw NumericError("train_ssm aborted at step " + std::to_string(iteration) +
                                   ": non-finite loss");
            loss_value = loss.item();
            tape.backward(loss);
        }
        adam_step(ssm.params, state, hyper, static_cast<long>(iteration));

        if (progress && (iteration % 10 == 0 || iteration == total_steps))
            *progress << "ssm step " << iteration << "/" << total_steps << " loss=" << loss_value
                      << "\n";
    }

    Checkpoint ckpt;
    ArchConfig meta = arch;
    append_arch(ckpt, meta);
    ckpt.add("meta.ssm_trained", {1}, {1.0f});
    append_params(ckpt, "ssm", ssm.params);
    append_adam(ckpt, "ssm", ssm.params, state);
    ckpt.step = total_steps;
    save_checkpoint(ckpt, config.checkpoint_out);
    return load_checkpoint(config.checkpoint_out);
}

}  // namespace haan
