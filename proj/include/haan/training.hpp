#pragma once

#include <iosfwd>
#include <string>

#include "haan/atmosphere.hpp"
#include "haan/checkpoint.hpp"
#include "haan/image.hpp"
#include "haan/losses.hpp"
#include "haan/networks.hpp"

namespace haan {

struct TrainConfig {
    int image_size = 64;
    int width_scale = 4;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch_size = 2;
    int epochs = 1;
    LossWeights lambdas;
    std::uint64_t seed = 0;
    std::string fog_dir;
    std::string clear_dir;
    std::string ssm_checkpoint;  // optional; dark-channel airlight when empty
    std::string checkpoint_out;
    int log_interval = 10;
    std::string log_path;     // optional; defaults to checkpoint_out + ".losses.jsonl"
    std::string resume_from;  // optional
    int ssm_dataset_size = 64;

    std::string resolved_log_path() const;
};

// Parses the JSON file mirroring the field names above; unknown keys and
// type mismatches fail with a field-level message.
TrainConfig train_config_from_json_file(const std::string& path);
TrainConfig train_config_from_json_text(const std::string& text, const std::string& origin);

// All six HAAN networks at one scale, float precision.
struct HaanNets {
    ArchConfig arch;
    DefogGenerator<float> defog;       // M_R
    TransmissionNet<float> synth;      // M_S transmission estimator
    SkySegmenter<float> ssm;           // frozen during HAAN training
    CtrGenerator<float> ctr;           // M_CTR
    Discriminator<float> d_fogfree;    // D_ff
    Discriminator<float> d_fog;        // D_f
    bool ssm_trained = false;
};

HaanNets make_haan_nets(const ArchConfig& arch, std::uint64_t seed);

Checkpoint nets_to_checkpoint(const HaanNets& nets, std::uint64_t step);
void nets_from_checkpoint(const Checkpoint& ckpt, HaanNets& nets);

// Stacks same-size signed images into an Nx3xHxW leaf tensor.
Tensor<float> stack_images(std::span<const ImageRGB> images);

// Per-item airlight for a signed foggy batch: sky-segmenter estimate with
// dark-channel fallback, or dark channel outright when no trained SSM is
// available. Runs off-tape. Returns Nx3x1x1, unit range.
Tensor<float> estimate_airlight_batch(HaanNets& nets, const Tensor<float>& foggy_signed);

struct DerivedBatch {
    Tensor<float> wb, ce, gc;  // signed, leaves
};
DerivedBatch derive_inputs_batch(const Tensor<float>& signed_batch);

// Fog2Fogfree block: defogging path plus the color-texture recovery path.
struct Fog2FogfreeOutputs {
    Tensor<float> defogged;   // M_R(I_rf)
    Tensor<float> recon_fog1; // M_S(defogged)
    Tensor<float> recovered;  // M_CTR(defogged, derived(I_rf))
    Tensor<float> recon_fog2; // M_S(recovered)
};
Fog2FogfreeOutputs fog2fogfree_step(HaanNets& nets, const Tensor<float>& foggy_batch, Mode mode);

// Fogfree2Fog block: synthesizing path plus its recovery path. The airlight
// is sampled uniformly in [0.7, 1.0] (grayscale) per item.
struct Fogfree2FogOutputs {
    Tensor<float> synthesized;    // M_S(I_rff)
    Tensor<float> recon_fogfree;  // M_R(synthesized)
    Tensor<float> defogged_synth; // same forward as recon_fogfree
    Tensor<float> recovered;      // M_CTR(defogged_synth, derived(synthesized))
};
Fogfree2FogOutputs fogfree2fog_step(HaanNets& nets, const Tensor<float>& clear_batch, Rng& rng,
                                    Mode mode);

// Full HAAN training run; returns the final checkpoint (also written to
// config.checkpoint_out). Loss JSON lines go to config's log path.
Checkpoint train(const TrainConfig& config, std::ostream* progress = nullptr);

// Synthetic sky-labeled sample: bright gradient sky over textured ground,
// fogged through the scattering model.
struct SkySample {
    ImageRGB clear;   // unit range
    ImageRGB foggy;   // unit range
    GrayImage mask;   // 1 = sky
    AtmosphericLight airlight;
};
SkySample synth_sky_sample(Rng& rng, int size);

// Supervised SSM training on synthesized sky data: pixel BCE on the sky
// probability plus MSE of the enhanced image against the pre-fog image.
Checkpoint train_ssm(const TrainConfig& config, std::ostream* progress = nullptr);

}  // namespace haan
