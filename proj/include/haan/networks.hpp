#pragma once

#include <vector>

#include "haan/common.hpp"
#include "haan/tensor.hpp"

namespace haan {

// Desk-scale architecture knobs. width_scale divides the full-size channel
// counts; 1 selects the full-size widths.
struct ArchConfig {
    int width_scale = 4;
    int image_size = 64;
    int resblock_count = 6;
    int ssm_resblocks = 6;
    int channel_attention_reduction = 4;

    std::size_t scaled(int base) const {
        const int c = base / width_scale;
        return static_cast<std::size_t>(c < 1 ? 1 : c);
    }
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> weight, bias;
    int stride = 1;
    int padding = 0;
};

template <typename T>
struct ConvTranspose2dLayer {
    Tensor<T> weight, bias;
    int stride = 2;
    int padding = 1;
    int output_padding = 0;
};

template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma, beta, running_mean, running_var;
};

// conv -> BN -> ReLU
template <typename T>
struct ConvBlock {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;
};

// Three ConvBlocks with dense connectivity; output is the input concatenated
// with all three growth slices.
template <typename T>
struct DenseBlock {
    ConvBlock<T> cb1, cb2, cb3;
};

// x + BN(conv(ConvBlock(x)))
template <typename T>
struct ResBlock {
    ConvBlock<T> cb;
    Conv2dLayer<T> conv2;
    BatchNormLayer<T> bn2;
};

// Densely-residual connected encoder-decoder that maps a foggy image to its
// defogged estimate. Input and output are signed-range NCHW, H and W
// divisible by 4.
template <typename T>
struct DefogGenerator {
    ConvBlock<T> stem;  // 7x7
    DenseBlock<T> dense1;
    BatchNormLayer<T> dense1_bn;
    Conv2dLayer<T> dense1_proj;  // 1x1
    ConvBlock<T> mid;            // 3x3
    DenseBlock<T> dense2;
    BatchNormLayer<T> dense2_bn;
    Conv2dLayer<T> dense2_proj;
    std::vector<ResBlock<T>> resblocks;
    ConvTranspose2dLayer<T> up1;
    ConvBlock<T> dec1;
    Conv2dLayer<T> dec1_proj;
    ConvTranspose2dLayer<T> up2;
    ConvBlock<T> dec2;
    Conv2dLayer<T> dec2_proj;
    Conv2dLayer<T> out_conv;  // 7x7 -> 3
    NetworkParams<T> params;
};

// Transmission estimator: clear image plus its per-pixel channel max in,
// sigmoid transmission map out, resolution preserved.
template <typename T>
struct TransmissionNet {
    Conv2dLayer<T> stem;  // 9x9
    Conv2dLayer<T> m1, m2, m3;
    Conv2dLayer<T> out_conv;  // 3x3 -> 1
    NetworkParams<T> params;
};

// Sky segmentation model: enhance block (dense encoder-decoder) followed by
// a segmentation block. H and W divisible by 8.
template <typename T>
struct SkySegmenter {
    Conv2dLayer<T> enh_enc1, enh_enc2, enh_enc3;  // 4x4 stride 2
    ConvTranspose2dLayer<T> enh_dec1, enh_dec2, enh_dec3;
    Conv2dLayer<T> enh_fuse;  // 1x1
    Conv2dLayer<T> enh_out;   // 3x3 -> 3
    ConvBlock<T> seg_stem;    // 7x7
    Conv2dLayer<T> seg_enc2, seg_enc3;  // 3x3 stride 2
    std::vector<ResBlock<T>> seg_res;
    ConvTranspose2dLayer<T> seg_up1;
    Conv2dLayer<T> seg_mid;  // 3x3
    ConvTranspose2dLayer<T> seg_up2;
    Conv2dLayer<T> seg_fuse;  // 3x3
    Conv2dLayer<T> seg_out;   // 7x7 -> 1
    NetworkParams<T> params;
};

// Holistic attention-fusion generator: channel attention over the defogged
// image and its three derived inputs, then spatial attention. Channel counts
// are fixed by the four 3-channel inputs.
template <typename T>
struct CtrGenerator {
    Conv2dLayer<T> init_conv;         // 3x3 12->12
    Conv2dLayer<T> ca_fc1, ca_fc2;    // shared bottleneck, 1x1
    Conv2dLayer<T> sa_conv;           // 3x3 2->1
    NetworkParams<T> params;
};

// PatchGAN discriminator: six 4x4 conv layers emitting a grid of raw logits.
template <typename T>
struct Discriminator {
    Conv2dLayer<T> c1, c2, c3, c4, c5, c6;
    BatchNormLayer<T> bn2, bn3, bn4, bn5;
    NetworkParams<T> params;
};

template <typename T>
DefogGenerator<T> make_defog_generator(const ArchConfig& cfg, Rng& rng);
template <typename T>
TransmissionNet<T> make_transmission_net(const ArchConfig& cfg, Rng& rng);
template <typename T>
SkySegmenter<T> make_sky_segmenter(const ArchConfig& cfg, Rng& rng);
template <typename T>
CtrGenerator<T> make_ctr_generator(const ArchConfig& cfg, Rng& rng);
template <typename T>
Discriminator<T> make_discriminator(const ArchConfig& cfg, Rng& rng);

// bottleneck, when given, receives the encoder output shape (post ResBlocks
// input), i.e. N x 256/s x H/4 x W/4.
template <typename T>
Tensor<T> defog_forward(DefogGenerator<T>& net, const Tensor<T>& foggy, Mode mode,
                        Shape* bottleneck = nullptr);

template <typename T>
Tensor<T> transmission_forward(TransmissionNet<T>& net, const Tensor<T>& clear, Mode mode);

template <typename T>
struct SsmOutput {
    Tensor<T> enhanced;  // Nx3xHxW, signed
    Tensor<T> sky_prob;  // Nx1xHxW in [0,1]
};

template <typename T>
SsmOutput<T> ssm_forward(SkySegmenter<T>& net, const Tensor<T>& foggy, Mode mode);

// Fog synthesis with the scattering model inside: the transmission net
// estimates T and the output is to_signed(unit(clear)*T + A*(1-T)).
// airlight is Nx3x1x1 in unit range.
template <typename T>
Tensor<T> synth_forward(TransmissionNet<T>& net, const Tensor<T>& clear, const Tensor<T>& airlight,
                        Mode mode);

template <typename T>
Tensor<T> ctr_forward(CtrGenerator<T>& net, const Tensor<T>& defogged, const Tensor<T>& wb,
                      const Tensor<T>& ce, const Tensor<T>& gc, Mode mode);

template <typename T>
Tensor<T> discriminator_forward(Discriminator<T>& net, const Tensor<T>& image, Mode mode);

}  // namespace haan
