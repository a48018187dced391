#include "haan/networks.hpp"

#include <cmath>

namespace haan {

namespace {

// GAN-style init: conv weights N(0, 0.02), BN gamma N(1, 0.02), biases zero.
template <typename T>
Tensor<T> normal_tensor(Rng& rng, Shape shape, double mean, double stddev) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
}

template <typename T>
Conv2dLayer<T> make_conv(NetworkParams<T>& params, Rng& rng, const std::string& name,
                         std::size_t in, std::size_t out, int kernel, int stride, int padding) {
    Conv2dLayer<T> layer;
    layer.stride = stride;
    layer.padding = padding;
    layer.weight = params.add(name + ".weight",
                              normal_tensor<T>(rng, {out, in, std::size_t(kernel), std::size_t(kernel)}, 0.0, 0.02));
    layer.bias = params.add(name + ".bias", Tensor<T>::zeros({out}));
    return layer;
}

template <typename T>
ConvTranspose2dLayer<T> make_deconv(NetworkParams<T>& params, Rng& rng, const std::string& name,
                                    std::size_t in, std::size_t out, int kernel, int stride,
                                    int padding, int output_padding) {
    ConvTranspose2dLayer<T> layer;
    layer.stride = stride;
    layer.padding = padding;
    layer.output_padding = output_padding;
    layer.weight = params.add(name + ".weight",
                              normal_tensor<T>(rng, {in, out, std::size_t(kernel), std::size_t(kernel)}, 0.0, 0.02));
    layer.bias = params.add(name + ".bias", Tensor<T>::zeros({out}));
    return layer;
}

template <typename T>
BatchNormLayer<T> make_bn(NetworkParams<T>& params, Rng& rng, const std::string& name,
                          std::size_t channels) {
    BatchNormLayer<T> layer;
    layer.gamma = params.add(name + ".gamma", normal_tensor<T>(rng, {channels}, 1.0, 0.02));
    layer.beta = params.add(name + ".beta", Tensor<T>::zeros({channels}));
    layer.running_mean = params.add(name + ".running_mean", Tensor<T>::zeros({channels}), false);
    layer.running_var = params.add(name + ".running_var", Tensor<T>::full({channels}, T(1)), false);
    return layer;
}

template <typename T>
ConvBlock<T> make_conv_block(NetworkParams<T>& params, Rng& rng, const std::string& name,
                             std::size_t in, std::size_t out, int kernel, int stride, int padding) {
    ConvBlock<T> block;
    block.conv = make_conv(params, rng, name + ".conv", in, out, kernel, stride, padding);
    block.bn = make_bn(params, rng, name + ".bn", out);
    return block;
}

template <typename T>
DenseBlock<T> make_dense_block(NetworkParams<T>& params, Rng& rng, const std::string& name,
                               std::size_t in, std::size_t growth) {
    DenseBlock<T> block;
    block.cb1 = make_conv_block(params, rng, name + ".cb1", in, growth, 3, 1, 1);
    block.cb2 = make_conv_block(params, rng, name + ".cb2", in + growth, growth, 3, 1, 1);
    block.cb3 = make_conv_block(params, rng, name + ".cb3", in + 2 * growth, growth, 3, 1, 1);
    return block;
}

template <typename T>
ResBlock<T> make_res_block(NetworkParams<T>& params, Rng& rng, const std::string& name,
                           std::size_t channels) {
    ResBlock<T> block;
    block.cb = make_conv_block(params, rng, name + ".cb", channels, channels, 3, 1, 1);
    block.conv2 = make_conv(params, rng, name + ".conv2", channels, channels, 3, 1, 1);
    block.bn2 = make_bn(params, rng, name + ".bn2", channels);
    return block;
}

template <typename T>
Tensor<T> apply_bn(const BatchNormLayer<T>& layer, const Tensor<T>& x, Mode mode) {
    Tensor<T> rm = layer.running_mean;  // handle copy; shares state
    Tensor<T> rv = layer.running_var;
    return batch_norm(x, layer.gamma, layer.beta, rm, rv, T(0.1), T(1e-5), mode);
}

template <typename T>
Tensor<T> apply_conv(const Conv2dLayer<T>& layer, const Tensor<T>& x) {
    return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding);
}

template <typename T>
Tensor<T> apply_deconv(const ConvTranspose2dLayer<T>& layer, const Tensor<T>& x) {
    return conv_transpose2d(x, layer.weight, layer.bias, layer.stride, layer.padding,
                            layer.output_padding);
}

template <typename T>
Tensor<T> apply_conv_block(const ConvBlock<T>& block, const Tensor<T>& x, Mode mode) {
    return relu(apply_bn(block.bn, apply_conv(block.conv, x), mode));
}

template <typename T>
Tensor<T> apply_dense_block(const DenseBlock<T>& block, const Tensor<T>& x, Mode mode) {
    Tensor<T> y1 = apply_conv_block(block.cb1, x, mode);
    Tensor<T> y2 = apply_conv_block(block.cb2, concat_channels<T>({x, y1}), mode);
    Tensor<T> y3 = apply_conv_block(block.cb3, concat_channels<T>({x, y1, y2}), mode);
    return concat_channels<T>({x, y1, y2, y3});
}

template <typename T>
Tensor<T> apply_res_block(const ResBlock<T>& block, const Tensor<T>& x, Mode mode) {
    Tensor<T> h = apply_bn(block.bn2, apply_conv(block.conv2, apply_conv_block(block.cb, x, mode)), mode);
    return add(x, h);
}

void require_divisible(const char* net, std::size_t h, std::size_t w, std::size_t divisor) {
    if (h % divisor != 0 || w % divisor != 0 || h == 0 || w == 0)
        throw ConfigError(std::string(net) + ": spatial dims must be positive multiples of " +
                          std::to_string(divisor));
}

}  // namespace

// ---- builders ---------------------------------------------------------

template <typename T>
DefogGenerator<T> make_defog_generator(const ArchConfig& cfg, Rng& rng) {
    DefogGenerator<T> net;
    NetworkParams<T>& P = net.params;
    const std::size_t c64 = cfg.scaled(64), c128 = cfg.scaled(128), c256 = cfg.scaled(256);
    const std::size_t growth = cfg.scaled(32);

    net.stem = make_conv_block(P, rng, "stem", 3, c64, 7, 1, 3);
    net.dense1 = make_dense_block(P, rng, "dense1", c64, growth);
    net.dense1_bn = make_bn(P, rng, "dense1_bn", c64 + 3 * growth);
    net.dense1_proj = make_conv(P, rng, "dense1_proj", c64 + 3 * growth, c64, 1, 1, 0);
    net.mid = make_conv_block(P, rng, "mid", c64 + c64, c128, 3, 1, 1);
    net.dense2 = make_dense_block(P, rng, "dense2", c128, growth);
    net.dense2_bn = make_bn(P, rng, "dense2_bn", c128 + 3 * growth);
    net.dense2_proj = make_conv(P, rng, "dense2_proj", c128 + 3 * growth, c128, 1, 1, 0);
    for (int i = 0; i < cfg.resblock_count; ++i)
        net.resblocks.push_back(make_res_block(P, rng, "res" + std::to_string(i + 1), c128 + c128));
    net.up1 = make_deconv(P, rng, "up1", c256, c128, 3, 2, 1, 1);
    net.dec1 = make_conv_block(P, rng, "dec1", c128 + c128, c128, 3, 1, 1);
    net.dec1_proj = make_conv(P, rng, "dec1_proj", c128, c128, 1, 1, 0);
    net.up2 = make_deconv(P, rng, "up2", c128, c64, 3, 2, 1, 1);
    net.dec2 = make_conv_block(P, rng, "dec2", c64 + c64, c64, 3, 1, 1);
    net.dec2_proj = make_conv(P, rng, "dec2_proj", c64, c64, 1, 1, 0);
    net.out_conv = make_conv(P, rng, "out", c64, 3, 7, 1, 3);
    return net;
}

template <typename T>
TransmissionNet<T> make_transmission_net(const ArchConfig& cfg, Rng& rng) {
    TransmissionNet<T> net;
    NetworkParams<T>& P = net.params;
    const std::size_t c = cfg.scaled(32);
    net.stem = make_conv(P, rng, "stem", 4, c, 9, 1, 4);
    net.m1 = make_conv(P, rng, "m1", c, c, 3, 1, 1);
    net.m2 = make_conv(P, rng, "m2", c, c, 3, 1, 1);
    net.m3 = make_conv(P, rng, "m3", c, c, 3, 1, 1);
    net.out_conv = make_conv(P, rng, "out", c, 1, 3, 1, 1);
    return net;
}

template <typename T>
SkySegmenter<T> make_sky_segmenter(const ArchConfig& cfg, Rng& rng) {
    SkySegmenter<T> net;
    NetworkParams<T>& P = net.params;
    const std::size_t c64 = cfg.scaled(64), c128 = cfg.scaled(128), c256 = cfg.scaled(256);

    net.enh_enc1 = make_conv(P, rng, "enh.enc1", 3, c64, 4, 2, 1);
    net.enh_enc2 = make_conv(P, rng, "enh.enc2", c64, c128, 4, 2, 1);
    net.enh_enc3 = make_conv(P, rng, "enh.enc3", c128, c256, 4, 2, 1);
    net.enh_dec1 = make_deconv(P, rng, "enh.dec1", c256, c128, 4, 2, 1, 0);
    net.enh_dec2 = make_deconv(P, rng, "enh.dec2", c128 + c128, c64, 4, 2, 1, 0);
    net.enh_dec3 = make_deconv(P, rng, "enh.dec3", c64 + c64, c64, 4, 2, 1, 0);
    const std::size_t fuse_in = c256 + (c128 + c128) + (c64 + c64) + c64;
    net.enh_fuse = make_conv(P, rng, "enh.fuse", fuse_in, c64, 1, 1, 0);
    net.enh_out = make_conv(P, rng, "enh.out", c64, 3, 3, 1, 1);

    net.seg_stem = make_conv_block(P, rng, "seg.stem", 3, c64, 7, 1, 3);
    net.seg_enc2 = make_conv(P, rng, "seg.enc2", c64, c128, 3, 2, 1);
    net.seg_enc3 = make_conv(P, rng, "seg.enc3", c128, c256, 3, 2, 1);
    for (int i = 0; i < cfg.ssm_resblocks; ++i)
        net.seg_res.push_back(make_res_block(P, rng, "seg.res" + std::to_string(i + 1), c256));
    net.seg_up1 = make_deconv(P, rng, "seg.up1", c256, c128, 3, 2, 1, 1);
    net.seg_mid = make_conv(P, rng, "seg.mid", c128 + c128, c128, 3, 1, 1);
    net.seg_up2 = make_deconv(P, rng, "seg.up2", c128, c64, 3, 2, 1, 1);
    net.seg_fuse = make_conv(P, rng, "seg.fuse", c64 + c64, c64, 3, 1, 1);
    net.seg_out = make_conv(P, rng, "seg.out", c64, 1, 7, 1, 3);
    return net;
}

template <typename T>
CtrGenerator<T> make_ctr_generator(const ArchConfig& cfg, Rng& rng) {
    CtrGenerator<T> net;
    NetworkParams<T>& P = net.params;
    const std::size_t hidden = std::max<std::size_t>(1, 12 / cfg.channel_attention_reduction);
    net.init_conv = make_conv(P, rng, "init", 12, 12, 3, 1, 1);
    net.ca_fc1 = make_conv(P, rng, "ca.fc1", 12, hidden, 1, 1, 0);
    net.ca_fc2 = make_conv(P, rng, "ca.fc2", hidden, 12, 1, 1, 0);
    net.sa_conv = make_conv(P, rng, "sa.conv", 2, 1, 3, 1, 1);
    return net;
}

template <typename T>
Discriminator<T> make_discriminator(const ArchConfig& cfg, Rng& rng) {
    Discriminator<T> net;
    NetworkParams<T>& P = net.params;
    const std::size_t c64 = cfg.scaled(64), c128 = cfg.scaled(128), c256 = cfg.scaled(256),
                      c512 = cfg.scaled(512);
    // Three stride-2 stages then three stride-1 stages; pad 2 on the third
    // keeps 256 -> 30 and 64 -> 6 logit grids.
    net.c1 = make_conv(P, rng, "c1", 3, c64, 4, 2, 1);
    net.c2 = make_conv(P, rng, "c2", c64, c128, 4, 2, 1);
    net.c3 = make_conv(P, rng, "c3", c128, c256, 4, 2, 2);
    net.c4 = make_conv(P, rng, "c4", c256, c512, 4, 1, 1);
    net.c5 = make_conv(P, rng, "c5", c512, c512, 4, 1, 1);
    net.c6 = make_conv(P, rng, "c6", c512, 1, 4, 1, 1);
    net.bn2 = make_bn(P, rng, "bn2", c128);
    net.bn3 = make_bn(P, rng, "bn3", c256);
    net.bn4 = make_bn(P, rng, "bn4", c512);
    net.bn5 = make_bn(P, rng, "bn5", c512);
    return net;
}

// ---- forwards ----------------------------------------------------------

template <typename T>
Tensor<T> defog_forward(DefogGenerator<T>& net, const Tensor<T>& foggy, Mode mode,
                        Shape* bottleneck) {
    if (foggy.rank() != 4 || foggy.dim(1) != 3)
        throw DimensionError("defog_forward: expected Nx3xHxW input");
    require_divisible("defog_forward", foggy.dim(2), foggy.dim(3), 4);

    Tensor<T> f_c1 = apply_conv_block(net.stem, foggy, mode);
    Tensor<T> d1 = apply_conv(net.dense1_proj,
                              apply_bn(net.dense1_bn, apply_dense_block(net.dense1, f_c1, mode), mode));
    Tensor<T> f_en1 = concat_channels<T>({pool(f_c1, PoolKind::kMax, 2, 2), pool(d1, PoolKind::kMax, 2, 2)});

    Tensor<T> f_c2 = apply_conv_block(net.mid, f_en1, mode);
    Tensor<T> d2 = apply_conv(net.dense2_proj,
                              apply_bn(net.dense2_bn, apply_dense_block(net.dense2, f_c2, mode), mode));
    Tensor<T> f_en2 = concat_channels<T>({pool(f_c2, PoolKind::kMax, 2, 2), pool(d2, PoolKind::kMax, 2, 2)});

    if (bottleneck) *bottleneck = f_en2.shape();

    Tensor<T> f_re = f_en2;
    for (auto& rb : net.resblocks) f_re = apply_res_block(rb, f_re, mode);

    Tensor<T> u1 = relu(apply_deconv(net.up1, f_re));
    Tensor<T> f_de1 = relu(apply_conv(net.dec1_proj,
                                      apply_conv_block(net.dec1, concat_channels<T>({u1, f_c2}), mode)));
    Tensor<T> u2 = relu(apply_deconv(net.up2, f_de1));
    Tensor<T> f_de2 = relu(apply_conv(net.dec2_proj,
                                      apply_conv_block(net.dec2, concat_channels<T>({u2, f_c1}), mode)));
    return tanh_act(apply_conv(net.out_conv, f_de2));
}

template <typename T>
Tensor<T> transmission_forward(TransmissionNet<T>& net, const Tensor<T>& clear, Mode) {
    if (clear.rank() != 4 || clear.dim(1) != 3)
        throw DimensionError("transmission_forward: expected Nx3xHxW input");
    Tensor<T> bright = reduce(clear, ReduceKind::kMax, {1}, true);
    Tensor<T> x = concat_channels<T>({clear, bright});
    x = apply_conv(net.stem, x);
    x = relu(apply_conv(net.m1, x));
    x = relu(apply_conv(net.m2, x));
    x = relu(apply_conv(net.m3, x));
    return sigmoid(apply_conv(net.out_conv, x));
}

template <typename T>
SsmOutput<T> ssm_forward(SkySegmenter<T>& net, const Tensor<T>& foggy, Mode mode) {
    if (foggy.rank() != 4 || foggy.dim(1) != 3)
        throw DimensionError("ssm_forward: expected Nx3xHxW input");
    require_divisible("ssm_forward", foggy.dim(2), foggy.dim(3), 8);

    // Enhance block.
    Tensor<T> e1 = relu(apply_conv(net.enh_enc1, foggy));
    Tensor<T> e2 = relu(apply_conv(net.enh_enc2, e1));
    Tensor<T> e3 = relu(apply_conv(net.enh_enc3, e2));
    Tensor<T> d1 = apply_deconv(net.enh_dec1, e3);
    Tensor<T> d1e2 = concat_channels<T>({d1, e2});
    Tensor<T> d2 = apply_deconv(net.enh_dec2, d1e2);
    Tensor<T> d2e1 = concat_channels<T>({d2, e1});
    Tensor<T> d3 = apply_deconv(net.enh_dec3, d2e1);
    Tensor<T> fused = concat_channels<T>({upsample_nearest(e3, 8), upsample_nearest(d1e2, 4),
                                          upsample_nearest(d2e1, 2), d3});
    Tensor<T> enhanced = tanh_act(apply_conv(net.enh_out, relu(apply_conv(net.enh_fuse, fused))));

    // Segmentation block.
    Tensor<T> s1 = apply_conv_block(net.seg_stem, enhanced, mode);
    Tensor<T> s2 = relu(apply_conv(net.seg_enc2, s1));
    Tensor<T> s3 = relu(apply_conv(net.seg_enc3, s2));
    Tensor<T> r = s3;
    for (auto& rb : net.seg_res) r = apply_res_block(rb, r, mode);
    Tensor<T> su1 = apply_deconv(net.seg_up1, r);
    Tensor<T> su2 = apply_deconv(net.seg_up2,
                                 relu(apply_conv(net.seg_mid, concat_channels<T>({su1, s2}))));
    Tensor<T> seg = tanh_act(apply_conv(net.seg_out,
                                        relu(apply_conv(net.seg_fuse, concat_channels<T>({su2, s1})))));
    return {enhanced, affine(seg, T(0.5), T(0.5))};
}

template <typename T>
Tensor<T> synth_forward(TransmissionNet<T>& net, const Tensor<T>& clear, const Tensor<T>& airlight,
                        Mode mode) {
    if (airlight.rank() != 4 || airlight.dim(0) != clear.dim(0) || airlight.dim(1) != 3 ||
        airlight.dim(2) != 1 || airlight.dim(3) != 1)
        throw DimensionError("synth_forward: airlight must be Nx3x1x1");
    Tensor<T> t_map = transmission_forward(net, clear, mode);
    Tensor<T> unit = affine(clear, T(0.5), T(0.5));
    Tensor<T> ones = Tensor<T>::full(clear.shape(), T(1));
    Tensor<T> a_full = mul(ones, airlight);
    Tensor<T> foggy_unit = add(mul(unit, t_map), mul(a_full, affine(t_map, T(-1), T(1))));
    return affine(foggy_unit, T(2), T(-1));
}

template <typename T>
Tensor<T> ctr_forward(CtrGenerator<T>& net, const Tensor<T>& defogged, const Tensor<T>& wb,
                      const Tensor<T>& ce, const Tensor<T>& gc, Mode) {
    for (const Tensor<T>* t : {&wb, &ce, &gc})
        if (t->shape() != defogged.shape())
            throw DimensionError("ctr_forward: all four inputs must share one shape");

    Tensor<T> f_ct = concat_channels<T>({defogged, ce, gc, wb});
    Tensor<T> f_init = apply_conv(net.init_conv, f_ct);

    auto bottleneck = [&net](const Tensor<T>& v) {
        return apply_conv(net.ca_fc2, relu(apply_conv(net.ca_fc1, v)));
    };
    Tensor<T> w_c = sigmoid(add(bottleneck(global_pool(f_init, PoolKind::kAvg)),
                                bottleneck(global_pool(f_init, PoolKind::kMax))));

    Tensor<T> fused = add(add(mul(defogged, narrow_channels(w_c, 0, 3)),
                              mul(ce, narrow_channels(w_c, 3, 3))),
                          add(mul(gc, narrow_channels(w_c, 6, 3)),
                              mul(wb, narrow_channels(w_c, 9, 3))));

    Tensor<T> s_avg = reduce(fused, ReduceKind::kMean, {1}, true);
    Tensor<T> s_max = reduce(fused, ReduceKind::kMax, {1}, true);
    Tensor<T> w_s = sigmoid(apply_conv(net.sa_conv, concat_channels<T>({s_avg, s_max})));
    return clamp(mul(fused, w_s), T(-1), T(1));
}

template <typename T>
Tensor<T> discriminator_forward(Discriminator<T>& net, const Tensor<T>& image, Mode mode) {
    if (image.rank() != 4 || image.dim(1) != 3)
        throw DimensionError("discriminator_forward: expected Nx3xHxW input");
    Tensor<T> x = leaky_relu(apply_conv(net.c1, image));
    x = leaky_relu(apply_bn(net.bn2, apply_conv(net.c2, x), mode));
    x = leaky_relu(apply_bn(net.bn3, apply_conv(net.c3, x), mode));
    x = leaky_relu(apply_bn(net.bn4, apply_conv(net.c4, x), mode));
    x = leaky_relu(apply_bn(net.bn5, apply_conv(net.c5, x), mode));
    return apply_conv(net.c6, x);
}

// ---- explicit instantiations ---------------------------------------------

#define HAAN_INSTANTIATE_NETS(T)                                                                 \
    template DefogGenerator<T> make_defog_generator<T>(const ArchConfig&, Rng&);                 \
    template TransmissionNet<T> make_transmission_net<T>(const ArchConfig&, Rng&);               \
    template SkySegmenter<T> make_sky_segmenter<T>(const ArchConfig&, Rng&);                     \
    template CtrGenerator<T> make_ctr_generator<T>(const ArchConfig&, Rng&);                     \
    template Discriminator<T> make_discriminator<T>(const ArchConfig&, Rng&);                    \
    template Tensor<T> defog_forward(DefogGenerator<T>&, const Tensor<T>&, Mode, Shape*);        \
    template Tensor<T> transmission_forward(TransmissionNet<T>&, const Tensor<T>&, Mode);        \
    template SsmOutput<T> ssm_forward(SkySegmenter<T>&, const Tensor<T>&, Mode);                 \
    template Tensor<T> synth_forward(TransmissionNet<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                     Mode);                                                      \
    template Tensor<T> ctr_forward(CtrGenerator<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                   const Tensor<T>&, const Tensor<T>&, Mode);                    \
    template Tensor<T> discriminator_forward(Discriminator<T>&, const Tensor<T>&, Mode);

HAAN_INSTANTIATE_NETS(float)
HAAN_INSTANTIATE_NETS(double)

#undef HAAN_INSTANTIATE_NETS

}  // namespace haan
