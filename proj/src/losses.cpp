#include "haan/losses.hpp"

#include <cmath>

namespace haan {

namespace {
constexpr std::uint64_t kExtractorSeed = 0xC0FFEE;

template <typename T>
Conv2dLayer<T> make_fixed_conv(NetworkParams<T>& params, Rng& rng, const std::string& name,
                               std::size_t in, std::size_t out, int stride) {
    Conv2dLayer<T> layer;
    layer.stride = stride;
    layer.padding = 1;
    Tensor<T> w = Tensor<T>::zeros({out, in, 3, 3});
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in) * 9.0));
    for (T& v : w.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    layer.weight = params.add(name + ".weight", w, false);
    layer.bias = params.add(name + ".bias", Tensor<T>::zeros({out}), false);
    return layer;
}

template <typename T>
Tensor<T> squared_mean_to_target(const Tensor<T>& logits, T target) {
    Tensor<T> d = affine(logits, T(1), -target);
    return mean_all(mul(d, d));
}
}  // namespace

template <typename T>
Tensor<T> lsgan_generator_loss(const Tensor<T>& fake_logits) {
    return squared_mean_to_target(fake_logits, T(1));
}

template <typename T>
Tensor<T> lsgan_discriminator_loss(const Tensor<T>& real_logits,
                                   std::span<const Tensor<T>> fake_logits) {
    Tensor<T> loss = squared_mean_to_target(real_logits, T(1));
    for (const Tensor<T>& fake : fake_logits)
        loss = add(loss, squared_mean_to_target(fake, T(0)));
    return loss;
}

template <typename T>
Tensor<T> cycle_loss(const Tensor<T>& original, const Tensor<T>& recon1, const Tensor<T>& recon2) {
    if (original.shape() != recon1.shape() || original.shape() != recon2.shape())
        throw DimensionError("cycle_loss: shapes differ");
    return add(mse(original, recon1), mse(original, recon2));
}

template <typename T>
PerceptualExtractor<T> make_perceptual_extractor() {
    PerceptualExtractor<T> e;
    Rng rng(kExtractorSeed);
    e.s1 = make_fixed_conv(e.params, rng, "s1", 3, 16, 1);
    e.s2 = make_fixed_conv(e.params, rng, "s2", 16, 32, 2);
    e.s3 = make_fixed_conv(e.params, rng, "s3", 32, 64, 1);
    e.s4 = make_fixed_conv(e.params, rng, "s4", 64, 64, 2);
    e.s5 = make_fixed_conv(e.params, rng, "s5", 64, 64, 1);
    return e;
}

template <typename T>
PerceptualFeatures<T> perceptual_features(PerceptualExtractor<T>& extractor, const Tensor<T>& x) {
    auto stage = [](const Conv2dLayer<T>& l, const Tensor<T>& v) {
        return relu(conv2d(v, l.weight, l.bias, l.stride, l.padding));
    };
    Tensor<T> h1 = stage(extractor.s1, x);
    Tensor<T> h2 = stage(extractor.s2, h1);
    Tensor<T> h3 = stage(extractor.s3, h2);
    Tensor<T> h4 = stage(extractor.s4, h3);
    Tensor<T> h5 = stage(extractor.s5, h4);
    return {h2, h5};
}

template <typename T>
Tensor<T> perceptual_loss(PerceptualExtractor<T>& extractor,
                          std::span<const std::pair<Tensor<T>, Tensor<T>>> pairs) {
    Tensor<T> loss = Tensor<T>::scalar(T(0));
    for (const auto& [original, reconstruction] : pairs) {
        if (original.shape() != reconstruction.shape())
            throw DimensionError("perceptual_loss: pair shapes differ");
        PerceptualFeatures<T> fa = perceptual_features(extractor, original);
        PerceptualFeatures<T> fb = perceptual_features(extractor, reconstruction);
        loss = add(loss, add(mse(fa.tap2, fb.tap2), mse(fa.tap5, fb.tap5)));
    }
    return loss;
}

template <typename T>
Tensor<T> total_loss(const LossWeights& weights, const LossComponents<T>& components) {
    const Tensor<T>* comps[6] = {&components.adv_removal, &components.adv_ctr,
                                 &components.adv_synth,   &components.cycle_fog,
                                 &components.cycle_fogfree, &components.perceptual};
    const double lambdas[6] = {weights.lambda1, weights.lambda2, weights.lambda3,
                               weights.lambda4, weights.lambda5, weights.lambda6};
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (int i = 0; i < 6; ++i) {
        if (!std::isfinite(static_cast<double>(comps[i]->item())))
            throw NumericError("total_loss: component " + std::to_string(i + 1) + " is not finite");
        total = add(total, affine(*comps[i], static_cast<T>(lambdas[i]), T(0)));
    }
    return total;
}

#define HAAN_INSTANTIATE_LOSSES(T)                                                          \
    template Tensor<T> lsgan_generator_loss(const Tensor<T>&);                              \
    template Tensor<T> lsgan_discriminator_loss(const Tensor<T>&, std::span<const Tensor<T>>); \
    template Tensor<T> cycle_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
    template PerceptualExtractor<T> make_perceptual_extractor();                            \
    template PerceptualFeatures<T> perceptual_features(PerceptualExtractor<T>&, const Tensor<T>&); \
    template Tensor<T> perceptual_loss(PerceptualExtractor<T>&,                             \
                                       std::span<const std::pair<Tensor<T>, Tensor<T>>>);   \
    template Tensor<T> total_loss(const LossWeights&, const LossComponents<T>&);

HAAN_INSTANTIATE_LOSSES(float)
HAAN_INSTANTIATE_LOSSES(double)

#undef HAAN_INSTANTIATE_LOSSES

}  // namespace haan
