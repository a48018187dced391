#pragma once

#include <span>
#include <utility>

#include "haan/networks.hpp"
#include "haan/tensor.hpp"

namespace haan {

struct LossWeights {
    double lambda1 = 10.0;  // removal adversarial
    double lambda2 = 10.0;  // color-texture adversarial
    double lambda3 = 10.0;  // synthesis adversarial
    double lambda4 = 5.0;   // fog cycle
    double lambda5 = 5.0;   // fog-free cycle
    double lambda6 = 1.0;   // perceptual
};

// Least-squares GAN surrogates. Raw patch logits in, scalar out.
template <typename T>
Tensor<T> lsgan_generator_loss(const Tensor<T>& fake_logits);

template <typename T>
Tensor<T> lsgan_discriminator_loss(const Tensor<T>& real_logits,
                                   std::span<const Tensor<T>> fake_logits);

// ||a - b1||^2 + ||a - b2||^2, each term mean-squared over all elements.
template <typename T>
Tensor<T> cycle_loss(const Tensor<T>& original, const Tensor<T>& recon1, const Tensor<T>& recon2);

// Fixed (never trained) conv stack standing in for a pretrained feature
// network: five 3x3 conv+ReLU stages, stride 2 at stages 2 and 4, channels
// 16/32/64/64/64, weights drawn once from seed 0xC0FFEE. Taps at stages 2
// and 5.
template <typename T>
struct PerceptualExtractor {
    Conv2dLayer<T> s1, s2, s3, s4, s5;
    NetworkParams<T> params;
};

template <typename T>
PerceptualExtractor<T> make_perceptual_extractor();

template <typename T>
struct PerceptualFeatures {
    Tensor<T> tap2, tap5;
};

template <typename T>
PerceptualFeatures<T> perceptual_features(PerceptualExtractor<T>& extractor, const Tensor<T>& x);

// Sum over pairs of the mean-squared feature distance at both taps.
template <typename T>
Tensor<T> perceptual_loss(PerceptualExtractor<T>& extractor,
                          std::span<const std::pair<Tensor<T>, Tensor<T>>> pairs);

template <typename T>
struct LossComponents {
    Tensor<T> adv_removal, adv_ctr, adv_synth, cycle_fog, cycle_fogfree, perceptual;
};

// lambda-weighted sum; throws NumericError on a non-finite component.
template <typename T>
Tensor<T> total_loss(const LossWeights& weights, const LossComponents<T>& components);

}  // namespace haan
