#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dsa.hpp"
#include "mask.hpp"
#include "networks.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace oattn {

struct LossWeights {
    double lambda_r = 10.0;
    double lambda_kl = 2.0;
    double lambda_p = 1.0;
    double lambda_g = 1.0;
    double gamma = 10.0;
};

// Hole mask plus the four component masks of one sample, all image-resolution
// and binary.
struct MaskBundle {
    Mask m1;
    std::map<std::string, Mask> components;  // left_eye, right_eye, nose, mouth
};

// Per-pixel penalty 1 + sum_i (1 - M_i(p)): 1 away from everything, +1 for
// the hole and for each covering component, integer values in 1..6.
template <typename T>
Tensor<T> recon_weight_map(const MaskBundle& bundle);

// Weighted L1 reconstruction: mean over pixels and channels of w(p)|out-gt|.
template <typename T>
Var recon_loss(Tape<T>& tape, Var out, const Tensor<T>& gt,
               const std::vector<const MaskBundle*>& bundles);

// L1 distance in the fixed feature space for both the raw output and its
// valid-pixel composite against the ground truth.
template <typename T>
Var perceptual_loss(Tape<T>& tape, Var out, const Tensor<T>& gt,
                    const std::vector<const Mask*>& holes, const FixedFeatureNet<T>& net);

template <typename T>
struct KlResult {
    Var value;
    int missing_terms = 0;  // branch pairs absent on both sides, contributed 0
};

// Average KL divergence from the detached oracle maps to the masked-pass
// maps, 1/(N*N') and 1/N^2 normalizations, logs clamped at 1e-12, averaged
// over the batch. Only the given level is accepted.
template <typename T>
KlResult<T> attention_kl_loss(Tape<T>& tape, const std::vector<AttentionMaps<T>>& oracle,
                              const std::vector<AttentionMaps<T>>& masked, int expected_level);

// Score-map head evaluated inside loss terms; returns the (unreduced) map.
template <typename T>
using ScoreFn = std::function<Var(Tape<T>&, Var)>;

// Critic objective with gradient penalty: mean D(fake) - mean D(real) +
// gamma * mean((||grad_{crop(interp)} D|| - 1)^2). The interpolate is formed
// at full image resolution with one t ~ U(0,1) per sample, then cropped; the
// cropped tensor is the differentiation variable. Multiple crops per sample
// (the four hole quadrants) are summed.
template <typename T>
Var critic_loss_with_gp(Tape<T>& tape, const ScoreFn<T>& score_fn,
                        const std::vector<std::vector<Rect>>& crops_per_sample,
                        const Tensor<T>& fake_images, const Tensor<T>& real_images, Rng& rng,
                        double gamma);

template <typename T>
struct AdvCriticInput {
    ScoreFn<T> score_fn;
    std::vector<std::vector<Var>> crops;  // [sample][crop], attached to the generator output
};

// Generator adversarial term: -sum_i mean score of D_i on its crops of the
// generator output (per-sample crop sums averaged over the batch).
template <typename T>
Var generator_adv_loss(Tape<T>& tape, const std::vector<AdvCriticInput<T>>& critics);

// lambda_r * L_r + lambda_kl * L_kl + lambda_p * L_p + lambda_g * L_g;
// rejects non-finite parts by name.
template <typename T>
Var total_generator_loss(Tape<T>& tape, Var recon, Var kl, Var perceptual, Var adversarial,
                         const LossWeights& w);

// Crop of one sample as a standalone [1,C,h,w] tensor.
template <typename T>
Tensor<T> tensor_crop(const Tensor<T>& images, int sample, const Rect& r);

}  // namespace oattn
