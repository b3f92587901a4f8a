#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mask.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace oattn {

struct EvalRow {
    std::string name;
    double l1_percent = 0;
    double psnr = 0;
    double ssim = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::vector<std::string> skipped;
    double l1_percent = 0, psnr = 0, ssim = 0;  // unweighted means over rows
    std::string mask_mode;
    std::uint64_t seed = 0;

    std::string to_text() const;
    std::string to_json() const;  // reserves an lpips column (null)
};

// 100 * mean |a - b| over all pixels and channels, images on the [0,1] scale.
template <typename T>
double l1_percent(const Tensor<T>& a, const Tensor<T>& b);

// 10*log10(1/MSE) on the [0,1] scale; identical images give the +infinity
// sentinel.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b);

// Single-scale structural similarity on the channel-mean luminance: 11x11
// Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, averaged over valid
// window positions.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b);

// Inference hook: masked [1,4,S,S] input plus its pyramid -> raw [3,S,S]
// output for one image.
template <typename T>
using InferFn = std::function<Tensor<T>(const Tensor<T>& input4, const MaskPyramid& pyramid)>;

// Per image: seed-deterministic mask, inference, valid-pixel composite,
// metrics against the ground truth. Images without landmarks are skipped
// with a notice.
template <typename T>
EvalReport evaluate_set(const InferFn<T>& infer, const std::vector<Tensor<T>>& images,
                        const std::vector<std::string>& names,
                        const std::map<std::string, LandmarkMap>& landmarks, MaskMode mode,
                        std::uint64_t seed, const std::vector<int>& pyramid_sides,
                        const std::vector<Mask>* irregular_pool = nullptr,
                        std::vector<std::string>* notices = nullptr);

}  // namespace oattn
