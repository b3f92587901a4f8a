#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "losses.hpp"
#include "mask.hpp"
#include "networks.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace oattn {

using LandmarkMap = std::map<std::string, std::pair<int, int>>;

struct TrainConfig {
    Preset preset = Preset::Res256;
    int toy_side = 64;
    double toy_width_scale = 0.25;
    double lr = 1e-4;
    int batch = 16;
    int n_critic = 1;
    std::uint64_t seed = 0;
    LossWeights weights;
    std::int64_t max_steps = 1000;
    std::int64_t checkpoint_interval = 100;
    MaskMode mask_mode = MaskMode::RandomRect;
    ComponentSizes component_sizes;  // empty -> preset default

    static TrainConfig toy_defaults(std::uint64_t seed);

    int side() const;
    GeneratorConfig generator_config() const;
    ComponentSizes resolved_component_sizes() const;
    void validate() const;
};

template <typename T>
struct RmspropState {
    double decay = 0.99;
    double eps = 1e-8;
    std::vector<Tensor<T>> acc;

    void init(const ParamSet<T>& params) {
        acc.clear();
        for (const auto& p : params) acc.emplace_back(p.value.shape);
    }
};

// acc <- decay*acc + (1-decay)*g^2; theta <- theta - lr*g/(sqrt(acc)+eps).
// All gradients are checked finite before any state is touched.
template <typename T>
void rmsprop_step(ParamSet<T>& params, RmspropState<T>& state, double lr);

// Little-endian checkpoint container. Layout, byte-exact:
//   "OATT"                       4 bytes magic
//   u32  format version (1)
//   u32  preset tag length, tag bytes ("res256" | "res1024" | "toy")
//   u32  image side
//   f32  width scale
//   u64  step counter
//   u32  seed-state length, seed-state bytes
//   u64  record count
//   per record: u32 name length, name bytes, u32 rank, u32 dims[rank],
//               f32 values[product(dims)]
struct CheckpointData {
    std::uint32_t version = 1;
    std::string preset_tag;
    std::uint32_t side = 0;
    float width_scale = 1.0f;
    std::uint64_t step = 0;
    std::vector<std::uint8_t> rng_state;
    std::vector<std::pair<std::string, Tensor<float>>> records;
};

void write_checkpoint_file(const CheckpointData& ckpt, const std::string& path);
CheckpointData read_checkpoint_file(const std::string& path);

template <typename T>
struct Batch {
    Tensor<T> images;  // [N,3,S,S] ground truth
    std::vector<LandmarkMap> landmarks;
    std::vector<Mask> masks;
};

struct StepReport {
    std::uint64_t step = 0;
    double recon = 0, kl = 0, perceptual = 0, gen_adv = 0, gen_total = 0;
    double critic_total = 0;
    std::map<std::string, double> critic_losses;
    double hole_l1 = 0;  // plain L1 over hole pixels, the overfit diagnostic
    int kl_missing = 0;
    bool aborted = false;
    std::string abort_reason;
};

// Critic slots: one parameter set each; the subdivision critic is shared by
// its four quadrant crops.
enum CriticSlot { kGlobal = 0, kLocal, kSubdivision, kLeftEye, kRightEye, kNose, kMouth, kCriticSlots };
extern const std::array<const char*, kCriticSlots> kCriticSlotNames;

// Crop rectangles per critic slot and sample. Rectangle masks use the hole
// bounding box for the local and subdivision critics; irregular masks use
// the central (side/2)^2 region, as do hole crops too small for the critic
// chain. Component crops come from the ground-truth landmarks.
std::vector<std::vector<std::vector<Rect>>> plan_critic_crops(
    int side, MaskMode mode, const std::vector<Mask>& masks,
    const std::vector<ComponentGeometry>& geos, int local_min_side, int subdivision_min_side);

template <typename T>
class Trainer {
public:
    explicit Trainer(TrainConfig cfg);

    // One alternating update: n_critic critic rounds on the detached output,
    // then one generator update against Eq-10-style total. Throws after three
    // consecutive aborted steps.
    StepReport train_step(const Batch<T>& batch);

    CheckpointData make_checkpoint() const;
    void restore(const CheckpointData& ckpt);

    Generator<T>& generator() { return gen_; }
    const Generator<T>& generator() const { return gen_; }
    std::vector<Critic<T>>& critics() { return critics_; }
    Rng& rng() { return rng_; }
    std::uint64_t step_count() const { return step_; }
    const TrainConfig& config() const { return cfg_; }
    const FixedFeatureNet<T>& feature_net() const { return feat_; }

private:
    StepReport do_step(const Batch<T>& batch);

    TrainConfig cfg_;
    Generator<T> gen_;
    std::vector<Critic<T>> critics_;  // 7 slots
    RmspropState<T> gen_opt_;
    std::vector<RmspropState<T>> critic_opt_;
    FixedFeatureNet<T> feat_;
    Rng rng_;
    std::uint64_t step_ = 0;
    int consecutive_aborts_ = 0;
};

// Draws `batch` sample indices, then one hole mask per sample, in a fixed
// order from `rng` so a restored rng state reproduces the identical stream.
template <typename T>
Batch<T> draw_batch(Rng& rng, const std::vector<Tensor<T>>& images,
                    const std::vector<LandmarkMap>& landmarks, int batch, int side, MaskMode mode,
                    const std::vector<Mask>* irregular_pool = nullptr);

// Masked generator input: ground truth times the mask on RGB, mask as the
// fourth channel.
template <typename T>
Tensor<T> masked_input(const Tensor<T>& images, const std::vector<Mask>& masks);

// Ground-truth input for the oracle pass: RGB unchanged, all-ones channel.
template <typename T>
Tensor<T> oracle_input(const Tensor<T>& images);

template <typename T>
double hole_l1(const Tensor<T>& out, const Tensor<T>& gt, const std::vector<Mask>& masks);

}  // namespace oattn
