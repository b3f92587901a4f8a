#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dsa.hpp"
#include "mask.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace oattn {

enum class Preset { Res256, Res1024, Toy };

const char* preset_name(Preset p);
Preset preset_from_string(const std::string& s);

// U-Net generator configuration. The encoder halves the side at every layer
// down to 1; the decoder mirrors it with skip concats. Attention layers sit
// where the decoder reaches sides 16/32/64 (full presets) or side/16..side/4
// (toy preset).
struct GeneratorConfig {
    Preset preset = Preset::Res256;
    int side = 256;
    double width_scale = 1.0;
    int in_channels = 4;  // RGB plus the mask channel

    static GeneratorConfig res256();
    static GeneratorConfig res1024();
    static GeneratorConfig toy(int side, double width_scale);

    int depth() const;  // encoder layers; total layers = 2 * depth
    std::vector<int> encoder_channels() const;
    std::vector<int> encoder_kernels() const;
    std::vector<int> dsa_sides() const;  // ascending
    int kl_side() const;                 // lowest-resolution attention level
};

template <typename T>
struct Generator {
    struct Conv {
        int w = -1, b = -1;
        int kernel = 3, stride = 1, pad = 1;
        int in_ch = 0, out_ch = 0, out_side = 0;
    };
    struct Bn {
        int gamma = -1, beta = -1;
        Tensor<T> running_mean, running_var;
    };
    struct EncLayer {
        Conv conv;
        std::optional<Bn> bn;
    };
    struct DecLayer {
        Conv conv;
        std::optional<Bn> bn;
        std::optional<DsaParamRefs> dsa;
        bool final_layer = false;
    };

    GeneratorConfig cfg;
    ParamSet<T> params;
    std::vector<EncLayer> enc;
    std::vector<DecLayer> dec;

    // non-trainable state (batch-norm running statistics), named for checkpoints
    std::vector<std::pair<std::string, Tensor<T>*>> state_tensors();
};

template <typename T>
Generator<T> build_generator(const GeneratorConfig& cfg, std::uint64_t seed);

enum class GenMode {
    Train,   // batch statistics, running averages updated
    Oracle,  // batch statistics computed independently, no state updates
    Eval,    // running statistics
};

template <typename T>
struct GenOutput {
    Var out;  // [N,3,S,S] in [0,1]
    Tensor<T> out_val;
    std::map<int, std::vector<AttentionMaps<T>>> maps;  // level side -> per-sample maps
};

// Runs the full generator. `pyramids` supplies the per-sample partitions for
// every attention side. The oracle pass runs this identical graph on the
// ground-truth image (all-ones mask channel) with the same pyramids.
template <typename T>
GenOutput<T> generator_forward(Tape<T>& tape, Generator<T>& gen, const Tensor<T>& input,
                               const std::vector<const MaskPyramid*>& pyramids, GenMode mode,
                               bool trainable);

// Fully convolutional score-map critic (4x4 convolutions, pad 1, leaky 0.2,
// no normalization).
struct CriticConfig {
    std::string name;
    int base_channels = 64;
    std::vector<int> strides;
    int kernel = 4;
    int pad = 1;

    static CriticConfig res256(std::string name, int base_channels);
    static CriticConfig res1024(std::string name, int base_channels);
    // two stride-2 stages; accepts the small crops of the toy preset
    static CriticConfig shallow(std::string name, int base_channels);

    std::vector<int> layer_channels() const;  // per layer, final entry 1
    int min_input_side() const;
    int score_side(int input_side) const;  // throws when the crop is undersized
};

template <typename T>
struct Critic {
    struct Layer {
        int w = -1, b = -1;
        int stride = 1;
        int in_ch = 0, out_ch = 0;
    };
    CriticConfig cfg;
    ParamSet<T> params;
    std::vector<Layer> layers;
};

template <typename T>
Critic<T> build_critic(const CriticConfig& cfg, std::uint64_t seed);

template <typename T>
Var critic_forward(Tape<T>& tape, const Critic<T>& critic, const std::vector<Var>& bound, Var crop);

// Fixed-weight three-stage feature extractor for the perceptual distance:
// bias-free 3x3 stride-2 convolutions (3->32->64->128) with leaky 0.2,
// weights drawn once from a fixed seed and never trained.
constexpr std::uint64_t kFixedFeatureSeed = 0x0a77e58e;

template <typename T>
struct FixedFeatureNet {
    std::array<Tensor<T>, 3> weights;
    static FixedFeatureNet<T> make(std::uint64_t seed = kFixedFeatureSeed);
};

template <typename T>
std::array<Var, 3> feature_forward(Tape<T>& tape, const FixedFeatureNet<T>& net, Var image);

// Binds every parameter of a set as tape leaves, in index order.
template <typename T>
std::vector<Var> bind_params(Tape<T>& tape, ParamSet<T>& ps, bool trainable);

DsaBound dsa_bound_from(const std::vector<Var>& bound, const DsaParamRefs& refs);

}  // namespace oattn
