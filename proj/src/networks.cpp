#include "oattn/networks.hpp"

#include <algorithm>
#include <cmath>

#include "oattn/errors.hpp"
#include "oattn/rng.hpp"

namespace oattn {

const char* preset_name(Preset p) {
    switch (p) {
        case Preset::Res256: return "res256";
        case Preset::Res1024: return "res1024";
        case Preset::Toy: return "toy";
    }
    return "?";
}

Preset preset_from_string(const std::string& s) {
    if (s == "res256") return Preset::Res256;
    if (s == "res1024") return Preset::Res1024;
    if (s == "toy") return Preset::Toy;
    throw ConfigError("unknown preset '" + s + "' (res256|res1024|toy)");
}

GeneratorConfig GeneratorConfig::res256() {
    GeneratorConfig c;
    c.preset = Preset::Res256;
    c.side = 256;
    return c;
}

GeneratorConfig GeneratorConfig::res1024() {
    GeneratorConfig c;
    c.preset = Preset::Res1024;
    c.side = 1024;
    return c;
}

GeneratorConfig GeneratorConfig::toy(int side, double width_scale) {
    if (side < 32 || (side & (side - 1)) != 0)
        throw ConfigError("toy preset: side must be a power of two >= 32, got " +
                          std::to_string(side));
    GeneratorConfig c;
    c.preset = Preset::Toy;
    c.side = side;
    c.width_scale = width_scale;
    return c;
}

int GeneratorConfig::depth() const {
    int d = 0;
    for (int s = side; s > 1; s /= 2) ++d;
    return d;
}

std::vector<int> GeneratorConfig::encoder_channels() const {
    std::vector<int> ch;
    for (int i = 0; i < depth(); ++i) {
        const int base = std::min(64 << i, 512);
        ch.push_back(std::max(1, static_cast<int>(std::lround(base * width_scale))));
    }
    return ch;
}

std::vector<int> GeneratorConfig::encoder_kernels() const {
    std::vector<int> ks;
    for (int i = 0; i < depth(); ++i) ks.push_back(i == 0 ? 7 : (i == 1 ? 5 : 3));
    return ks;
}

std::vector<int> GeneratorConfig::dsa_sides() const {
    std::vector<int> sides;
    if (preset == Preset::Toy) {
        for (int s : {side / 16, side / 8, side / 4})
            if (s >= 2) sides.push_back(s);
    } else {
        sides = {16, 32, 64};
    }
    return sides;
}

int GeneratorConfig::kl_side() const {
    return dsa_sides().front();
}

namespace {

template <typename T>
Tensor<T> he_conv(Rng& rng, int out_ch, int in_ch, int k) {
    Tensor<T> t({out_ch, in_ch, k, k});
    const double std = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * std);
    return t;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Generator<T>::state_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    int layer = 1;
    for (auto& e : enc) {
        if (e.bn) {
            out.emplace_back("gen.l" + std::to_string(layer) + ".bn.running_mean", &e.bn->running_mean);
            out.emplace_back("gen.l" + std::to_string(layer) + ".bn.running_var", &e.bn->running_var);
        }
        ++layer;
    }
    for (auto& d : dec) {
        if (d.bn) {
            out.emplace_back("gen.l" + std::to_string(layer) + ".bn.running_mean", &d.bn->running_mean);
            out.emplace_back("gen.l" + std::to_string(layer) + ".bn.running_var", &d.bn->running_var);
        }
        ++layer;
    }
    return out;
}

template <typename T>
Generator<T> build_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
    if (cfg.preset == Preset::Res256 && cfg.side != 256)
        throw ConfigError("res256 preset expects side 256");
    if (cfg.preset == Preset::Res1024 && cfg.side != 1024)
        throw ConfigError("res1024 preset expects side 1024");
    if (cfg.side < 32 || (cfg.side & (cfg.side - 1)) != 0)
        throw ConfigError("generator side must be a power of two >= 32");

    Generator<T> gen;
    gen.cfg = cfg;
    Rng rng(seed);
    const int depth = cfg.depth();
    const auto channels = cfg.encoder_channels();
    const auto kernels = cfg.encoder_kernels();
    const auto dsa_sides = cfg.dsa_sides();

    auto make_bn = [&](const std::string& prefix, int ch) {
        typename Generator<T>::Bn bn;
        Tensor<T> gamma({ch});
        std::fill(gamma.data.begin(), gamma.data.end(), T(1));
        bn.gamma = gen.params.add(prefix + ".bn.gamma", std::move(gamma));
        bn.beta = gen.params.add(prefix + ".bn.beta", Tensor<T>({ch}));
        bn.running_mean = Tensor<T>({ch});
        bn.running_var = Tensor<T>({ch});
        std::fill(bn.running_var.data.begin(), bn.running_var.data.end(), T(1));
        return bn;
    };

    int in_ch = cfg.in_channels;
    int side = cfg.side;
    for (int i = 0; i < depth; ++i) {
        const std::string prefix = "gen.l" + std::to_string(i + 1);
        typename Generator<T>::EncLayer layer;
        layer.conv.kernel = kernels[static_cast<std::size_t>(i)];
        layer.conv.stride = 2;
        layer.conv.pad = kernels[static_cast<std::size_t>(i)] / 2;
        layer.conv.in_ch = in_ch;
        layer.conv.out_ch = channels[static_cast<std::size_t>(i)];
        side /= 2;
        layer.conv.out_side = side;
        layer.conv.w = gen.params.add(prefix + ".conv.w",
                                      he_conv<T>(rng, layer.conv.out_ch, in_ch, layer.conv.kernel));
        layer.conv.b = gen.params.add(prefix + ".conv.b", Tensor<T>({layer.conv.out_ch}));
        if (i > 0) layer.bn = make_bn(prefix, layer.conv.out_ch);
        in_ch = layer.conv.out_ch;
        gen.enc.push_back(std::move(layer));
    }

    for (int j = 1; j <= depth; ++j) {
        const std::string prefix = "gen.l" + std::to_string(depth + j);
        typename Generator<T>::DecLayer layer;
        const bool final_layer = j == depth;
        const int skip_ch = final_layer ? cfg.in_channels
                                        : gen.enc[static_cast<std::size_t>(depth - 1 - j)].conv.out_ch;
        const int out_ch = final_layer ? 3 : skip_ch;
        layer.final_layer = final_layer;
        layer.conv.kernel = 3;
        layer.conv.stride = 1;
        layer.conv.pad = 1;
        layer.conv.in_ch = in_ch + skip_ch;
        layer.conv.out_ch = out_ch;
        layer.conv.out_side = side * 2;
        side *= 2;
        layer.conv.w = gen.params.add(prefix + ".conv.w", he_conv<T>(rng, out_ch, layer.conv.in_ch, 3));
        layer.conv.b = gen.params.add(prefix + ".conv.b", Tensor<T>({out_ch}));
        if (!final_layer) layer.bn = make_bn(prefix, out_ch);
        if (std::find(dsa_sides.begin(), dsa_sides.end(), side) != dsa_sides.end() && !final_layer)
            layer.dsa = build_dsa_params(gen.params, prefix + ".dsa", out_ch, side, rng);
        in_ch = out_ch;
        gen.dec.push_back(std::move(layer));
    }
    return gen;
}

template <typename T>
std::vector<Var> bind_params(Tape<T>& tape, ParamSet<T>& ps, bool trainable) {
    std::vector<Var> bound;
    bound.reserve(static_cast<std::size_t>(ps.count()));
    for (auto& p : ps) bound.push_back(tape.leaf(p.value, trainable));
    return bound;
}

DsaBound dsa_bound_from(const std::vector<Var>& bound, const DsaParamRefs& r) {
    DsaBound b;
    b.wq = bound[static_cast<std::size_t>(r.wq)];
    b.wk = bound[static_cast<std::size_t>(r.wk)];
    b.wv = bound[static_cast<std::size_t>(r.wv)];
    b.wq2 = bound[static_cast<std::size_t>(r.wq2)];
    b.wk2 = bound[static_cast<std::size_t>(r.wk2)];
    b.wv2 = bound[static_cast<std::size_t>(r.wv2)];
    b.alpha = bound[static_cast<std::size_t>(r.alpha)];
    b.beta = bound[static_cast<std::size_t>(r.beta)];
    b.fuse_w = bound[static_cast<std::size_t>(r.fuse_w)];
    b.fuse_b = bound[static_cast<std::size_t>(r.fuse_b)];
    return b;
}

namespace {

template <typename T>
Var apply_bn(Tape<T>& tape, typename Generator<T>::Bn& bn, const std::vector<Var>& bound, Var h,
             GenMode mode) {
    const Var gamma = bound[static_cast<std::size_t>(bn.gamma)];
    const Var beta = bound[static_cast<std::size_t>(bn.beta)];
    if (mode == GenMode::Eval)
        return tape.batch_norm_eval(h, gamma, beta, bn.running_mean, bn.running_var, 1e-5);
    std::vector<T> bm, bv;
    Var out = tape.batch_norm_train(h, gamma, beta, 1e-5, &bm, &bv);
    if (mode == GenMode::Train) {
        for (std::size_t i = 0; i < bm.size(); ++i) {
            bn.running_mean.data[i] = static_cast<T>(0.9) * bn.running_mean.data[i] + static_cast<T>(0.1) * bm[i];
            bn.running_var.data[i] = static_cast<T>(0.9) * bn.running_var.data[i] + static_cast<T>(0.1) * bv[i];
        }
    }
    return out;
}

}  // namespace

template <typename T>
GenOutput<T> generator_forward(Tape<T>& tape, Generator<T>& gen, const Tensor<T>& input,
                               const std::vector<const MaskPyramid*>& pyramids, GenMode mode,
                               bool trainable) {
    const GeneratorConfig& cfg = gen.cfg;
    if (input.shape.size() != 4 || input.shape[1] != cfg.in_channels ||
        input.shape[2] != cfg.side || input.shape[3] != cfg.side)
        throw TapeError("generator_forward: input " + shape_str(input.shape) + " does not match preset " +
                        std::string(preset_name(cfg.preset)) + " side " + std::to_string(cfg.side));
    const int n = input.shape[0];
    if (static_cast<int>(pyramids.size()) != n)
        throw TapeError("generator_forward: " + std::to_string(pyramids.size()) + " pyramids for " +
                        std::to_string(n) + " samples");

    auto bound = bind_params(tape, gen.params, trainable);
    GenOutput<T> out;
    Var x = tape.input(input, false);

    std::vector<Var> skips;
    Var h = x;
    for (auto& e : gen.enc) {
        h = tape.conv2d(h, bound[static_cast<std::size_t>(e.conv.w)], e.conv.stride, e.conv.pad);
        h = tape.add(h, tape.broadcast_c(bound[static_cast<std::size_t>(e.conv.b)], n, e.conv.out_side,
                                         e.conv.out_side));
        if (e.bn) h = apply_bn<T>(tape, *e.bn, bound, h, mode);
        h = tape.relu(h);
        skips.push_back(h);
    }

    const int depth = cfg.depth();
    for (int j = 1; j <= depth; ++j) {
        auto& d = gen.dec[static_cast<std::size_t>(j - 1)];
        h = tape.nearest_up2(h);
        const Var skip = d.final_layer ? x : skips[static_cast<std::size_t>(depth - 1 - j)];
        h = tape.concat_c({h, skip});
        h = tape.conv2d(h, bound[static_cast<std::size_t>(d.conv.w)], 1, 1);
        h = tape.add(h, tape.broadcast_c(bound[static_cast<std::size_t>(d.conv.b)], n, d.conv.out_side,
                                         d.conv.out_side));
        if (d.final_layer) {
            h = tape.sigmoid(h);
        } else {
            if (d.bn) h = apply_bn<T>(tape, *d.bn, bound, h, mode);
            h = tape.leaky_relu(h, 0.2);
        }
        if (d.dsa) {
            const DsaBound db = dsa_bound_from(bound, *d.dsa);
            std::vector<Var> zs;
            auto& level_maps = out.maps[d.dsa->level];
            for (int i = 0; i < n; ++i) {
                const PyramidLevel& part = pyramids[static_cast<std::size_t>(i)]->at(d.dsa->level);
                Var xi = n == 1 ? h : tape.slice_n(h, i, i + 1);
                DsaOut<T> o = dsa_forward(tape, xi, part, db);
                zs.push_back(o.z);
                level_maps.push_back(std::move(o.maps));
            }
            h = n == 1 ? zs[0] : tape.concat_n(zs);
        }
    }
    out.out = h;
    out.out_val = tape.tensor(h);
    return out;
}

CriticConfig CriticConfig::res256(std::string name, int base_channels) {
    CriticConfig c;
    c.name = std::move(name);
    c.base_channels = base_channels;
    c.strides = {2, 2, 2, 1, 1};
    return c;
}

CriticConfig CriticConfig::res1024(std::string name, int base_channels) {
    CriticConfig c;
    c.name = std::move(name);
    c.base_channels = base_channels;
    c.strides = {2, 2, 2, 2, 2, 1, 1};
    return c;
}

CriticConfig CriticConfig::shallow(std::string name, int base_channels) {
    CriticConfig c;
    c.name = std::move(name);
    c.base_channels = base_channels;
    c.strides = {2, 2, 1, 1, 1};
    return c;
}

std::vector<int> CriticConfig::layer_channels() const {
    std::vector<int> ch;
    const int layers = static_cast<int>(strides.size());
    for (int i = 0; i < layers - 1; ++i)
        ch.push_back(base_channels * std::min(1 << i, 8));
    ch.push_back(1);
    return ch;
}

int CriticConfig::score_side(int input_side) const {
    int s = input_side;
    for (int stride : strides) {
        s = (s + 2 * pad - kernel) / stride + 1;
        if (s < 1)
            throw TapeError("critic '" + name + "': input side " + std::to_string(input_side) +
                            " below required minimum " + std::to_string(min_input_side()));
    }
    return s;
}

int CriticConfig::min_input_side() const {
    for (int side = 1; side <= 4096; ++side) {
        int s = side;
        bool ok = true;
        for (int stride : strides) {
            s = (s + 2 * pad - kernel) / stride + 1;
            if (s < 1) {
                ok = false;
                break;
            }
        }
        if (ok) return side;
    }
    return -1;
}

template <typename T>
Critic<T> build_critic(const CriticConfig& cfg, std::uint64_t seed) {
    Critic<T> critic;
    critic.cfg = cfg;
    Rng rng(seed);
    const auto channels = cfg.layer_channels();
    int in_ch = 3;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        typename Critic<T>::Layer layer;
        layer.stride = cfg.strides[i];
        layer.in_ch = in_ch;
        layer.out_ch = channels[i];
        const std::string prefix = cfg.name + ".l" + std::to_string(i + 1);
        layer.w = critic.params.add(prefix + ".w", he_conv<T>(rng, layer.out_ch, in_ch, cfg.kernel));
        layer.b = critic.params.add(prefix + ".b", Tensor<T>({layer.out_ch}));
        in_ch = layer.out_ch;
        critic.layers.push_back(layer);
    }
    return critic;
}

template <typename T>
Var critic_forward(Tape<T>& tape, const Critic<T>& critic, const std::vector<Var>& bound, Var crop) {
    const Shape& s = tape.shape(crop);
    if (s.size() != 4 || s[1] != 3)
        throw TapeError("critic '" + critic.cfg.name + "': expects [N,3,H,W], got " + shape_str(s));
    const int min_side = critic.cfg.min_input_side();
    if (s[2] < min_side || s[3] < min_side)
        throw TapeError("critic '" + critic.cfg.name + "': crop " + std::to_string(s[2]) + "x" +
                        std::to_string(s[3]) + " below required minimum side " +
                        std::to_string(min_side));
    Var h = crop;
    for (std::size_t i = 0; i < critic.layers.size(); ++i) {
        const auto& l = critic.layers[i];
        h = tape.conv2d(h, bound[static_cast<std::size_t>(l.w)], l.stride, critic.cfg.pad);
        const Shape& hs = tape.shape(h);
        h = tape.add(h, tape.broadcast_c(bound[static_cast<std::size_t>(l.b)], hs[0], hs[2], hs[3]));
        if (i + 1 < critic.layers.size()) h = tape.leaky_relu(h, 0.2);
    }
    return h;
}

template <typename T>
FixedFeatureNet<T> FixedFeatureNet<T>::make(std::uint64_t seed) {
    Rng rng(seed);
    FixedFeatureNet<T> net;
    net.weights[0] = he_conv<T>(rng, 32, 3, 3);
    net.weights[1] = he_conv<T>(rng, 64, 32, 3);
    net.weights[2] = he_conv<T>(rng, 128, 64, 3);
    return net;
}

template <typename T>
std::array<Var, 3> feature_forward(Tape<T>& tape, const FixedFeatureNet<T>& net, Var image) {
    std::array<Var, 3> stages;
    Var h = image;
    for (int i = 0; i < 3; ++i) {
        h = tape.leaky_relu(tape.conv2d(h, tape.constant(net.weights[static_cast<std::size_t>(i)]), 2, 1),
                            0.2);
        stages[static_cast<std::size_t>(i)] = h;
    }
    return stages;
}

#define OATTN_INSTANTIATE(T)                                                                        \
    template struct Generator<T>;                                                                   \
    template Generator<T> build_generator<T>(const GeneratorConfig&, std::uint64_t);                \
    template GenOutput<T> generator_forward<T>(Tape<T>&, Generator<T>&, const Tensor<T>&,           \
                                               const std::vector<const MaskPyramid*>&, GenMode,    \
                                               bool);                                              \
    template Critic<T> build_critic<T>(const CriticConfig&, std::uint64_t);                         \
    template Var critic_forward<T>(Tape<T>&, const Critic<T>&, const std::vector<Var>&, Var);      \
    template struct FixedFeatureNet<T>;                                                            \
    template std::array<Var, 3> feature_forward<T>(Tape<T>&, const FixedFeatureNet<T>&, Var);      \
    template std::vector<Var> bind_params<T>(Tape<T>&, ParamSet<T>&, bool);

OATTN_INSTANTIATE(float)
OATTN_INSTANTIATE(double)
#undef OATTN_INSTANTIATE

}  // namespace oattn
