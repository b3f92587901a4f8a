#include "oattn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "oattn/errors.hpp"

namespace oattn {

const std::array<const char*, kCriticSlots> kCriticSlotNames = {
    "global", "local", "subdivision", "left_eye", "right_eye", "nose", "mouth"};

TrainConfig TrainConfig::toy_defaults(std::uint64_t seed_v) {
    TrainConfig c;
    c.preset = Preset::Toy;
    c.toy_side = 64;
    c.toy_width_scale = 0.25;
    c.batch = 4;
    c.seed = seed_v;
    c.mask_mode = MaskMode::Center;
    c.max_steps = 500;
    c.checkpoint_interval = 100;
    return c;
}

int TrainConfig::side() const {
    switch (preset) {
        case Preset::Res256: return 256;
        case Preset::Res1024: return 1024;
        case Preset::Toy: return toy_side;
    }
    return 0;
}

GeneratorConfig TrainConfig::generator_config() const {
    switch (preset) {
        case Preset::Res256: return GeneratorConfig::res256();
        case Preset::Res1024: return GeneratorConfig::res1024();
        case Preset::Toy: return GeneratorConfig::toy(toy_side, toy_width_scale);
    }
    throw ConfigError("bad preset");
}

ComponentSizes TrainConfig::resolved_component_sizes() const {
    if (!component_sizes.sizes.empty()) return component_sizes;
    if (preset == Preset::Toy) return ComponentSizes::uniform(16, 16);
    return ComponentSizes::defaults_for(side());
}

void TrainConfig::validate() const {
    if (lr <= 0) throw ConfigError("train.lr must be positive");
    if (batch < 2) throw ConfigError("train.batch must be >= 2 (batch normalization is active)");
    if (n_critic < 1) throw ConfigError("train.n_critic must be >= 1");
    if (max_steps < 1) throw ConfigError("train.steps must be >= 1");
    if (weights.lambda_r < 0 || weights.lambda_kl < 0 || weights.lambda_p < 0 ||
        weights.lambda_g < 0 || weights.gamma < 0)
        throw ConfigError("loss weights must be nonnegative");
    generator_config();  // validates the toy side
}

template <typename T>
void rmsprop_step(ParamSet<T>& params, RmspropState<T>& state, double lr) {
    if (static_cast<int>(state.acc.size()) != params.count())
        throw TapeError("rmsprop_step: optimizer state does not match the parameter set");
    for (int i = 0; i < params.count(); ++i) {
        const auto& g = params[i].value.grad;
        if (g.size() != params[i].value.data.size())
            throw TapeError("rmsprop_step: parameter '" + params[i].name + "' has no gradient");
        for (const T v : g)
            if (!std::isfinite(static_cast<double>(v)))
                throw TapeError("rmsprop_step: non-finite gradient for parameter '" + params[i].name + "'");
    }
    const T decay = static_cast<T>(state.decay);
    const T one_minus = static_cast<T>(1.0 - state.decay);
    const T eps = static_cast<T>(state.eps);
    const T step = static_cast<T>(lr);
    for (int i = 0; i < params.count(); ++i) {
        auto& value = params[i].value;
        auto& acc = state.acc[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < value.data.size(); ++j) {
            const T g = value.grad[j];
            acc.data[j] = decay * acc.data[j] + one_minus * g * g;
            value.data[j] -= step * g / (std::sqrt(acc.data[j]) + eps);
        }
    }
}

// ---- checkpoint container ------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::uint8_t* p;
    std::size_t n;
    std::size_t at = 0;

    void need(std::size_t k) const {
        if (at + k > n)
            throw DataError("truncated checkpoint: needed " + std::to_string(k) + " bytes at offset " +
                            std::to_string(at));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[at + static_cast<std::size_t>(i)]) << (8 * i);
        at += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[at + static_cast<std::size_t>(i)]) << (8 * i);
        at += 8;
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str(std::size_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(p + at), len);
        at += len;
        return s;
    }
};

}  // namespace

void write_checkpoint_file(const CheckpointData& ckpt, const std::string& path) {
    std::string buf;
    buf += "OATT";
    put_u32(buf, ckpt.version);
    put_u32(buf, static_cast<std::uint32_t>(ckpt.preset_tag.size()));
    buf += ckpt.preset_tag;
    put_u32(buf, ckpt.side);
    put_f32(buf, ckpt.width_scale);
    put_u64(buf, ckpt.step);
    put_u32(buf, static_cast<std::uint32_t>(ckpt.rng_state.size()));
    buf.append(reinterpret_cast<const char*>(ckpt.rng_state.data()), ckpt.rng_state.size());
    put_u64(buf, ckpt.records.size());
    for (const auto& [name, tensor] : ckpt.records) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        put_u32(buf, static_cast<std::uint32_t>(tensor.shape.size()));
        for (int d : tensor.shape) put_u32(buf, static_cast<std::uint32_t>(d));
        for (float v : tensor.data) put_f32(buf, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open checkpoint path for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw DataError("failed writing checkpoint: " + path);
}

CheckpointData read_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{bytes.data(), bytes.size()};
    if (r.str(4) != "OATT") throw DataError("not a checkpoint file (bad magic): " + path);
    CheckpointData c;
    c.version = r.u32();
    if (c.version != 1)
        throw DataError("unsupported checkpoint version " + std::to_string(c.version));
    c.preset_tag = r.str(r.u32());
    c.side = r.u32();
    c.width_scale = r.f32();
    c.step = r.u64();
    const std::uint32_t rng_len = r.u32();
    c.rng_state.resize(rng_len);
    r.need(rng_len);
    std::memcpy(c.rng_state.data(), r.p + r.at, rng_len);
    r.at += rng_len;
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw DataError("corrupt checkpoint record '" + name + "': rank " + std::to_string(rank));
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
        const std::int64_t count_v = numel(shape);
        if (count_v < 0 || count_v > (1LL << 31))
            throw DataError("corrupt checkpoint record '" + name + "': length header " +
                            std::to_string(count_v));
        Tensor<float> t(shape);
        for (auto& v : t.data) v = r.f32();
        c.records.emplace_back(name, std::move(t));
    }
    if (r.at != r.n) throw DataError("trailing bytes after checkpoint records: " + path);
    return c;
}

// ---- trainer --------------------------------------------------------------------

namespace {

std::vector<CriticConfig> critic_configs(const TrainConfig& cfg) {
    const std::array<int, kCriticSlots> base = {64, 48, 32, 32, 32, 32, 32};
    std::vector<CriticConfig> out;
    for (int i = 0; i < kCriticSlots; ++i) {
        const std::string name = std::string("critic.") + kCriticSlotNames[static_cast<std::size_t>(i)];
        int channels = base[static_cast<std::size_t>(i)];
        if (cfg.preset == Preset::Toy)
            channels = std::max(4, static_cast<int>(std::lround(channels * cfg.toy_width_scale)));
        switch (cfg.preset) {
            case Preset::Res1024:
                out.push_back(CriticConfig::res1024(name, channels));
                break;
            case Preset::Res256:
                out.push_back(CriticConfig::res256(name, channels));
                break;
            case Preset::Toy:
                // global/local crops stay large; the quadrant and component
                // crops shrink with the toy canvas and need the short chain
                out.push_back(i <= kLocal ? CriticConfig::res256(name, channels)
                                          : CriticConfig::shallow(name, channels));
                break;
        }
    }
    return out;
}

}  // namespace

std::vector<std::vector<std::vector<Rect>>> plan_critic_crops(
    int side, MaskMode mode, const std::vector<Mask>& masks,
    const std::vector<ComponentGeometry>& geos, int local_min_side, int subdivision_min_side) {
    std::vector<std::vector<std::vector<Rect>>> crops(kCriticSlots);
    const bool irregular = mode == MaskMode::Irregular;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const Mask& m = masks[i];
        Rect local_r = irregular ? central_region(side) : hole_bbox(m);
        if (local_r.height < local_min_side || local_r.width < local_min_side)
            local_r = central_region(side);
        Rect sub_base = irregular ? central_region(side) : hole_bbox(m);
        if (sub_base.height / 2 < subdivision_min_side || sub_base.width / 2 < subdivision_min_side ||
            sub_base.height % 2 || sub_base.width % 2)
            sub_base = central_region(side);
        const auto quads = subdivide_rect(sub_base);

        crops[kGlobal].push_back({Rect{0, 0, side, side}});
        crops[kLocal].push_back({local_r});
        crops[kSubdivision].push_back({quads[0], quads[1], quads[2], quads[3]});
        for (int c = 0; c < 4; ++c)
            crops[static_cast<std::size_t>(kLeftEye + c)].push_back(
                {geos[i].rects.at(kComponentNames[static_cast<std::size_t>(c)])});
    }
    return crops;
}

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.validate();
    gen_ = build_generator<T>(cfg_.generator_config(), cfg_.seed ^ 0x67656e5f5eedULL);
    const auto ccfgs = critic_configs(cfg_);
    for (std::size_t i = 0; i < ccfgs.size(); ++i)
        critics_.push_back(build_critic<T>(ccfgs[i], cfg_.seed + 7700 + i));
    gen_opt_.init(gen_.params);
    critic_opt_.resize(critics_.size());
    for (std::size_t i = 0; i < critics_.size(); ++i) critic_opt_[i].init(critics_[i].params);
    feat_ = FixedFeatureNet<T>::make();
}

template <typename T>
StepReport Trainer<T>::train_step(const Batch<T>& batch) {
    try {
        StepReport r = do_step(batch);
        consecutive_aborts_ = 0;
        ++step_;
        r.step = step_;
        return r;
    } catch (const TapeError& e) {
        ++consecutive_aborts_;
        if (consecutive_aborts_ >= 3)
            throw TapeError(std::string("training halted after 3 consecutive aborted steps; last: ") +
                            e.what());
        StepReport r;
        r.step = step_;
        r.aborted = true;
        r.abort_reason = e.what();
        return r;
    }
}

template <typename T>
StepReport Trainer<T>::do_step(const Batch<T>& batch) {
    const int side = cfg_.side();
    const int n = batch.images.shape.size() == 4 ? batch.images.shape[0] : 0;
    if (n < 1 || batch.images.shape[1] != 3 || batch.images.shape[2] != side ||
        batch.images.shape[3] != side)
        throw TapeError("train_step: batch images " + shape_str(batch.images.shape) +
                        " do not match preset side " + std::to_string(side));
    if (static_cast<int>(batch.masks.size()) != n || static_cast<int>(batch.landmarks.size()) != n)
        throw TapeError("train_step: incomplete batch (masks/landmarks missing)");

    // per-sample geometry
    const ComponentSizes sizes = cfg_.resolved_component_sizes();
    std::vector<MaskPyramid> pyramids;
    std::vector<ComponentGeometry> geos;
    std::vector<MaskBundle> bundles;
    std::vector<const MaskPyramid*> pyr_ptrs;
    std::vector<const MaskBundle*> bundle_ptrs;
    std::vector<const Mask*> hole_ptrs;
    pyramids.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        pyramids.push_back(build_pyramid(batch.masks[static_cast<std::size_t>(i)], gen_.cfg.dsa_sides()));
        geos.push_back(component_geometry(batch.landmarks[static_cast<std::size_t>(i)], side, sizes));
        MaskBundle b;
        b.m1 = batch.masks[static_cast<std::size_t>(i)];
        b.components = geos.back().masks;
        bundles.push_back(std::move(b));
    }
    for (int i = 0; i < n; ++i) {
        pyr_ptrs.push_back(&pyramids[static_cast<std::size_t>(i)]);
        bundle_ptrs.push_back(&bundles[static_cast<std::size_t>(i)]);
        hole_ptrs.push_back(&bundles[static_cast<std::size_t>(i)].m1);
    }

    const auto crops =
        plan_critic_crops(side, cfg_.mask_mode, batch.masks, geos,
                          critics_[kLocal].cfg.min_input_side(),
                          critics_[kSubdivision].cfg.min_input_side());

    StepReport report;

    // masked-pass forward on the generator tape (also supplies the detached
    // output the critic updates train against)
    Tape<T> gtape;
    const Tensor<T> input = masked_input(batch.images, batch.masks);
    GenOutput<T> out = generator_forward(gtape, gen_, input, pyr_ptrs, GenMode::Train, true);

    // critic updates, Eq-8-style per critic, generator output detached
    for (int round = 0; round < cfg_.n_critic; ++round) {
        for (int ci = 0; ci < kCriticSlots; ++ci) {
            Tape<T> ctape;
            auto& critic = critics_[static_cast<std::size_t>(ci)];
            auto bound = bind_params(ctape, critic.params, true);
            ScoreFn<T> fn = [&](Tape<T>& tp, Var x) { return critic_forward(tp, critic, bound, x); };
            Var loss = critic_loss_with_gp(ctape, fn, crops[static_cast<std::size_t>(ci)], out.out_val,
                                           batch.images, rng_, cfg_.weights.gamma);
            critic.params.zero_grads();
            ctape.backward(loss);
            rmsprop_step(critic.params, critic_opt_[static_cast<std::size_t>(ci)], cfg_.lr);
            if (round == cfg_.n_critic - 1) {
                const double v = static_cast<double>(ctape.scalar_value(loss));
                report.critic_losses[kCriticSlotNames[static_cast<std::size_t>(ci)]] = v;
                report.critic_total += v;
            }
        }
    }

    // oracle pass: ground truth through the identical graph, detached targets
    const int kl_side = gen_.cfg.kl_side();
    std::vector<AttentionMaps<T>> oracle;
    {
        Tape<T> otape;
        GenOutput<T> o = generator_forward(otape, gen_, oracle_input(batch.images), pyr_ptrs,
                                           GenMode::Oracle, false);
        oracle = std::move(o.maps.at(kl_side));
    }

    // generator losses
    Var l_recon = recon_loss(gtape, out.out, batch.images, bundle_ptrs);
    Var l_perc = perceptual_loss(gtape, out.out, batch.images, hole_ptrs, feat_);
    KlResult<T> kl = attention_kl_loss(gtape, oracle, out.maps.at(kl_side), kl_side);
    report.kl_missing = kl.missing_terms;

    std::vector<AdvCriticInput<T>> adv;
    std::vector<std::vector<Var>> critic_bounds(kCriticSlots);
    for (int ci = 0; ci < kCriticSlots; ++ci) {
        Critic<T>* critic = &critics_[static_cast<std::size_t>(ci)];
        critic_bounds[static_cast<std::size_t>(ci)] = bind_params(gtape, critic->params, false);
        AdvCriticInput<T> in;
        const std::vector<Var>* bound = &critic_bounds[static_cast<std::size_t>(ci)];
        in.score_fn = [critic, bound](Tape<T>& tp, Var x) {
            return critic_forward(tp, *critic, *bound, x);
        };
        for (int i = 0; i < n; ++i) {
            std::vector<Var> sample;
            Var img_i = n == 1 ? out.out : gtape.slice_n(out.out, i, i + 1);
            for (const Rect& r : crops[static_cast<std::size_t>(ci)][static_cast<std::size_t>(i)]) {
                sample.push_back(r.height == side && r.width == side
                                     ? img_i
                                     : gtape.slice_hw(img_i, r.top, r.left, r.height, r.width));
            }
            in.crops.push_back(std::move(sample));
        }
        adv.push_back(std::move(in));
    }
    Var l_adv = generator_adv_loss(gtape, adv);
    Var total = total_generator_loss(gtape, l_recon, kl.value, l_perc, l_adv, cfg_.weights);

    gen_.params.zero_grads();
    gtape.backward(total);
    rmsprop_step(gen_.params, gen_opt_, cfg_.lr);

    report.recon = static_cast<double>(gtape.scalar_value(l_recon));
    report.kl = static_cast<double>(gtape.scalar_value(kl.value));
    report.perceptual = static_cast<double>(gtape.scalar_value(l_perc));
    report.gen_adv = static_cast<double>(gtape.scalar_value(l_adv));
    report.gen_total = static_cast<double>(gtape.scalar_value(total));
    report.hole_l1 = hole_l1(out.out_val, batch.images, batch.masks);
    return report;
}

template <typename T>
CheckpointData Trainer<T>::make_checkpoint() const {
    CheckpointData c;
    c.preset_tag = preset_name(cfg_.preset);
    c.side = static_cast<std::uint32_t>(cfg_.side());
    c.width_scale = cfg_.preset == Preset::Toy ? static_cast<float>(cfg_.toy_width_scale) : 1.0f;
    c.step = step_;
    c.rng_state = rng_.serialize();

    auto put = [&c](const std::string& name, const auto& tensor) {
        Tensor<float> t(tensor.shape);
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(tensor.data[i]);
        c.records.emplace_back(name, std::move(t));
    };
    for (const auto& p : gen_.params) put(p.name, p.value);
    for (auto& [name, tensor] : const_cast<Generator<T>&>(gen_).state_tensors()) put(name, *tensor);
    for (const auto& critic : critics_)
        for (const auto& p : critic.params) put(p.name, p.value);
    for (int i = 0; i < gen_.params.count(); ++i)
        put("opt." + gen_.params[i].name, gen_opt_.acc[static_cast<std::size_t>(i)]);
    for (std::size_t ci = 0; ci < critics_.size(); ++ci)
        for (int i = 0; i < critics_[ci].params.count(); ++i)
            put("opt." + critics_[ci].params[i].name, critic_opt_[ci].acc[static_cast<std::size_t>(i)]);
    return c;
}

template <typename T>
void Trainer<T>::restore(const CheckpointData& c) {
    if (c.preset_tag != preset_name(cfg_.preset) || c.side != static_cast<std::uint32_t>(cfg_.side()))
        throw DataError("checkpoint preset " + c.preset_tag + "/" + std::to_string(c.side) +
                        " does not match the configured " + preset_name(cfg_.preset) + "/" +
                        std::to_string(cfg_.side()));
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, tensor] : c.records) {
        if (!by_name.emplace(name, &tensor).second)
            throw DataError("duplicate checkpoint record '" + name + "'");
    }
    std::size_t consumed = 0;
    auto take = [&](const std::string& name, auto& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint is missing record '" + name + "'");
        if (it->second->shape != dst.shape)
            throw DataError("checkpoint record '" + name + "' has shape " +
                            shape_str(it->second->shape) + ", expected " + shape_str(dst.shape));
        ++consumed;
        return it->second;
    };
    // validate everything first: no partial state on failure
    for (const auto& p : gen_.params) take(p.name, p.value);
    for (auto& [name, tensor] : gen_.state_tensors()) take(name, *tensor);
    for (const auto& critic : critics_)
        for (const auto& p : critic.params) take(p.name, p.value);
    for (int i = 0; i < gen_.params.count(); ++i)
        take("opt." + gen_.params[i].name, gen_opt_.acc[static_cast<std::size_t>(i)]);
    for (std::size_t ci = 0; ci < critics_.size(); ++ci)
        for (int i = 0; i < critics_[ci].params.count(); ++i)
            take("opt." + critics_[ci].params[i].name, critic_opt_[ci].acc[static_cast<std::size_t>(i)]);
    if (consumed != c.records.size()) {
        for (const auto& [name, tensor] : c.records) {
            (void)tensor;
            bool known = false;
            for (const auto& p : gen_.params) known = known || p.name == name || ("opt." + p.name) == name;
            for (auto& [sname, t] : gen_.state_tensors()) {
                (void)t;
                known = known || sname == name;
            }
            for (const auto& critic : critics_)
                for (const auto& p : critic.params)
                    known = known || p.name == name || ("opt." + p.name) == name;
            if (!known) throw DataError("unknown parameter name in checkpoint: '" + name + "'");
        }
    }
    Rng restored(cfg_.seed);
    if (!restored.deserialize(c.rng_state)) throw DataError("corrupt seed state in checkpoint");

    auto copy_into = [&](const std::string& name, auto& dst) {
        const Tensor<float>* src = by_name.at(name);
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] = static_cast<T>(src->data[i]);
    };
    for (auto& p : gen_.params) copy_into(p.name, p.value);
    for (auto& [name, tensor] : gen_.state_tensors()) copy_into(name, *tensor);
    for (auto& critic : critics_)
        for (auto& p : critic.params) copy_into(p.name, p.value);
    for (int i = 0; i < gen_.params.count(); ++i)
        copy_into("opt." + gen_.params[i].name, gen_opt_.acc[static_cast<std::size_t>(i)]);
    for (std::size_t ci = 0; ci < critics_.size(); ++ci)
        for (int i = 0; i < critics_[ci].params.count(); ++i)
            copy_into("opt." + critics_[ci].params[i].name, critic_opt_[ci].acc[static_cast<std::size_t>(i)]);
    rng_ = restored;
    step_ = c.step;
    consecutive_aborts_ = 0;
}

template <typename T>
Batch<T> draw_batch(Rng& rng, const std::vector<Tensor<T>>& images,
                    const std::vector<LandmarkMap>& landmarks, int batch, int side, MaskMode mode,
                    const std::vector<Mask>* irregular_pool) {
    if (images.empty() || images.size() != landmarks.size())
        throw DataError("draw_batch: dataset images and landmarks do not line up");
    Batch<T> b;
    b.images = Tensor<T>({batch, 3, side, side});
    std::vector<int> picks;
    for (int i = 0; i < batch; ++i)
        picks.push_back(static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(images.size()) - 1)));
    for (int i = 0; i < batch; ++i) {
        const Tensor<T>& img = images[static_cast<std::size_t>(picks[static_cast<std::size_t>(i)])];
        if (img.shape != Shape{3, side, side})
            throw DataError("draw_batch: image shape " + shape_str(img.shape) + " != side " +
                            std::to_string(side));
        std::copy(img.data.begin(), img.data.end(),
                  b.images.data.begin() + static_cast<std::int64_t>(i) * 3 * side * side);
        b.landmarks.push_back(landmarks[static_cast<std::size_t>(picks[static_cast<std::size_t>(i)])]);
    }
    for (int i = 0; i < batch; ++i) {
        if (mode == MaskMode::Irregular) {
            if (!irregular_pool || irregular_pool->empty())
                throw DataError("draw_batch: irregular mask mode needs a mask pool");
            const auto pick = rng.uniform_int(0, static_cast<std::int64_t>(irregular_pool->size()) - 1);
            b.masks.push_back((*irregular_pool)[static_cast<std::size_t>(pick)]);
        } else {
            b.masks.push_back(gen_hole_mask(rng, side, mode));
        }
    }
    return b;
}

template <typename T>
Tensor<T> masked_input(const Tensor<T>& images, const std::vector<Mask>& masks) {
    const Shape& s = images.shape;
    Tensor<T> input({s[0], 4, s[2], s[3]});
    const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
    for (int i = 0; i < s[0]; ++i) {
        const Mask& m = masks[static_cast<std::size_t>(i)];
        for (int c = 0; c < 3; ++c) {
            const T* src = images.data.data() + (static_cast<std::int64_t>(i) * 3 + c) * hw;
            T* dst = input.data.data() + (static_cast<std::int64_t>(i) * 4 + c) * hw;
            for (std::int64_t j = 0; j < hw; ++j)
                dst[j] = m.bits[static_cast<std::size_t>(j)] ? src[j] : T(0);
        }
        T* mask_ch = input.data.data() + (static_cast<std::int64_t>(i) * 4 + 3) * hw;
        for (std::int64_t j = 0; j < hw; ++j) mask_ch[j] = static_cast<T>(m.bits[static_cast<std::size_t>(j)]);
    }
    return input;
}

template <typename T>
Tensor<T> oracle_input(const Tensor<T>& images) {
    const Shape& s = images.shape;
    Tensor<T> input({s[0], 4, s[2], s[3]});
    const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
    for (int i = 0; i < s[0]; ++i) {
        for (int c = 0; c < 3; ++c)
            std::copy(images.data.begin() + (static_cast<std::int64_t>(i) * 3 + c) * hw,
                      images.data.begin() + (static_cast<std::int64_t>(i) * 3 + c + 1) * hw,
                      input.data.begin() + (static_cast<std::int64_t>(i) * 4 + c) * hw);
        std::fill(input.data.begin() + (static_cast<std::int64_t>(i) * 4 + 3) * hw,
                  input.data.begin() + (static_cast<std::int64_t>(i) * 4 + 4) * hw, T(1));
    }
    return input;
}

template <typename T>
double hole_l1(const Tensor<T>& out, const Tensor<T>& gt, const std::vector<Mask>& masks) {
    const Shape& s = gt.shape;
    const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
    double acc = 0.0;
    std::int64_t count = 0;
    for (int i = 0; i < s[0]; ++i) {
        const Mask& m = masks[static_cast<std::size_t>(i)];
        for (int c = 0; c < 3; ++c) {
            const T* a = out.data.data() + (static_cast<std::int64_t>(i) * 3 + c) * hw;
            const T* b = gt.data.data() + (static_cast<std::int64_t>(i) * 3 + c) * hw;
            for (std::int64_t j = 0; j < hw; ++j)
                if (!m.bits[static_cast<std::size_t>(j)]) {
                    acc += std::abs(static_cast<double>(a[j]) - static_cast<double>(b[j]));
                    ++count;
                }
        }
    }
    return count ? acc / static_cast<double>(count) : 0.0;
}

#define OATTN_INSTANTIATE(T)                                                                       \
    template void rmsprop_step<T>(ParamSet<T>&, RmspropState<T>&, double);                         \
    template class Trainer<T>;                                                                     \
    template Batch<T> draw_batch<T>(Rng&, const std::vector<Tensor<T>>&,                           \
                                    const std::vector<LandmarkMap>&, int, int, MaskMode,           \
                                    const std::vector<Mask>*);                                     \
    template Tensor<T> masked_input<T>(const Tensor<T>&, const std::vector<Mask>&);                \
    template Tensor<T> oracle_input<T>(const Tensor<T>&);                                          \
    template double hole_l1<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<Mask>&);

OATTN_INSTANTIATE(float)
OATTN_INSTANTIATE(double)
#undef OATTN_INSTANTIATE

}  // namespace oattn
