#include "oattn/losses.hpp"

#include <cmath>

namespace oattn {

namespace {
constexpr double kLogClamp = 1e-12;
constexpr double kNormEps = 1e-12;
}  // namespace

template <typename T>
Tensor<T> recon_weight_map(const MaskBundle& bundle) {
    const int h = bundle.m1.height, w = bundle.m1.width;
    if (!bundle.m1.is_binary()) throw TapeError("recon_loss: hole mask is not binary");
    Tensor<T> wmap({1, h, w});
    for (std::size_t i = 0; i < bundle.m1.bits.size(); ++i)
        wmap.data[i] = static_cast<T>(1 + (bundle.m1.bits[i] == 0 ? 1 : 0));
    for (const char* name : kComponentNames) {
        auto it = bundle.components.find(name);
        if (it == bundle.components.end())
            throw TapeError(std::string("recon_loss: bundle missing component mask '") + name + "'");
        const Mask& m = it->second;
        if (m.height != h || m.width != w || !m.is_binary())
            throw TapeError(std::string("recon_loss: component mask '") + name +
                            "' is not binary or has the wrong size");
        for (std::size_t i = 0; i < m.bits.size(); ++i)
            if (m.bits[i] == 0) wmap.data[i] += T(1);
    }
    return wmap;
}

template <typename T>
Var recon_loss(Tape<T>& tape, Var out, const Tensor<T>& gt,
               const std::vector<const MaskBundle*>& bundles) {
    const Shape s = tape.shape(out);
    if (s.size() != 4 || gt.shape != s)
        throw TapeError("recon_loss: output " + shape_str(s) + " vs ground truth " +
                        shape_str(gt.shape));
    if (static_cast<int>(bundles.size()) != s[0])
        throw TapeError("recon_loss: bundle count does not match the batch");
    Tensor<T> weights(s);
    const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
    for (int n = 0; n < s[0]; ++n) {
        Tensor<T> wmap = recon_weight_map<T>(*bundles[static_cast<std::size_t>(n)]);
        if (wmap.shape[1] != s[2] || wmap.shape[2] != s[3])
            throw TapeError("recon_loss: mask size does not match the image");
        for (int c = 0; c < s[1]; ++c)
            std::copy(wmap.data.begin(), wmap.data.end(),
                      weights.data.begin() + (static_cast<std::int64_t>(n) * s[1] + c) * hw);
    }
    return tape.mean(tape.mul(tape.constant(weights), tape.abs(tape.sub(out, tape.constant(gt)))));
}

namespace {

// mean absolute distance over the three concatenated feature stages
template <typename T>
Var feature_distance(Tape<T>& tape, const std::array<Var, 3>& a, const std::array<Var, 3>& b) {
    Var acc;
    std::int64_t total = 0;
    for (int i = 0; i < 3; ++i) {
        Var part = tape.sum(tape.abs(tape.sub(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(i)])));
        acc = acc.valid() ? tape.add(acc, part) : part;
        total += numel(tape.shape(a[static_cast<std::size_t>(i)]));
    }
    return tape.scalar_mul(acc, 1.0 / static_cast<double>(total));
}

}  // namespace

template <typename T>
Var perceptual_loss(Tape<T>& tape, Var out, const Tensor<T>& gt,
                    const std::vector<const Mask*>& holes, const FixedFeatureNet<T>& net) {
    const Shape s = tape.shape(out);
    if (s.size() != 4 || gt.shape != s)
        throw TapeError("perceptual_loss: output " + shape_str(s) + " vs ground truth " +
                        shape_str(gt.shape));
    if (static_cast<int>(holes.size()) != s[0])
        throw TapeError("perceptual_loss: mask count does not match the batch");

    // valid-pixel composite as a differentiable expression: out + m*(gt - out)
    Tensor<T> mask_full(s);
    const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
    for (int n = 0; n < s[0]; ++n) {
        const Mask& m = *holes[static_cast<std::size_t>(n)];
        if (m.height != s[2] || m.width != s[3])
            throw TapeError("perceptual_loss: mask size does not match the image");
        for (int c = 0; c < s[1]; ++c)
            for (std::int64_t i = 0; i < hw; ++i)
                mask_full.data[static_cast<std::size_t>((static_cast<std::int64_t>(n) * s[1] + c) * hw + i)] =
                    static_cast<T>(m.bits[static_cast<std::size_t>(i)]);
    }
    Var gt_c = tape.constant(gt);
    Var mask_c = tape.constant(mask_full);
    Var gen = tape.add(out, tape.mul(mask_c, tape.sub(gt_c, out)));

    auto f_out = feature_forward(tape, net, out);
    auto f_gt = feature_forward(tape, net, gt_c);
    auto f_gen = feature_forward(tape, net, gen);
    return tape.add(feature_distance(tape, f_out, f_gt), feature_distance(tape, f_gen, f_gt));
}

namespace {

// one KL term: oracle row distributions against predicted ones;
// sum(Egt * (ln clamp(Egt) - ln clamp(E))) / (rows * cols). Built entirely
// from tape ops so identical maps cancel to an exact zero.
template <typename T>
Var kl_term(Tape<T>& tape, const Tensor<T>& oracle, Var predicted) {
    const Shape s = tape.shape(predicted);
    if (oracle.shape != s)
        throw TapeError("attention_kl_loss: oracle map " + shape_str(oracle.shape) +
                        " does not match masked-pass map " + shape_str(s) +
                        " (partition mismatch between passes)");
    Var oracle_c = tape.constant(oracle);
    Var log_gap = tape.sub(tape.log(tape.clamp_min(oracle_c, kLogClamp)),
                           tape.log(tape.clamp_min(predicted, kLogClamp)));
    Var kl = tape.sum(tape.mul(oracle_c, log_gap));
    return tape.scalar_mul(kl, 1.0 / static_cast<double>(numel(s)));
}

}  // namespace

template <typename T>
KlResult<T> attention_kl_loss(Tape<T>& tape, const std::vector<AttentionMaps<T>>& oracle,
                              const std::vector<AttentionMaps<T>>& masked, int expected_level) {
    if (oracle.size() != masked.size())
        throw TapeError("attention_kl_loss: oracle and masked map counts differ");
    KlResult<T> res;
    Var acc;
    for (std::size_t i = 0; i < masked.size(); ++i) {
        const auto& o = oracle[i];
        const auto& m = masked[i];
        if (o.level != expected_level || m.level != expected_level)
            throw TapeError("attention_kl_loss: map level " + std::to_string(m.level) +
                            " does not match the supervision level " + std::to_string(expected_level));
        if (o.has_cross != m.has_cross || o.has_self != m.has_self)
            throw TapeError("attention_kl_loss: branch mismatch between the two passes");
        Var sample;
        if (m.has_cross) {
            Var t = kl_term(tape, o.cross_val, m.cross);
            sample = t;
        } else {
            ++res.missing_terms;
        }
        if (m.has_self) {
            Var t = kl_term(tape, o.self_val, m.self);
            sample = sample.valid() ? tape.add(sample, t) : t;
        } else {
            ++res.missing_terms;
        }
        if (!sample.valid()) sample = tape.scalar_const(T(0));
        acc = acc.valid() ? tape.add(acc, sample) : sample;
    }
    if (!acc.valid()) acc = tape.scalar_const(T(0));
    res.value = tape.scalar_mul(acc, masked.empty() ? 1.0 : 1.0 / static_cast<double>(masked.size()));
    return res;
}

template <typename T>
Tensor<T> tensor_crop(const Tensor<T>& images, int sample, const Rect& r) {
    const Shape& s = images.shape;
    if (s.size() != 4 || sample < 0 || sample >= s[0] || r.top < 0 || r.left < 0 ||
        r.top + r.height > s[2] || r.left + r.width > s[3])
        throw TapeError("tensor_crop: bad crop " + std::to_string(r.top) + "," +
                        std::to_string(r.left) + " " + std::to_string(r.height) + "x" +
                        std::to_string(r.width) + " of " + shape_str(s));
    Tensor<T> out({1, s[1], r.height, r.width});
    const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
    for (int c = 0; c < s[1]; ++c) {
        const T* src = images.data.data() + (static_cast<std::int64_t>(sample) * s[1] + c) * hw;
        T* dst = out.data.data() + static_cast<std::int64_t>(c) * r.height * r.width;
        for (int y = 0; y < r.height; ++y)
            for (int x = 0; x < r.width; ++x)
                dst[y * r.width + x] = src[static_cast<std::int64_t>(r.top + y) * s[3] + r.left + x];
    }
    return out;
}

template <typename T>
Var critic_loss_with_gp(Tape<T>& tape, const ScoreFn<T>& score_fn,
                        const std::vector<std::vector<Rect>>& crops_per_sample,
                        const Tensor<T>& fake_images, const Tensor<T>& real_images, Rng& rng,
                        double gamma) {
    if (fake_images.shape != real_images.shape)
        throw TapeError("critic_loss_with_gp: fake " + shape_str(fake_images.shape) + " vs real " +
                        shape_str(real_images.shape));
    const int batch = fake_images.shape[0];
    if (batch < 1 || static_cast<int>(crops_per_sample.size()) != batch)
        throw TapeError("critic_loss_with_gp: crop lists do not match the batch");

    Var fake_acc, real_acc, gp_acc;
    for (int n = 0; n < batch; ++n) {
        // one t per sample; the interpolate lives at image resolution and is
        // realized crop by crop
        const T t = static_cast<T>(rng.uniform());
        Var sample_fake, sample_real, sample_gp;
        for (const Rect& r : crops_per_sample[static_cast<std::size_t>(n)]) {
            Tensor<T> fake_crop = tensor_crop(fake_images, n, r);
            Tensor<T> real_crop = tensor_crop(real_images, n, r);
            Tensor<T> interp_crop(fake_crop.shape);
            for (std::size_t i = 0; i < interp_crop.data.size(); ++i)
                interp_crop.data[i] = t * real_crop.data[i] + (T(1) - t) * fake_crop.data[i];

            Var f = tape.mean(score_fn(tape, tape.input(fake_crop, false)));
            Var rl = tape.mean(score_fn(tape, tape.input(real_crop, false)));
            Var xin = tape.input(interp_crop, true);
            Var score = tape.mean(score_fn(tape, xin));
            Var g = tape.grad(score, xin);
            Var norm = tape.sqrt(tape.scalar_add(tape.sum(tape.square(g)), kNormEps));
            Var pen = tape.square(tape.scalar_add(norm, -1.0));

            sample_fake = sample_fake.valid() ? tape.add(sample_fake, f) : f;
            sample_real = sample_real.valid() ? tape.add(sample_real, rl) : rl;
            sample_gp = sample_gp.valid() ? tape.add(sample_gp, pen) : pen;
        }
        if (!sample_fake.valid())
            throw TapeError("critic_loss_with_gp: sample " + std::to_string(n) + " has no crops");
        fake_acc = fake_acc.valid() ? tape.add(fake_acc, sample_fake) : sample_fake;
        real_acc = real_acc.valid() ? tape.add(real_acc, sample_real) : sample_real;
        gp_acc = gp_acc.valid() ? tape.add(gp_acc, sample_gp) : sample_gp;
    }
    const double inv_b = 1.0 / static_cast<double>(batch);
    Var loss = tape.sub(tape.scalar_mul(fake_acc, inv_b), tape.scalar_mul(real_acc, inv_b));
    return tape.add(loss, tape.scalar_mul(gp_acc, gamma * inv_b));
}

template <typename T>
Var generator_adv_loss(Tape<T>& tape, const std::vector<AdvCriticInput<T>>& critics) {
    Var acc;
    for (const auto& c : critics) {
        if (c.crops.empty()) throw TapeError("generator_adv_loss: critic with no crops");
        Var critic_acc;
        for (const auto& sample_crops : c.crops) {
            for (const Var crop : sample_crops) {
                Var score = tape.mean(c.score_fn(tape, crop));
                critic_acc = critic_acc.valid() ? tape.add(critic_acc, score) : score;
            }
        }
        Var mean_score = tape.scalar_mul(critic_acc, 1.0 / static_cast<double>(c.crops.size()));
        acc = acc.valid() ? tape.add(acc, mean_score) : mean_score;
    }
    if (!acc.valid()) throw TapeError("generator_adv_loss: no critics");
    return tape.scalar_mul(acc, -1.0);
}

template <typename T>
Var total_generator_loss(Tape<T>& tape, Var recon, Var kl, Var perceptual, Var adversarial,
                         const LossWeights& w) {
    const struct {
        const char* name;
        Var v;
    } parts[] = {{"reconstruction", recon}, {"kl", kl}, {"perceptual", perceptual}, {"adversarial", adversarial}};
    for (const auto& p : parts)
        if (!std::isfinite(static_cast<double>(tape.scalar_value(p.v))))
            throw TapeError(std::string("total_generator_loss: non-finite ") + p.name + " part");
    return tape.add(tape.add(tape.scalar_mul(recon, w.lambda_r), tape.scalar_mul(kl, w.lambda_kl)),
                    tape.add(tape.scalar_mul(perceptual, w.lambda_p),
                             tape.scalar_mul(adversarial, w.lambda_g)));
}

#define OATTN_INSTANTIATE(T)                                                                         \
    template Tensor<T> recon_weight_map<T>(const MaskBundle&);                                       \
    template Var recon_loss<T>(Tape<T>&, Var, const Tensor<T>&, const std::vector<const MaskBundle*>&); \
    template Var perceptual_loss<T>(Tape<T>&, Var, const Tensor<T>&, const std::vector<const Mask*>&, \
                                    const FixedFeatureNet<T>&);                                      \
    template KlResult<T> attention_kl_loss<T>(Tape<T>&, const std::vector<AttentionMaps<T>>&,        \
                                              const std::vector<AttentionMaps<T>>&, int);            \
    template Tensor<T> tensor_crop<T>(const Tensor<T>&, int, const Rect&);                           \
    template Var critic_loss_with_gp<T>(Tape<T>&, const ScoreFn<T>&,                                 \
                                        const std::vector<std::vector<Rect>>&, const Tensor<T>&,     \
                                        const Tensor<T>&, Rng&, double);                             \
    template Var generator_adv_loss<T>(Tape<T>&, const std::vector<AdvCriticInput<T>>&);             \
    template Var total_generator_loss<T>(Tape<T>&, Var, Var, Var, Var, const LossWeights&);

OATTN_INSTANTIATE(float)
OATTN_INSTANTIATE(double)
#undef OATTN_INSTANTIATE

}  // namespace oattn
