#include "oattn/dsa.hpp"

#include <cmath>

namespace oattn {

namespace {

template <typename T>
Tensor<T> he_normal(Rng& rng, Shape shape, int fan_in) {
    Tensor<T> t(shape);
    const double std = std::sqrt(2.0 / fan_in);
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * std);
    return t;
}

// [1,C,H,W] -> [H*W, C] row-per-position matrix
template <typename T>
Var as_rows(Tape<T>& t, Var x) {
    const Shape& s = t.shape(x);
    return t.transpose2d(t.reshape(x, {s[1], s[2] * s[3]}));
}

template <typename T>
Var rows_to_map(Tape<T>& t, Var rows, int c, int h, int w) {
    return t.reshape(t.transpose2d(rows), {1, c, h, w});
}

}  // namespace

template <typename T>
DsaParamRefs build_dsa_params(ParamSet<T>& ps, const std::string& prefix, int channels, int level,
                              Rng& rng) {
    DsaParamRefs r;
    r.channels = channels;
    r.ck = std::max(1, channels / 8);
    r.level = level;
    r.wq = ps.add(prefix + ".wq", he_normal<T>(rng, {channels, r.ck}, channels));
    r.wk = ps.add(prefix + ".wk", he_normal<T>(rng, {channels, r.ck}, channels));
    r.wv = ps.add(prefix + ".wv", he_normal<T>(rng, {channels, channels}, channels));
    r.wq2 = ps.add(prefix + ".wq2", he_normal<T>(rng, {channels, r.ck}, channels));
    r.wk2 = ps.add(prefix + ".wk2", he_normal<T>(rng, {channels, r.ck}, channels));
    r.wv2 = ps.add(prefix + ".wv2", he_normal<T>(rng, {channels, channels}, channels));
    r.alpha = ps.add(prefix + ".alpha", Tensor<T>({1}));
    r.beta = ps.add(prefix + ".beta", Tensor<T>({1}));
    r.fuse_w = ps.add(prefix + ".fuse.w", he_normal<T>(rng, {channels, channels, 3, 3}, channels * 9));
    r.fuse_b = ps.add(prefix + ".fuse.b", Tensor<T>({channels}));
    return r;
}

template <typename T>
DsaBound bind_dsa(Tape<T>& tape, ParamSet<T>& ps, const DsaParamRefs& refs, bool trainable) {
    DsaBound b;
    b.wq = tape.leaf(ps[refs.wq].value, trainable);
    b.wk = tape.leaf(ps[refs.wk].value, trainable);
    b.wv = tape.leaf(ps[refs.wv].value, trainable);
    b.wq2 = tape.leaf(ps[refs.wq2].value, trainable);
    b.wk2 = tape.leaf(ps[refs.wk2].value, trainable);
    b.wv2 = tape.leaf(ps[refs.wv2].value, trainable);
    b.alpha = tape.leaf(ps[refs.alpha].value, trainable);
    b.beta = tape.leaf(ps[refs.beta].value, trainable);
    b.fuse_w = tape.leaf(ps[refs.fuse_w].value, trainable);
    b.fuse_b = tape.leaf(ps[refs.fuse_b].value, trainable);
    return b;
}

namespace {

// shared body of both branches: queries from `query_rows`, keys/values from
// `context_rows`; rebuilt rows are scattered back to the query positions.
template <typename T>
AttentionBranch attention_branch(Tape<T>& t, Var query_rows, Var context_rows, IndexList query_idx,
                                 int positions, int c, int h, int w, Var wq, Var wk, Var wv) {
    Var q = t.matmul(query_rows, wq);
    Var k = t.matmul(context_rows, wk);
    Var e = t.softmax_rows(t.matmul(q, k, false, true));
    Var v = t.matmul(context_rows, wv);
    Var rebuilt = t.matmul(e, v);
    AttentionBranch out;
    out.active = true;
    out.map = e;
    out.padded = rows_to_map(t, t.scatter_rows(rebuilt, std::move(query_idx), positions), c, h, w);
    return out;
}

}  // namespace

template <typename T>
AttentionBranch cross_attention(Tape<T>& tape, Var x, const PyramidLevel& part, const DsaBound& p) {
    const Shape s = tape.shape(x);
    if (s.size() != 4 || s[0] != 1 || s[2] != part.side || s[3] != part.side)
        throw TapeError("cross_attention: feature " + shape_str(s) + " does not match level " +
                        std::to_string(part.side));
    if (part.foreground->empty() || part.background->empty()) return AttentionBranch{};
    Var rows = as_rows(tape, x);
    Var xp = tape.gather_rows(rows, part.foreground);
    Var xb = tape.gather_rows(rows, part.background);
    return attention_branch(tape, xp, xb, part.foreground, part.side * part.side, s[1], s[2], s[3],
                            p.wq, p.wk, p.wv);
}

template <typename T>
AttentionBranch self_attention(Tape<T>& tape, Var x, const PyramidLevel& part, const DsaBound& p) {
    const Shape s = tape.shape(x);
    if (s.size() != 4 || s[0] != 1 || s[2] != part.side || s[3] != part.side)
        throw TapeError("self_attention: feature " + shape_str(s) + " does not match level " +
                        std::to_string(part.side));
    if (part.foreground->empty()) return AttentionBranch{};
    Var rows = as_rows(tape, x);
    Var xp = tape.gather_rows(rows, part.foreground);
    return attention_branch(tape, xp, xp, part.foreground, part.side * part.side, s[1], s[2], s[3],
                            p.wq2, p.wk2, p.wv2);
}

template <typename T>
DsaOut<T> dsa_forward(Tape<T>& tape, Var x, const PyramidLevel& part, const DsaBound& p) {
    const Shape s = tape.shape(x);
    AttentionBranch cross = cross_attention(tape, x, part, p);
    AttentionBranch self = self_attention(tape, x, part, p);

    Var y = cross.active
                ? tape.add(tape.mul(tape.expand_scalar(p.alpha, s), cross.padded), x)
                : x;
    Var y2 = self.active
                 ? tape.add(tape.mul(tape.expand_scalar(p.beta, s), self.padded), x)
                 : x;

    DsaOut<T> out;
    out.prefusion = tape.add(y, y2);
    Var fused = tape.conv2d(out.prefusion, p.fuse_w, 1, 1);
    out.z = tape.add(fused, tape.broadcast_c(p.fuse_b, s[0], s[2], s[3]));
    out.maps.level = part.side;
    if (cross.active) {
        out.maps.has_cross = true;
        out.maps.cross = cross.map;
        out.maps.cross_val = tape.tensor(cross.map);
    }
    if (self.active) {
        out.maps.has_self = true;
        out.maps.self = self.map;
        out.maps.self_val = tape.tensor(self.map);
    }
    return out;
}

template <typename T>
AttentionMaps<T> oracle_maps(Tape<T>& tape, Var x_gt, const PyramidLevel& part, const DsaBound& p) {
    AttentionBranch cross = cross_attention(tape, x_gt, part, p);
    AttentionBranch self = self_attention(tape, x_gt, part, p);
    AttentionMaps<T> maps;
    maps.level = part.side;
    if (cross.active) {
        maps.has_cross = true;
        maps.cross_val = tape.tensor(cross.map);
    }
    if (self.active) {
        maps.has_self = true;
        maps.self_val = tape.tensor(self.map);
    }
    return maps;
}

#define OATTN_INSTANTIATE(T)                                                                       \
    template DsaParamRefs build_dsa_params<T>(ParamSet<T>&, const std::string&, int, int, Rng&);   \
    template DsaBound bind_dsa<T>(Tape<T>&, ParamSet<T>&, const DsaParamRefs&, bool);              \
    template AttentionBranch cross_attention<T>(Tape<T>&, Var, const PyramidLevel&, const DsaBound&); \
    template AttentionBranch self_attention<T>(Tape<T>&, Var, const PyramidLevel&, const DsaBound&);  \
    template DsaOut<T> dsa_forward<T>(Tape<T>&, Var, const PyramidLevel&, const DsaBound&);        \
    template AttentionMaps<T> oracle_maps<T>(Tape<T>&, Var, const PyramidLevel&, const DsaBound&);

OATTN_INSTANTIATE(float)
OATTN_INSTANTIATE(double)
#undef OATTN_INSTANTIATE

}  // namespace oattn
