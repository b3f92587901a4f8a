#pragma once

#include <string>

#include "mask.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace oattn {

// Parameter indices of one dual-spatial-attention layer within a ParamSet.
// Projection widths: q/k map C -> Ck with Ck = max(1, C/8); v keeps C. The
// two gates start at exactly zero; fusion is a 3x3 C->C convolution.
struct DsaParamRefs {
    int wq = -1, wk = -1, wv = -1;     // cross branch (queries from holes, keys/values from context)
    int wq2 = -1, wk2 = -1, wv2 = -1;  // self branch (all from holes)
    int alpha = -1, beta = -1;
    int fuse_w = -1, fuse_b = -1;
    int channels = 0;
    int ck = 0;
    int level = 0;  // feature side this layer runs at
};

template <typename T>
DsaParamRefs build_dsa_params(ParamSet<T>& ps, const std::string& prefix, int channels, int level,
                              Rng& rng);

// Tape bindings for one DSA layer.
struct DsaBound {
    Var wq, wk, wv, wq2, wk2, wv2, alpha, beta, fuse_w, fuse_b;
};

template <typename T>
DsaBound bind_dsa(Tape<T>& tape, ParamSet<T>& ps, const DsaParamRefs& refs, bool trainable);

// Row-stochastic attention maps of one layer on one sample. Vars are alive
// only while the producing tape lives; the value copies are detached.
template <typename T>
struct AttentionMaps {
    int level = 0;
    bool has_cross = false;
    bool has_self = false;
    Var cross;  // N x N'
    Var self;   // N x N
    Tensor<T> cross_val;
    Tensor<T> self_val;
};

// One attention branch result; inactive when its partition side is empty.
struct AttentionBranch {
    bool active = false;
    Var padded;  // [1,C,H,W], rebuilt rows scattered to hole positions, zero elsewhere
    Var map;
};

// Hole-to-context attention: softmax over context positions of q.k scores,
// context values recombined per hole row, zero-padded back to the map size.
// Inactive when there are no hole or no context positions.
template <typename T>
AttentionBranch cross_attention(Tape<T>& tape, Var x, const PyramidLevel& part, const DsaBound& p);

// Hole self-attention over all hole positions (diagonal included).
template <typename T>
AttentionBranch self_attention(Tape<T>& tape, Var x, const PyramidLevel& part, const DsaBound& p);

template <typename T>
struct DsaOut {
    Var z;          // fused output [1,C,H,W]
    Var prefusion;  // Y + Y' before the fusion convolution
    AttentionMaps<T> maps;
};

// Full layer: Y = alpha*P + X, Y' = beta*P' + X, Z = fuse(Y + Y'). An
// inactive branch degenerates its Y term to X.
template <typename T>
DsaOut<T> dsa_forward(Tape<T>& tape, Var x, const PyramidLevel& part, const DsaBound& p);

// Attention maps of the same layer evaluated on ground-truth features with
// the same partition, returned as detached values only.
template <typename T>
AttentionMaps<T> oracle_maps(Tape<T>& tape, Var x_gt, const PyramidLevel& part, const DsaBound& p);

}  // namespace oattn
