#pragma once

// Independent loop-level reference implementations used as test oracles.
// Everything here is written directly from the defining formulas with plain
// double loops; nothing is shared with the tape path it checks.

#include <cmath>
#include <vector>

#include "oattn/mask.hpp"
#include "oattn/tensor.hpp"

namespace refimpl {

struct RefAttention {
    bool has_cross = false, has_self = false;
    std::vector<double> cross;  // N x N'
    std::vector<double> self;   // N x N
    std::vector<double> z;      // C*H*W fused output
    std::vector<double> prefusion;
};

// x: [C,S,S] row-major; weights as in DsaParamRefs layout (wq,wk: [C,Ck],
// wv: [C,C], fuse_w: [C,C,3,3], fuse_b: [C]); partition index lists row-major
// over S*S positions.
inline RefAttention ref_dsa(const std::vector<double>& x, int c, int s, int ck,
                            const std::vector<int>& fg, const std::vector<int>& bg,
                            const std::vector<double>& wq, const std::vector<double>& wk,
                            const std::vector<double>& wv, const std::vector<double>& wq2,
                            const std::vector<double>& wk2, const std::vector<double>& wv2,
                            double alpha, double beta, const std::vector<double>& fuse_w,
                            const std::vector<double>& fuse_b) {
    const int hw = s * s;
    const int n = static_cast<int>(fg.size());
    const int nb = static_cast<int>(bg.size());
    auto xat = [&](int ch, int pos) { return x[static_cast<std::size_t>(ch) * hw + pos]; };

    auto project = [&](const std::vector<int>& idx, const std::vector<double>& w, int wout) {
        std::vector<double> out(idx.size() * static_cast<std::size_t>(wout), 0.0);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int o = 0; o < wout; ++o) {
                double acc = 0.0;
                for (int ci = 0; ci < c; ++ci)
                    acc += xat(ci, idx[i]) * w[static_cast<std::size_t>(ci) * wout + o];
                out[i * static_cast<std::size_t>(wout) + o] = acc;
            }
        return out;
    };

    auto softmax_map = [&](const std::vector<double>& q, const std::vector<double>& k, int rows,
                           int cols) {
        std::vector<double> e(static_cast<std::size_t>(rows) * cols);
        for (int i = 0; i < rows; ++i) {
            double denom = 0.0;
            for (int j = 0; j < cols; ++j) {
                double dot = 0.0;
                for (int d = 0; d < ck; ++d)
                    dot += q[static_cast<std::size_t>(i) * ck + d] * k[static_cast<std::size_t>(j) * ck + d];
                e[static_cast<std::size_t>(i) * cols + j] = std::exp(dot);
                denom += e[static_cast<std::size_t>(i) * cols + j];
            }
            for (int j = 0; j < cols; ++j) e[static_cast<std::size_t>(i) * cols + j] /= denom;
        }
        return e;
    };

    // padded contribution of one branch, [C,S,S] layout
    auto branch_pad = [&](const std::vector<double>& e, const std::vector<double>& v, int rows,
                          int cols) {
        std::vector<double> pad(static_cast<std::size_t>(c) * hw, 0.0);
        for (int i = 0; i < rows; ++i)
            for (int ci = 0; ci < c; ++ci) {
                double acc = 0.0;
                for (int j = 0; j < cols; ++j)
                    acc += e[static_cast<std::size_t>(i) * cols + j] * v[static_cast<std::size_t>(j) * c + ci];
                pad[static_cast<std::size_t>(ci) * hw + fg[static_cast<std::size_t>(i)]] = acc;
            }
        return pad;
    };

    RefAttention out;
    std::vector<double> y(x.size()), y2(x.size());
    std::copy(x.begin(), x.end(), y.begin());
    std::copy(x.begin(), x.end(), y2.begin());

    if (n > 0 && nb > 0) {
        auto q = project(fg, wq, ck);
        auto k = project(bg, wk, ck);
        auto v = project(bg, wv, c);
        out.cross = softmax_map(q, k, n, nb);
        out.has_cross = true;
        auto pad = branch_pad(out.cross, v, n, nb);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = alpha * pad[i] + x[i];
    }
    if (n > 0) {
        auto q = project(fg, wq2, ck);
        auto k = project(fg, wk2, ck);
        auto v = project(fg, wv2, c);
        out.self = softmax_map(q, k, n, n);
        out.has_self = true;
        auto pad = branch_pad(out.self, v, n, n);
        for (std::size_t i = 0; i < y2.size(); ++i) y2[i] = beta * pad[i] + x[i];
    }

    out.prefusion.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out.prefusion[i] = y[i] + y2[i];

    // 3x3 pad-1 convolution plus bias
    out.z.assign(x.size(), 0.0);
    for (int co = 0; co < c; ++co)
        for (int r = 0; r < s; ++r)
            for (int cc = 0; cc < s; ++cc) {
                double acc = fuse_b[static_cast<std::size_t>(co)];
                for (int ci = 0; ci < c; ++ci)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ir = r + ky - 1, ic = cc + kx - 1;
                            if (ir < 0 || ir >= s || ic < 0 || ic >= s) continue;
                            acc += out.prefusion[static_cast<std::size_t>(ci) * hw + ir * s + ic] *
                                   fuse_w[((static_cast<std::size_t>(co) * c + ci) * 3 + ky) * 3 + kx];
                        }
                out.z[static_cast<std::size_t>(co) * hw + r * s + cc] = acc;
            }
    return out;
}

// Average KL divergence between oracle and predicted maps, each row a
// distribution; 1/(rows*cols) normalization, logs clamped at 1e-12.
inline double ref_kl_term(const std::vector<double>& oracle, const std::vector<double>& pred,
                          int rows, int cols) {
    double acc = 0.0;
    for (std::size_t i = 0; i < oracle.size(); ++i) {
        const double o = std::max(oracle[i], 1e-12);
        const double p = std::max(pred[i], 1e-12);
        acc += oracle[i] * (std::log(o) - std::log(p));
    }
    return acc / (static_cast<double>(rows) * cols);
}

}  // namespace refimpl
