#pragma once

#include <cstdint>
#include <string>

namespace oattn {

struct BenchResult {
    int n = 0;         // hole positions
    int n_prime = 0;   // context positions
    int channels = 0;
    int iterations = 0;
    double dsa_mean_ms = 0, dsa_std_ms = 0;
    double ref_mean_ms = 0, ref_std_ms = 0;
    bool correctness_ok = false;

    std::string to_text() const;
    std::string to_json() const;
};

// Times the attention kernels at one feature geometry: (a) the
// matrix-multiplication formulation (cross + self branches on the tape) and
// (b) a minimal 3x3-patch cross-correlation reference in the style of
// patch-matching attention, used purely as a timing baseline. Both must pass
// a correctness gate first: hole reconstructions are row-stochastic
// combinations of context features. Absolute times are machine-bound;
// only the comparison between the two on the same machine is meaningful.
BenchResult bench_dsa(int side, int channels, int iterations, std::uint64_t seed);

}  // namespace oattn
