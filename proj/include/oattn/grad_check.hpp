#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace oattn {

// Central-difference verification of analytic gradients, 64-bit only.
//
// `eval` must rebuild the computation from the current parameter values on a
// fresh tape and return the scalar loss; when `with_grad` is true it must also
// run backward so that each parameter's grad holds the analytic gradient.
// Returns max_i |analytic_i - central_i| / max(1e-8, |central_i|).
inline double grad_check(const std::function<double(bool with_grad)>& eval,
                         const std::vector<Parameter<double>*>& params, double eps) {
    if (!(eps >= 1e-6 && eps <= 1e-3))
        throw TapeError("grad_check: eps " + std::to_string(eps) + " outside [1e-6, 1e-3]");
    for (auto* p : params) p->value.zero_grad();
    const double base = eval(true);
    if (!std::isfinite(base)) throw TapeError("grad_check: non-finite loss value");

    double max_rel = 0.0;
    for (auto* p : params) {
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            const double saved = p->value.data[i];
            p->value.data[i] = saved + eps;
            const double fp = eval(false);
            p->value.data[i] = saved - eps;
            const double fm = eval(false);
            p->value.data[i] = saved;
            const double central = (fp - fm) / (2.0 * eps);
            const double analytic = p->value.grad[i];
            if (!std::isfinite(central) || !std::isfinite(analytic))
                throw TapeError("grad_check: non-finite gradient for parameter '" + p->name +
                                "' at element " + std::to_string(i));
            const double rel =
                std::abs(analytic - central) / std::max(1e-8, std::abs(central));
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

}  // namespace oattn
