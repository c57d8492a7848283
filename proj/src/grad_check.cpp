// SPDX-License-Identifier: Apache-2.0
#include "selfroute/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace selfroute {

template <typename T>
double grad_check(const ScalarFn<T>& f, BasicTensor<T> x, double eps) {
    if (!(eps >= 1e-4 && eps <= 1e-2)) {
        throw ContractError("grad_check: eps must lie in [1e-4, 1e-2]");
    }
    const bool had_grad_flag = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();
    std::vector<T> analytic;
    {
        Tape tape;
        auto loss = f(tape);
        tape.backward(loss);
        const auto g = x.grad();
        analytic.assign(g.begin(), g.end());
    }
    x.zero_grad();
    x.set_requires_grad(had_grad_flag);

    auto eval = [&] {
        Tape tape(false);
        return static_cast<double>(f(tape).item());
    };

    double worst = 0.0;
    auto values = x.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const T saved = values[i];
        values[i] = static_cast<T>(saved + eps);
        const double up = eval();
        values[i] = static_cast<T>(saved - eps);
        const double down = eval();
        values[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = static_cast<double>(analytic[i]);
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, err);
    }
    return worst;
}

template double grad_check<float>(const ScalarFn<float>&, BasicTensor<float>, double);
template double grad_check<double>(const ScalarFn<double>&, BasicTensor<double>, double);

} // namespace selfroute
