#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "symseg/graph.hpp"
#include "symseg/rng.hpp"
#include "symseg/tensor.hpp"

namespace testutil {

inline symseg::Tensor random_tensor(symseg::Shape shape, symseg::Rng& rng, float lo = -1.0f,
                                    float hi = 1.0f) {
    symseg::Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

inline symseg::Tensor random_binary(symseg::Shape shape, symseg::Rng& rng, double p = 0.5) {
    symseg::Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform() < p ? 1.0f : 0.0f;
    return t;
}

/// Max relative error between autograd gradients and central finite
/// differences of a scalar-valued graph builder. Float forward, so expect
/// ~1e-3..1e-2 agreement on O(1) values.
inline double fd_check(
    const std::function<symseg::ag::Var(const std::vector<symseg::ag::Var>&)>& build,
    std::vector<symseg::Tensor> inputs, float h = 1e-2f) {
    using namespace symseg;
    std::vector<ag::Var> params;
    for (auto& t : inputs) params.push_back(ag::parameter(t));
    ag::Var loss = build(params);
    ag::backward(loss);

    double worst = 0.0;
    for (size_t k = 0; k < params.size(); ++k) {
        for (int64_t i = 0; i < inputs[k].numel(); ++i) {
            auto eval = [&](float delta) {
                std::vector<ag::Var> probe;
                for (size_t q = 0; q < inputs.size(); ++q) {
                    Tensor t = inputs[q];
                    if (q == k) t[i] += delta;
                    probe.push_back(ag::constant(std::move(t)));
                }
                ag::NoGradGuard ng;
                return static_cast<double>(build(probe)->value[0]);
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * double(h));
            const double an = params[k]->grad.empty() ? 0.0 : double(params[k]->grad[i]);
            const double scale = std::max({std::abs(fd), std::abs(an), 1e-2});
            worst = std::max(worst, std::abs(fd - an) / scale);
        }
    }
    return worst;
}

inline std::string temp_dir(const std::string& tag) {
    auto path = std::filesystem::temp_directory_path() / ("symseg_test_" + tag);
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
    return path.string();
}

}  // namespace testutil
