#pragma once

#include <functional>
#include <string>
#include <vector>

#include "crmatch/tensor.hpp"

namespace crmatch {

/// Builds a scalar loss from the given leaves on the given tape.
using LossBuilder =
    std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)>;

/// Central-difference verification of reverse-mode gradients, 64-bit only.
/// Returns max over all leaf entries of |analytic - numeric| /
/// max(1, |numeric|). Numeric derivatives use (f(x+eps) - f(x-eps)) / (2 eps).
double grad_check(const LossBuilder& builder, std::vector<Tensor<double>>& leaves,
                  double eps = 1e-4);

struct GradReport {
    std::string name;
    double max_rel_err = 0.0;
    int rounds = 0;
};

/// Randomized gradient checks for every registered op kind, all six distance
/// metrics, and two representative composite chains. `rounds` independent
/// seeds per entry.
std::vector<GradReport> run_grad_check_suite(uint64_t seed, int rounds);

} // namespace crmatch
