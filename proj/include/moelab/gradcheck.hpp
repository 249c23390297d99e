#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
};

// Compares the analytic gradient of a scalar-valued function against central
// finite differences, per parameter tensor. `make_loss` must rebuild the graph
// from the given parameter tensors on every call.
GradCheckReport grad_check(const std::function<Tensor()>& make_loss,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double step = 1e-5);

}  // namespace moelab
