#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mpt/tensor.hpp"

namespace mpt {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Central-difference check of the autodiff gradient. `f` must build a scalar
// loss on the supplied tape from the current values of `inputs`; it is
// re-evaluated with perturbed input data, so it must be deterministic
// (dropout off).
GradCheckReport gradcheck(const std::function<Tensor(Tape&)>& f,
                          const std::vector<std::pair<std::string, Tensor>>& inputs,
                          double h = 1e-5, double tol = 1e-4);

}  // namespace mpt
