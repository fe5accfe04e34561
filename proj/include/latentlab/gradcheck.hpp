#pragma once

#include <functional>
#include <string>

#include "latentlab/model.hpp"
#include "latentlab/rng.hpp"

namespace latentlab {

struct FdReport {
    double max_rel_err = 0.0;
    int n_checked = 0;
    std::string worst_tensor;
    int worst_row = 0, worst_col = 0;
    double worst_analytic = 0.0, worst_fd = 0.0;
};

// Central-difference check of the gradients already accumulated in `state`
// against loss_fn (a pure function of the state's parameter values). Samples
// n_probes coordinates uniformly over the trainable tensors; relative error
// is |fd - grad| / max(|fd|, |grad|, 1e-6).
FdReport finite_diff_check(const std::function<double()> &loss_fn, ModelState &state,
                           int n_probes, double h, SeededRng rng);

}  // namespace latentlab
