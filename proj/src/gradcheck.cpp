#include "latentlab/gradcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace latentlab {

FdReport finite_diff_check(const std::function<double()> &loss_fn, ModelState &state,
                           int n_probes, double h, SeededRng rng) {
    std::vector<ParamTensor *> trainable;
    for (ParamTensor *p : state.all_tensors())
        if (p->trainable && p->value.numel() > 0) trainable.push_back(p);
    if (trainable.empty())
        throw std::invalid_argument("finite_diff_check: no trainable tensors");
    FdReport rep;
    for (int probe = 0; probe < n_probes; probe++) {
        ParamTensor *p = trainable[rng.uniform_int(static_cast<int>(trainable.size()))];
        int idx = rng.uniform_int(static_cast<int>(p->value.data.size()));
        double saved = p->value.data[idx];
        p->value.data[idx] = saved + h;
        double lp = loss_fn();
        p->value.data[idx] = saved - h;
        double lm = loss_fn();
        p->value.data[idx] = saved;
        double fd = (lp - lm) / (2.0 * h);
        double an = p->grad.data[idx];
        double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-6});
        rep.n_checked++;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_tensor = p->name;
            rep.worst_row = idx / p->value.cols;
            rep.worst_col = idx % p->value.cols;
            rep.worst_analytic = an;
            rep.worst_fd = fd;
        }
    }
    return rep;
}

}  // namespace latentlab
