#pragma once

#include <cstdint>
#include <string>

#include "latentlab/matrix.hpp"
#include "latentlab/rng.hpp"

namespace latentlab {

// Value plus gradient plus AdamW moments. Frozen tensors keep a zero grad:
// the backward pass checks `trainable` before accumulating.
struct ParamTensor {
    std::string name;
    Matrix2D value;
    Matrix2D grad;
    Matrix2D m;  // first moment
    Matrix2D v;  // second moment
    bool trainable = true;
    int64_t steps = 0;

    ParamTensor() = default;
    ParamTensor(std::string n, int rows, int cols)
        : name(std::move(n)), value(rows, cols), grad(rows, cols), m(rows, cols), v(rows, cols) {}

    void init_normal(SeededRng &rng, double std_dev) {
        for (double &x : value.data) x = rng.normal(0.0, std_dev);
    }
    void init_const(double c) { std::fill(value.data.begin(), value.data.end(), c); }
    void zero_grad() { grad.set_zero(); }
    // accumulate respecting the frozen flag
    void acc_grad(const Matrix2D &g) {
        if (trainable) add_inplace(grad, g);
    }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

void adamw_step(ParamTensor &p, const AdamConfig &cfg);

}  // namespace latentlab
