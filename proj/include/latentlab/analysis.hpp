#pragma once

#include <string>
#include <vector>

#include "latentlab/inference.hpp"
#include "latentlab/model.hpp"
#include "latentlab/projection.hpp"
#include "latentlab/synthdata.hpp"

namespace latentlab {

// Diagnostics: per-position information gain of latent token sequences, an
// autoregressive-chain baseline for contrast, latent-length scaling sweeps,
// and the padding gap.
struct IGCurve {
    std::vector<int> positions;
    std::vector<double> median, q25, q75;
    int n_sequences = 0;
};

struct SweepResult {
    std::vector<int> latent_lengths;   // achieved (pooled) lengths
    std::vector<int> pooling_ratios;
    std::vector<double> accuracy_normal;
    std::vector<double> accuracy_padded;
    int n_samples = 0;
};

// IG_t for t = 1..T-1: norm of the part of row t+1 orthogonal to the span of
// rows 1..t. Positions with t <= use_svd_threshold use the exact residual;
// larger ones the truncated-SVD path with k = min(t, 256).
std::vector<double> information_gain_sequence(const Matrix2D &latents,
                                              int use_svd_threshold = 500);

// Interpolating (type-7) quantile of a sample; p in [0,1].
double quantile_type7(std::vector<double> values, double p);

// Per-position median and quartiles over all sequences long enough to reach
// that position; positions run 1..max_pos (clipped to the data).
IGCurve ig_curve(const std::vector<Matrix2D> &ig_sequences, int max_pos);

// Chain-propagated baseline: token t+1 is a contraction of token t plus a
// geometrically shrinking innovation orthogonal to everything before it, so
// its information gain decays by construction. Rows live in model width,
// seeded from the mean projected visual embedding of the sample.
struct ArBaselineParams {
    double contraction = 0.7;   // spectral norm of the propagation map
    double rho = 0.93;          // innovation decay per step
    double beta0_frac = 0.5;    // first innovation size, relative to |e_1|
};

Matrix2D ar_baseline_latents(const ModelState &state, const GridSample &sample, int T,
                             const ArBaselineParams &params, SeededRng rng);

// Runs the eval set under normal and placeholder modes at each target latent
// length; lengths are mapped to the nearest achievable pooled length.
SweepResult latent_length_sweep(const ModelState &state, const std::vector<GridSample> &samples,
                                const std::vector<int> &lengths, const InferenceConfig &base_cfg,
                                uint64_t seed, int n_threads);

int ratio_for_target_length(int n_vis_tokens, int target_len);

std::vector<double> padding_gap(const SweepResult &sweep);

void write_ig_csv(const IGCurve &curve, const std::string &path);
void write_sweep_csv(const SweepResult &sweep, const std::string &path);

}  // namespace latentlab
