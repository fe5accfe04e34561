#include "latentlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace latentlab {

std::vector<double> information_gain_sequence(const Matrix2D &latents, int use_svd_threshold) {
    if (latents.rows < 2)
        throw std::invalid_argument("information_gain_sequence: need at least 2 rows");
    int T = latents.rows, d = latents.cols;
    std::vector<double> ig(T - 1);
    for (int t = 1; t < T; t++) {
        Matrix2D E(t, d);
        std::copy(latents.data.begin(), latents.data.begin() + static_cast<size_t>(t) * d,
                  E.data.begin());
        std::vector<double> e(latents.row_ptr(t), latents.row_ptr(t) + d);
        if (t <= use_svd_threshold)
            ig[t - 1] = projection_residual(E, e);
        else
            ig[t - 1] = truncated_svd_project(E, e, std::min(t, 256));
    }
    return ig;
}

double quantile_type7(std::vector<double> values, double p) {
    if (values.empty()) throw std::invalid_argument("quantile of empty sample");
    std::sort(values.begin(), values.end());
    double h = (values.size() - 1) * p;
    size_t lo = static_cast<size_t>(std::floor(h));
    size_t hi = std::min(lo + 1, values.size() - 1);
    double frac = h - lo;
    return values[lo] + frac * (values[hi] - values[lo]);
}

IGCurve ig_curve(const std::vector<Matrix2D> &ig_sequences, int max_pos) {
    if (ig_sequences.empty()) throw std::invalid_argument("ig_curve: no sequences");
    std::vector<std::vector<double>> igs;
    int longest = 0;
    for (const Matrix2D &m : ig_sequences) {
        igs.push_back(information_gain_sequence(m));
        longest = std::max(longest, static_cast<int>(igs.back().size()));
    }
    IGCurve c;
    c.n_sequences = static_cast<int>(igs.size());
    int cap = std::min(max_pos, longest);
    for (int t = 1; t <= cap; t++) {
        std::vector<double> vals;
        for (const auto &s : igs)
            if (static_cast<int>(s.size()) >= t) vals.push_back(s[t - 1]);
        if (vals.empty()) break;
        c.positions.push_back(t);
        c.median.push_back(quantile_type7(vals, 0.5));
        c.q25.push_back(quantile_type7(vals, 0.25));
        c.q75.push_back(quantile_type7(vals, 0.75));
    }
    return c;
}

Matrix2D ar_baseline_latents(const ModelState &state, const GridSample &sample, int T,
                             const ArBaselineParams &params, SeededRng rng) {
    if (T < 1) throw std::invalid_argument("ar_baseline_latents: T must be >= 1");
    Matrix2D Xv = project_vis(state, encode_image(state, sample.input_features));
    int d = Xv.cols;
    Matrix2D E(T, d);
    std::vector<double> e1(d, 0.0);
    for (int i = 0; i < Xv.rows; i++)
        for (int j = 0; j < d; j++) e1[j] += Xv.at(i, j) / Xv.rows;
    double n1 = 0.0;
    for (double v : e1) n1 += v * v;
    n1 = std::sqrt(n1);
    std::copy(e1.begin(), e1.end(), E.row_ptr(0));

    double beta0 = params.beta0_frac * n1;
    std::vector<std::vector<double>> basis;  // orthonormal span of emitted rows
    auto add_to_basis = [&](const double *row) {
        std::vector<double> v(row, row + d);
        for (const auto &b : basis) {
            double s = 0.0;
            for (int j = 0; j < d; j++) s += b[j] * v[j];
            for (int j = 0; j < d; j++) v[j] -= s * b[j];
        }
        double nv = 0.0;
        for (double x : v) nv += x * x;
        nv = std::sqrt(nv);
        if (nv > 1e-12) {
            for (double &x : v) x /= nv;
            basis.push_back(std::move(v));
        }
    };
    add_to_basis(E.row_ptr(0));

    for (int t = 1; t < T; t++) {
        std::vector<double> u(d);
        for (double &x : u) x = rng.normal();
        for (const auto &b : basis) {
            double s = 0.0;
            for (int j = 0; j < d; j++) s += b[j] * u[j];
            for (int j = 0; j < d; j++) u[j] -= s * b[j];
        }
        double nu = 0.0;
        for (double x : u) nu += x * x;
        nu = std::sqrt(nu);
        if (nu > 1e-10) {
            for (double &x : u) x /= nu;
        } else {
            std::fill(u.begin(), u.end(), 0.0);  // span exhausted
        }
        double c = beta0 * std::pow(params.rho, t - 1);
        double *prev = E.row_ptr(t - 1);
        double *cur = E.row_ptr(t);
        for (int j = 0; j < d; j++) cur[j] = params.contraction * prev[j] + c * u[j];
        add_to_basis(cur);
    }
    return E;
}

int ratio_for_target_length(int n_vis_tokens, int target_len) {
    if (target_len < 1) target_len = 1;
    int best_ratio = 1, best_diff = 1 << 30;
    for (int r = 1; r <= n_vis_tokens; r++) {
        int len = pooled_len(n_vis_tokens, r);
        int diff = std::abs(len - target_len);
        if (diff < best_diff) {
            best_diff = diff;
            best_ratio = r;
        }
    }
    return best_ratio;
}

SweepResult latent_length_sweep(const ModelState &state, const std::vector<GridSample> &samples,
                                const std::vector<int> &lengths, const InferenceConfig &base_cfg,
                                uint64_t seed, int n_threads) {
    if (samples.empty()) throw std::invalid_argument("latent_length_sweep: empty eval set");
    SweepResult out;
    out.n_samples = static_cast<int>(samples.size());
    for (int target : lengths) {
        int ratio = ratio_for_target_length(state.cfg.n_vis_tokens, target);
        InferenceConfig cfg = base_cfg;
        cfg.pooling_ratio = ratio;
        cfg.aux_mode = AuxMode::Normal;
        EvalSummary normal = evaluate_accuracy(state, samples, cfg, seed, n_threads);
        cfg.aux_mode = AuxMode::Placeholder;
        EvalSummary padded = evaluate_accuracy(state, samples, cfg, seed, n_threads);
        out.latent_lengths.push_back(pooled_len(state.cfg.n_vis_tokens, ratio));
        out.pooling_ratios.push_back(ratio);
        out.accuracy_normal.push_back(normal.accuracy);
        out.accuracy_padded.push_back(padded.accuracy);
    }
    return out;
}

std::vector<double> padding_gap(const SweepResult &sweep) {
    std::vector<double> gap(sweep.accuracy_normal.size());
    for (size_t i = 0; i < gap.size(); i++)
        gap[i] = sweep.accuracy_normal[i] - sweep.accuracy_padded[i];
    return gap;
}

void write_ig_csv(const IGCurve &curve, const std::string &path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "position,median,q25,q75\n";
    f.precision(17);
    for (size_t i = 0; i < curve.positions.size(); i++)
        f << curve.positions[i] << ',' << curve.median[i] << ',' << curve.q25[i] << ','
          << curve.q75[i] << "\n";
}

void write_sweep_csv(const SweepResult &sweep, const std::string &path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "length,acc_normal,acc_padded\n";
    f.precision(17);
    for (size_t i = 0; i < sweep.latent_lengths.size(); i++)
        f << sweep.latent_lengths[i] << ',' << sweep.accuracy_normal[i] << ','
          << sweep.accuracy_padded[i] << "\n";
}

}  // namespace latentlab
