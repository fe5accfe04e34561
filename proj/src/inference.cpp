#include "latentlab/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "latentlab/threadpool.hpp"
#include "latentlab/tokens.hpp"

namespace latentlab {

std::string aux_mode_name(AuxMode m) {
    switch (m) {
        case AuxMode::Normal: return "normal";
        case AuxMode::Disabled: return "disabled";
        case AuxMode::Placeholder: return "placeholder";
        case AuxMode::RawVisual: return "raw";
    }
    return "normal";
}

AuxMode aux_mode_from_name(const std::string &s) {
    if (s == "normal") return AuxMode::Normal;
    if (s == "disabled") return AuxMode::Disabled;
    if (s == "placeholder") return AuxMode::Placeholder;
    if (s == "raw" || s == "raw_visual") return AuxMode::RawVisual;
    throw std::invalid_argument("unknown aux mode '" + s + "'");
}

void InferenceConfig::validate() const {
    if (max_phase1_tokens < 1 || max_phase2_tokens < 0)
        throw std::invalid_argument("InferenceConfig: bad token budgets");
    if (temperature < 0.0) throw std::invalid_argument("InferenceConfig: temperature < 0");
    if (pooling_ratio < 1) throw std::invalid_argument("InferenceConfig: pooling_ratio < 1");
    if (max_triggers < 0) throw std::invalid_argument("InferenceConfig: max_triggers < 0");
}

double token_logprob(const double *logits, int vocab, double temperature, int id) {
    double T = temperature > 0.0 ? temperature : 1.0;
    double mx = logits[0];
    for (int i = 1; i < vocab; i++) mx = std::max(mx, logits[i]);
    double z = 0.0;
    for (int i = 0; i < vocab; i++) z += std::exp((logits[i] - mx) / T);
    return (logits[id] - mx) / T - std::log(z);
}

int sample_token(const double *logits, int vocab, double temperature, SeededRng &rng,
                 double *logprob) {
    int chosen = 0;
    if (temperature <= 0.0) {
        for (int i = 1; i < vocab; i++)
            if (logits[i] > logits[chosen]) chosen = i;
    } else {
        double mx = logits[0];
        for (int i = 1; i < vocab; i++) mx = std::max(mx, logits[i]);
        std::vector<double> p(vocab);
        double z = 0.0;
        for (int i = 0; i < vocab; i++) {
            p[i] = std::exp((logits[i] - mx) / temperature);
            z += p[i];
        }
        double u = rng.uniform() * z, acc = 0.0;
        chosen = vocab - 1;
        for (int i = 0; i < vocab; i++) {
            acc += p[i];
            if (u < acc) {
                chosen = i;
                break;
            }
        }
    }
    if (logprob) *logprob = token_logprob(logits, vocab, temperature, chosen);
    return chosen;
}

std::vector<int> extract_answer(const std::vector<int> &generated) {
    // the answer is the glyph named between the delimiter and EOS; the cell
    // restatement around it is scaffolding and ignored
    std::vector<int> out;
    size_t i = 0;
    while (i < generated.size() && generated[i] != tok::DELIM) i++;
    for (i = i + 1; i < generated.size() && generated[i] != tok::EOS; i++)
        if (generated[i] >= tok::GLYPH0 && generated[i] < tok::GLYPH0 + tok::GLYPH_SLOTS)
            out.push_back(generated[i]);
    return out;
}

static const double *last_logits(const ForwardTrace &tr) {
    return tr.logits.row_ptr(tr.seq_len - 1);
}

Phase1Result generate_phase1(const ModelState &state, const GridSample &sample,
                             const InferenceConfig &cfg, SeededRng &rng,
                             std::vector<double> *logprobs) {
    cfg.validate();
    Phase1Result out;
    SeqInput seq;
    seq.vis_features = encode_image(state, sample.input_features);
    seq.pieces.push_back(Piece::make_tokens(sample.question));
    seq.pieces.push_back(Piece::make_tokens({}));
    Piece &gen = seq.pieces.back();

    while (static_cast<int>(out.tokens.size()) < cfg.max_phase1_tokens) {
        ForwardTrace tr = forward(state, seq);
        double lp = 0.0;
        int t = sample_token(last_logits(tr), state.cfg.vocab_size, cfg.temperature, rng, &lp);
        out.tokens.push_back(t);
        gen.tokens.push_back(t);
        if (logprobs) logprobs->push_back(lp);
        if (t == tok::TRIGGER) {
            out.triggered = true;
            ForwardTrace tap = forward(state, seq, state.cfg.hidden_layer());
            out.hidden = std::move(tap.hidden_at_l);
            return out;
        }
        if (t == tok::EOS) return out;
    }
    out.truncated = true;
    return out;
}

AuxBlocks build_auxiliary(const ModelState &state, const Matrix2D &hidden, const Matrix2D &V,
                          const InferenceConfig &cfg) {
    AuxBlocks out;
    if (cfg.aux_mode == AuxMode::Disabled) return out;
    if (hidden.rows == 0 && cfg.aux_mode == AuxMode::Normal)
        throw std::invalid_argument("build_auxiliary: no hidden states (trigger never fired?)");
    switch (cfg.aux_mode) {
        case AuxMode::Normal:
            out.a0 = detransform(state, hidden, state.cfg.n_vis_tokens).first;
            break;
        case AuxMode::Placeholder:
            out.a0 = Matrix2D(state.cfg.n_vis_tokens, state.cfg.d_vis);
            std::fill(out.a0.data.begin(), out.a0.data.end(), cfg.placeholder_value);
            break;
        case AuxMode::RawVisual:
            out.a0 = V;
            break;
        case AuxMode::Disabled:
            return out;
    }
    Matrix2D fused_full = fuse_gated(V, out.a0, state.cfg.alpha);
    out.fused = mean_pool_rows(fused_full, cfg.pooling_ratio);
    out.e_aux = project_vis(state, out.fused);
    out.present = true;
    return out;
}

InferenceResult run_inference(const ModelState &state, const GridSample &sample,
                              const InferenceConfig &cfg, SeededRng rng) {
    cfg.validate();
    InferenceResult res;
    SeqInput seq;
    seq.vis_features = encode_image(state, sample.input_features);
    Matrix2D V = seq.vis_features;
    seq.pieces.push_back(Piece::make_tokens(sample.question));
    seq.pieces.push_back(Piece::make_tokens({}));

    int generated = 0;
    int phase2_generated = 0;
    bool in_phase2 = false;
    while (true) {
        if (!in_phase2 && generated >= cfg.max_phase1_tokens) {
            res.truncated = true;
            break;
        }
        if (in_phase2 && phase2_generated >= cfg.max_phase2_tokens) {
            res.truncated = true;
            break;
        }
        ForwardTrace tr = forward(state, seq);
        double lp = 0.0;
        int t = sample_token(last_logits(tr), state.cfg.vocab_size, cfg.temperature, rng, &lp);
        seq.pieces.back().tokens.push_back(t);
        res.gen_logprobs.push_back(lp);
        if (in_phase2) {
            res.phase2_tokens.push_back(t);
            phase2_generated++;
        } else {
            res.phase1_tokens.push_back(t);
            generated++;
        }
        if (t == tok::EOS) break;
        if (t == tok::TRIGGER && res.n_triggers < cfg.max_triggers) {
            res.n_triggers++;
            if (!res.triggered) {
                res.triggered = true;
                in_phase2 = true;
            }
            ForwardTrace tap = forward(state, seq, state.cfg.hidden_layer());
            AuxBlocks aux = build_auxiliary(state, tap.hidden_at_l, V, cfg);
            if (aux.present) {
                if (res.aux_tokens.rows == 0) {
                    res.aux_tokens = aux.fused;
                    res.raw_A0 = aux.a0;
                    res.e_aux = aux.e_aux;
                } else {
                    res.extra_fused.push_back(aux.fused);
                    res.extra_e_aux.push_back(aux.e_aux);
                }
                seq.pieces.push_back(Piece::make_dense(aux.e_aux));
            }
            seq.pieces.push_back(Piece::make_tokens({}));
        }
    }
    res.answer = extract_answer(res.all_tokens());
    return res;
}

bool answer_correct(const InferenceResult &res, const GridSample &sample) {
    return res.answer == std::vector<int>{tok::glyph_token(sample.answer_glyph())};
}

std::vector<Matrix2D> capture_latents(const ModelState &state,
                                      const std::vector<GridSample> &samples,
                                      const InferenceConfig &cfg, uint64_t seed, int n_threads,
                                      int *n_skipped) {
    SeededRng root(seed);
    std::vector<InferenceResult> results(samples.size());
    parallel_for(static_cast<int>(samples.size()), n_threads, [&](int i) {
        results[i] = run_inference(state, samples[i], cfg, root.derive("capture", i));
    });
    std::vector<Matrix2D> out;
    int skipped = 0;
    for (auto &r : results) {
        if (r.triggered && r.aux_tokens.rows > 0)
            out.push_back(std::move(r.aux_tokens));
        else
            skipped++;
    }
    if (n_skipped) *n_skipped = skipped;
    return out;
}

EvalSummary evaluate_accuracy(const ModelState &state, const std::vector<GridSample> &samples,
                              const InferenceConfig &cfg, uint64_t seed, int n_threads) {
    SeededRng root(seed);
    EvalSummary s;
    s.n = static_cast<int>(samples.size());
    std::vector<char> ok(samples.size(), 0), trig(samples.size(), 0);
    parallel_for(s.n, n_threads, [&](int i) {
        InferenceResult r = run_inference(state, samples[i], cfg, root.derive("eval", i));
        ok[i] = answer_correct(r, samples[i]) ? 1 : 0;
        trig[i] = r.triggered ? 1 : 0;
    });
    for (int i = 0; i < s.n; i++) {
        s.accuracy += ok[i];
        s.trigger_rate += trig[i];
    }
    if (s.n > 0) {
        s.accuracy /= s.n;
        s.trigger_rate /= s.n;
    }
    return s;
}

}  // namespace latentlab
