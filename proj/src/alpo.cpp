#include "latentlab/alpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "latentlab/threadpool.hpp"
#include "latentlab/tokens.hpp"

namespace latentlab {

void AlpoConfig::validate() const {
    if (group_size < 2) throw std::invalid_argument("AlpoConfig: group_size must be >= 2");
    if (clip_eps <= 0.0) throw std::invalid_argument("AlpoConfig: clip_eps must be > 0");
    if (temperature <= 0.0)
        throw std::invalid_argument("AlpoConfig: rollouts need temperature > 0");
    if (prompts_per_step < 1) throw std::invalid_argument("AlpoConfig: prompts_per_step < 1");
}

InferenceConfig AlpoConfig::rollout_inference_config() const {
    InferenceConfig ic;
    ic.max_phase1_tokens = max_response_len;
    ic.max_phase2_tokens = max_response_len;
    ic.temperature = temperature;
    ic.pooling_ratio = 1;
    ic.aux_mode = AuxMode::Normal;
    ic.max_triggers = max_triggers;
    return ic;
}

RewardBreakdown compute_reward(const RolloutRecord &record, const GridSample &sample,
                               const AlpoConfig &cfg) {
    RewardBreakdown r;
    std::vector<int> all = record.phase1_tokens;
    all.insert(all.end(), record.phase2_tokens.begin(), record.phase2_tokens.end());
    int trigger_count = 0;
    bool has_delim = false;
    for (int t : all) {
        if (t == tok::TRIGGER) trigger_count++;
        if (t == tok::DELIM) has_delim = true;
    }
    bool fmt_ok = has_delim && trigger_count <= cfg.max_triggers && !record.truncated;
    r.r_fmt = fmt_ok ? 1.0 : 0.0;
    r.r_aux = (fmt_ok && trigger_count >= 1) ? 1.0 : 0.0;
    std::vector<int> answer = extract_answer(all);
    r.r_acc =
        answer == std::vector<int>{tok::glyph_token(sample.answer_glyph())} ? 1.0 : 0.0;
    return r;
}

std::vector<RolloutRecord> rollout_group(const ModelState &state, const GridSample &sample,
                                         const AlpoConfig &cfg, SeededRng rng) {
    cfg.validate();
    std::vector<RolloutRecord> out(cfg.group_size);
    for (int g = 0; g < cfg.group_size; g++) {
        InferenceResult res = run_inference(state, sample, cfg.rollout_inference_config(),
                                            rng.derive("g", g));
        RolloutRecord rec;
        rec.sample_id = sample.id;
        rec.phase1_tokens = res.phase1_tokens;
        rec.phase2_tokens = res.phase2_tokens;
        rec.old_logprobs = res.gen_logprobs;
        rec.truncated = res.truncated;
        rec.n_triggers = res.n_triggers;
        if (res.triggered && res.e_aux.rows > 0) {
            rec.has_aux = true;
            rec.e_aux = res.e_aux;
        }
        rec.reward = compute_reward(rec, sample, cfg);
        rec.total_reward = rec.reward.total(cfg);
        out[g] = std::move(rec);
    }
    return out;
}

std::vector<double> group_advantages(const std::vector<double> &rewards, double adv_eps) {
    if (rewards.size() < 2)
        throw std::invalid_argument("group_advantages: need at least 2 rewards");
    double n = static_cast<double>(rewards.size());
    double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    double sd = std::sqrt(var / n);
    std::vector<double> adv(rewards.size());
    for (size_t i = 0; i < rewards.size(); i++) adv[i] = (rewards[i] - mean) / (sd + adv_eps);
    return adv;
}

double clipped_token_objective(double ratio, double advantage, double eps) {
    double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
    return std::min(ratio * advantage, clipped * advantage);
}

// ---- replay ----

namespace {

struct Replay {
    SeqInput seq;
    std::vector<int> gen_tokens;  // o1 then o2
    std::vector<int> pred_rows;
};

Replay build_replay(const ModelState &state, const RolloutRecord &rec,
                    const GridSample &sample) {
    if (static_cast<int>(rec.old_logprobs.size()) != rec.n_tokens())
        throw std::invalid_argument("alpo replay: logprob count does not match tokens");
    Replay rp;
    rp.seq.vis_features = encode_image(state, sample.input_features);
    std::vector<int> head = sample.question;
    head.insert(head.end(), rec.phase1_tokens.begin(), rec.phase1_tokens.end());
    rp.seq.pieces.push_back(Piece::make_tokens(head));
    int prefix = state.cfg.n_vis_tokens + static_cast<int>(sample.question.size());
    int n1 = static_cast<int>(rec.phase1_tokens.size());
    for (int k = 0; k < n1; k++) rp.pred_rows.push_back(prefix + k - 1);
    int row = prefix + n1;
    if (rec.has_aux) {
        if (rec.e_aux.cols != state.cfg.d_model)
            throw std::invalid_argument("alpo replay: cached block has wrong width");
        rp.seq.pieces.push_back(Piece::make_dense(rec.e_aux));
        row += rec.e_aux.rows;
    }
    if (!rec.phase2_tokens.empty()) {
        rp.seq.pieces.push_back(Piece::make_tokens(rec.phase2_tokens));
        for (size_t k = 0; k < rec.phase2_tokens.size(); k++)
            rp.pred_rows.push_back(row + static_cast<int>(k) - 1);
    }
    rp.gen_tokens = rec.phase1_tokens;
    rp.gen_tokens.insert(rp.gen_tokens.end(), rec.phase2_tokens.begin(),
                         rec.phase2_tokens.end());
    return rp;
}

struct TokenStats {
    double obj_sum = 0.0, kl_sum = 0.0;
    int n_tokens = 0, n_clipped = 0;
};

}  // namespace

double alpo_loss(const ModelState &state, const ModelState &ref_state,
                 const std::vector<RolloutRecord> &records,
                 const std::vector<const GridSample *> &samples, const AlpoConfig &cfg) {
    if (records.size() != samples.size())
        throw std::invalid_argument("alpo_loss: records/samples length mismatch");
    double obj_sum = 0.0, kl_sum = 0.0;
    int n_tokens = 0;
    for (size_t i = 0; i < records.size(); i++) {
        const RolloutRecord &rec = records[i];
        if (rec.n_tokens() == 0) continue;
        Replay rp = build_replay(state, rec, *samples[i]);
        ForwardTrace tr = forward(state, rp.seq);
        ForwardTrace tref = forward(ref_state, rp.seq);
        for (size_t t = 0; t < rp.gen_tokens.size(); t++) {
            int y = rp.gen_tokens[t];
            double new_lp = token_logprob(tr.logits.row_ptr(rp.pred_rows[t]),
                                          state.cfg.vocab_size, cfg.temperature, y);
            double ref_lp = token_logprob(tref.logits.row_ptr(rp.pred_rows[t]),
                                          state.cfg.vocab_size, cfg.temperature, y);
            double ratio = std::exp(new_lp - rec.old_logprobs[t]);
            obj_sum += clipped_token_objective(ratio, rec.advantage, cfg.clip_eps);
            double rr = std::exp(ref_lp - new_lp);
            kl_sum += rr - std::log(rr) - 1.0;
            n_tokens++;
        }
    }
    if (n_tokens == 0) return 0.0;
    return -obj_sum / n_tokens + cfg.kl_coef * kl_sum / n_tokens;
}

AlpoStepMetrics alpo_step(ModelState &state, const ModelState &ref_state,
                          std::vector<RolloutRecord> &records,
                          const std::vector<const GridSample *> &samples,
                          const AlpoConfig &cfg) {
    cfg.validate();
    if (records.size() != samples.size())
        throw std::invalid_argument("alpo_step: records/samples length mismatch");
    state.set_trainable_all(false);
    state.set_trainable(state.llm_tensors(), true);
    state.zero_grads();

    int total_tokens = 0;
    for (const auto &rec : records) total_tokens += rec.n_tokens();
    AlpoStepMetrics m;
    int n_rec = 0;
    for (size_t i = 0; i < records.size(); i++) {
        const RolloutRecord &rec = records[i];
        n_rec++;
        m.mean_reward += rec.total_reward;
        m.mean_r_acc += rec.reward.r_acc;
        m.trigger_rate += rec.n_triggers > 0 ? 1.0 : 0.0;
        if (rec.n_tokens() == 0 || total_tokens == 0) continue;
        Replay rp = build_replay(state, rec, *samples[i]);
        ForwardTrace tr = forward(state, rp.seq);
        ForwardTrace tref = forward(ref_state, rp.seq);
        Matrix2D d_logits(tr.logits.rows, tr.logits.cols);
        double T = cfg.temperature;
        int V = state.cfg.vocab_size;
        std::vector<double> p(V);
        for (size_t t = 0; t < rp.gen_tokens.size(); t++) {
            int y = rp.gen_tokens[t];
            int row = rp.pred_rows[t];
            const double *lr = tr.logits.row_ptr(row);
            double new_lp = token_logprob(lr, V, T, y);
            double ref_lp = token_logprob(tref.logits.row_ptr(row), V, T, y);
            double ratio = std::exp(new_lp - rec.old_logprobs[t]);
            double unclipped = ratio * rec.advantage;
            double obj = clipped_token_objective(ratio, rec.advantage, cfg.clip_eps);
            bool clip_active = obj < unclipped;
            if (clip_active) m.clip_frac += 1.0;
            double rr = std::exp(ref_lp - new_lp);
            m.mean_kl += rr - std::log(rr) - 1.0;
            m.policy_loss += -obj;
            // dLoss/dnew_lp, with Loss the token-mean surrogate
            double d_lp = 0.0;
            if (!clip_active) d_lp -= unclipped;          // d(-obj)/dnew_lp
            d_lp += cfg.kl_coef * (1.0 - rr);             // d(k3)/dnew_lp
            d_lp /= total_tokens;
            // dnew_lp/dlogit_j = (delta_jy - softmax(l/T)_j) / T
            double mx = lr[0];
            for (int j = 1; j < V; j++) mx = std::max(mx, lr[j]);
            double z = 0.0;
            for (int j = 0; j < V; j++) {
                p[j] = std::exp((lr[j] - mx) / T);
                z += p[j];
            }
            double *dr = d_logits.row_ptr(row);
            for (int j = 0; j < V; j++) dr[j] += d_lp * (-p[j] / z) / T;
            dr[y] += d_lp / T;
        }
        Matrix2D dx0 = backward(state, tr, &d_logits, nullptr);
        route_input_grads(state, tr, dx0);  // cached blocks get no gradient
    }
    if (n_rec > 0) {
        m.mean_reward /= n_rec;
        m.mean_r_acc /= n_rec;
        m.trigger_rate /= n_rec;
    }
    if (total_tokens > 0) {
        m.mean_kl /= total_tokens;
        m.clip_frac /= total_tokens;
        m.policy_loss /= total_tokens;
    }

    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.beta1 = cfg.beta1;
    ac.beta2 = cfg.beta2;
    ac.eps = cfg.adam_eps;
    ac.weight_decay = cfg.weight_decay;
    for (ParamTensor *pt : state.all_tensors()) adamw_step(*pt, ac);
    return m;
}

// ---- driver ----

void write_alpo_metrics_csv(const std::vector<AlpoStepMetrics> &metrics,
                            const std::string &path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open metrics file " + path);
    f << "step,mean_reward,mean_r_acc,trigger_rate,mean_kl,clip_frac,policy_loss\n";
    f.precision(17);
    for (const AlpoStepMetrics &m : metrics)
        f << m.step << ',' << m.mean_reward << ',' << m.mean_r_acc << ',' << m.trigger_rate
          << ',' << m.mean_kl << ',' << m.clip_frac << ',' << m.policy_loss << "\n";
}

static void dump_rollouts(std::ofstream &f, int step,
                          const std::vector<RolloutRecord> &records) {
    using nlohmann::json;
    for (const RolloutRecord &rec : records) {
        json j{{"step", step},
               {"sample_id", rec.sample_id},
               {"phase1", rec.phase1_tokens},
               {"phase2", rec.phase2_tokens},
               {"old_logprobs", rec.old_logprobs},
               {"truncated", rec.truncated},
               {"n_triggers", rec.n_triggers},
               {"r_acc", rec.reward.r_acc},
               {"r_fmt", rec.reward.r_fmt},
               {"r_aux", rec.reward.r_aux},
               {"total_reward", rec.total_reward},
               {"advantage", rec.advantage}};
        json eaux = json::array();
        if (rec.has_aux)
            for (int i = 0; i < rec.e_aux.rows; i++) {
                json row = json::array();
                for (int c = 0; c < rec.e_aux.cols; c++) row.push_back(rec.e_aux.at(i, c));
                eaux.push_back(std::move(row));
            }
        j["e_aux"] = std::move(eaux);
        f << j.dump() << "\n";
    }
}

std::vector<AlpoStepMetrics> run_alpo(ModelState &state, const Dataset &data,
                                      const AlpoConfig &cfg, int n_steps, uint64_t seed,
                                      const std::string &metrics_path, int n_threads,
                                      const std::string &rollout_dump_path) {
    cfg.validate();
    if (data.samples.empty()) throw std::invalid_argument("run_alpo: empty dataset");
    ModelState ref_state = state;  // frozen pre-RL reference

    std::vector<int> hard_idx, easy_idx;
    for (int i = 0; i < static_cast<int>(data.samples.size()); i++)
        (data.samples[i].aux_needed ? hard_idx : easy_idx).push_back(i);

    SeededRng root(seed);
    auto shuffled = [&](std::vector<int> v, const char *label) {
        SeededRng sh = root.derive(label);
        for (int i = static_cast<int>(v.size()) - 1; i > 0; i--)
            std::swap(v[i], v[sh.uniform_int(i + 1)]);
        return v;
    };
    std::vector<int> hard = shuffled(hard_idx, "hard"), easy = shuffled(easy_idx, "easy");
    size_t hc = 0, ec = 0;
    double hard_frac = hard.empty() ? 0.0
                                    : static_cast<double>(hard.size()) /
                                          (hard.size() + easy.size());
    int hard_per_step =
        easy.empty() ? cfg.prompts_per_step
                     : std::clamp(static_cast<int>(std::lround(hard_frac * cfg.prompts_per_step)),
                                  hard.empty() ? 0 : 1,
                                  cfg.prompts_per_step - (easy.empty() ? 0 : 1));

    std::ofstream dump;
    if (!rollout_dump_path.empty()) {
        dump.open(rollout_dump_path, std::ios::trunc);
        if (!dump) throw std::runtime_error("cannot open rollout dump " + rollout_dump_path);
        dump.precision(17);
    }

    std::vector<AlpoStepMetrics> log;
    for (int step = 0; step < n_steps; step++) {
        std::vector<int> batch_idx;
        for (int b = 0; b < cfg.prompts_per_step; b++) {
            bool take_hard = b < hard_per_step;
            if (hard.empty()) take_hard = false;
            if (easy.empty()) take_hard = true;
            if (take_hard) {
                batch_idx.push_back(hard[hc++ % hard.size()]);
            } else {
                batch_idx.push_back(easy[ec++ % easy.size()]);
            }
        }
        int P = static_cast<int>(batch_idx.size());
        std::vector<std::vector<RolloutRecord>> groups(P);
        SeededRng step_rng = root.derive("step", step);
        parallel_for(P, n_threads, [&](int pi) {
            groups[pi] = rollout_group(state, data.samples[batch_idx[pi]], cfg,
                                       step_rng.derive("prompt", pi));
        });
        std::vector<RolloutRecord> records;
        std::vector<const GridSample *> samples;
        for (int pi = 0; pi < P; pi++) {
            std::vector<double> rewards;
            for (const auto &rec : groups[pi]) rewards.push_back(rec.total_reward);
            std::vector<double> adv = group_advantages(rewards, cfg.adv_eps);
            for (size_t g = 0; g < groups[pi].size(); g++) {
                groups[pi][g].advantage = adv[g];
                records.push_back(std::move(groups[pi][g]));
                samples.push_back(&data.samples[batch_idx[pi]]);
            }
        }
        if (dump.is_open()) dump_rollouts(dump, step, records);
        AlpoStepMetrics m = alpo_step(state, ref_state, records, samples, cfg);
        m.step = step;
        log.push_back(m);
    }
    if (!metrics_path.empty()) write_alpo_metrics_csv(log, metrics_path);
    return log;
}

}  // namespace latentlab
