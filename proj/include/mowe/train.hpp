#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mowe/model.hpp"

namespace mowe {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
};

template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::int64_t steps() const { return t_; }

    /// Applies one update to every non-frozen parameter. Returns the pre-clip gradient norm.
    double step(const std::vector<Param<T>*>& params) {
        if (m_.empty()) {
            for (const auto* p : params) {
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
        }
        if (m_.size() != params.size()) {
            throw Error("adam: parameter list changed between steps");
        }
        double sq = 0.0;
        for (const auto* p : params) {
            if (p->frozen) {
                continue;
            }
            for (const T g : p->grad) {
                sq += static_cast<double>(g) * static_cast<double>(g);
            }
        }
        const double norm = std::sqrt(sq);
        const double scale = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto* p = params[i];
            if (p->frozen) {
                continue;
            }
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p->size(); ++j) {
                const double g = static_cast<double>(p->grad[j]) * scale;
                m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g * g;
                const double upd = cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
                p->value[j] = static_cast<T>(static_cast<double>(p->value[j]) - upd);
            }
        }
        return norm;
    }

private:
    AdamConfig cfg_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct TrainRecord {
    int step = 0;
    double loss = 0.0;
    std::int64_t dropped = 0;
    double bypass_fraction = 0.0;
};

using BatchFn = std::function<std::vector<Example>(int step)>;

/// Runs `steps` optimizer updates. Throws on a non-finite loss.
template <typename T>
std::vector<TrainRecord> train(Model<T>& model, Adam<T>& opt, const BatchFn& next_batch, int steps,
                               const std::function<void(const TrainRecord&)>& on_step = {}) {
    std::vector<TrainRecord> trace;
    auto params = model.all_params();
    for (int s = 0; s < steps; ++s) {
        const auto batch = next_batch(s);
        const auto st = model.loss_and_grad(batch);
        if (!std::isfinite(st.loss)) {
            throw Error("training diverged: loss is " + std::to_string(st.loss) + " at step " + std::to_string(s));
        }
        opt.step(params);
        TrainRecord r;
        r.step = s;
        r.loss = st.loss;
        r.dropped = st.dropped;
        r.bypass_fraction = st.routed_tokens ? static_cast<double>(st.bypassed) / static_cast<double>(st.routed_tokens) : 0.0;
        trace.push_back(r);
        if (on_step) {
            on_step(r);
        }
    }
    return trace;
}

/// Forward FLOPs per target token for an input of `enc_len` and a target of `dec_len`
/// tokens. Matrix multiplies count 2 FLOPs per multiply-add; norms and softmax are ignored.
/// A MoWE layer costs 4 * d_model * h where h is the mass-weighted expert width.
inline double count_flops(const ModelConfig& cfg, const BucketPlan& plan, int enc_len, int dec_len) {
    const double d = cfg.d_model;
    const double le = enc_len;
    const double ld = dec_len;
    const double ffn = 4.0 * d * cfg.ffn_hidden;
    const double mowe = cfg.num_mowe_layers() > 0 ? 4.0 * d * plan.expected_hidden_dim() : 0.0;
    double enc = 0.0;
    for (int l = 0; l < cfg.num_enc_blocks; ++l) {
        const bool is_mowe = std::find(cfg.mowe_positions_enc.begin(), cfg.mowe_positions_enc.end(), l) != cfg.mowe_positions_enc.end();
        enc += 8.0 * d * d + 4.0 * le * d + (is_mowe ? mowe : ffn);
    }
    double dec = 0.0;
    double cross_kv = 0.0;
    for (int l = 0; l < cfg.num_dec_blocks; ++l) {
        const bool is_mowe = std::find(cfg.mowe_positions_dec.begin(), cfg.mowe_positions_dec.end(), l) != cfg.mowe_positions_dec.end();
        // self-attention (causal, counted at full length), cross q/o projections and scores
        dec += 8.0 * d * d + 4.0 * ld * d + 4.0 * d * d + 4.0 * le * d + (is_mowe ? mowe : ffn);
        cross_kv += 4.0 * d * d * le;
    }
    dec += 2.0 * d * cfg.default_vocab_size;
    return (le * enc + ld * dec + cross_kv) / ld;
}

/// Dense baseline with the same blocks and an FFN width chosen so its FLOPs per target
/// token match the MoWE model.
inline ModelConfig dense_matched_config(const ModelConfig& mowe_cfg, const BucketPlan& plan, int enc_len, int dec_len) {
    const double target = count_flops(mowe_cfg, plan, enc_len, dec_len);
    ModelConfig dense = mowe_cfg;
    dense.mowe_positions_enc.clear();
    dense.mowe_positions_dec.clear();
    dense.routing_vocab_size = 0;
    dense.ffn_hidden = 1;
    const double f1 = count_flops(dense, plan, enc_len, dec_len);
    dense.ffn_hidden = 2;
    const double slope = count_flops(dense, plan, enc_len, dec_len) - f1;
    const double h = 1.0 + (target - f1) / slope;
    dense.ffn_hidden = std::max(1, static_cast<int>(std::lround(h)));
    return dense;
}

struct SharedGradReport {
    double max_abs_diff = 0.0;
    double max_abs_grad = 0.0;
    double loss_diff = 0.0;
    std::size_t compared = 0;
};

/// Compares the expert gradient of a shared-pool model with the sum of the per-layer
/// gradients of an untied copy holding identical expert values.
template <typename T>
SharedGradReport shared_gradient_check(Model<T>& shared, const std::vector<Example>& batch) {
    if (!shared.config().share_experts || shared.pools().size() != 1) {
        throw Error("shared_gradient_check: model must share one expert pool");
    }
    ModelConfig ucfg = shared.config();
    ucfg.share_experts = false;
    Model<T> untied(ucfg, shared.plan(), 0);
    auto& sd = shared.dense_params();
    auto& ud = untied.dense_params();
    for (std::size_t i = 0; i < sd.size(); ++i) {
        ud[i].value = sd[i].value;
    }
    for (auto& pool : untied.pools()) {
        for (std::size_t i = 0; i < pool.params().size(); ++i) {
            pool.params()[i].value = shared.pools()[0].params()[i].value;
        }
    }
    const auto ls = shared.loss_and_grad(batch);
    const auto lu = untied.loss_and_grad(batch);
    SharedGradReport r;
    r.loss_diff = std::abs(ls.loss - lu.loss);
    const auto& sp = shared.pools()[0].params();
    for (std::size_t i = 0; i < sp.size(); ++i) {
        for (std::size_t j = 0; j < sp[i].size(); ++j) {
            double sum = 0.0;
            for (const auto& pool : untied.pools()) {
                sum += static_cast<double>(pool.params()[i].grad[j]);
            }
            const double g = static_cast<double>(sp[i].grad[j]);
            r.max_abs_diff = std::max(r.max_abs_diff, std::abs(g - sum));
            r.max_abs_grad = std::max(r.max_abs_grad, std::abs(g));
            ++r.compared;
        }
    }
    return r;
}

}  // namespace mowe
