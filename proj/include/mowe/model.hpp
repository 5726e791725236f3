#pragma once

// Pre-norm encoder-decoder transformer in which selected blocks use a MoWE layer instead
// of the dense FFN. Forward and backward passes are written out by hand; every sequence of
// a batch is flattened into one token matrix and attention runs per sequence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mowe/bucketing.hpp"
#include "mowe/common.hpp"
#include "mowe/kv.hpp"
#include "mowe/mowe_layer.hpp"
#include "mowe/routing.hpp"
#include "mowe/tensor.hpp"
#include "mowe/tokenizer.hpp"

namespace mowe {

struct ModelConfig {
    int d_model = 64;
    int num_heads = 4;
    int num_enc_blocks = 6;
    int num_dec_blocks = 6;
    int ffn_hidden = 256;
    std::vector<int> mowe_positions_enc = {2, 4};
    std::vector<int> mowe_positions_dec = {2, 4};
    bool share_experts = true;
    int default_vocab_size = 1024;
    int routing_vocab_size = 0;
    int max_seq_len = 64;

    int num_mowe_layers() const { return static_cast<int>(mowe_positions_enc.size() + mowe_positions_dec.size()); }

    void validate() const {
        if (d_model <= 0 || num_heads <= 0 || d_model % num_heads != 0) {
            throw ConfigError("model: d_model must be a positive multiple of num_heads");
        }
        if (num_enc_blocks < 1 || num_dec_blocks < 1 || ffn_hidden < 1 || max_seq_len < 2 || default_vocab_size < 4) {
            throw ConfigError("model: block counts, ffn_hidden, max_seq_len and vocab sizes must be positive");
        }
        auto check = [](const std::vector<int>& pos, int blocks, const char* what) {
            std::set<int> seen;
            for (const int p : pos) {
                if (p < 0 || p >= blocks || !seen.insert(p).second) {
                    throw ConfigError(std::string("model: invalid ") + what + " MoWE position " + std::to_string(p));
                }
            }
        };
        check(mowe_positions_enc, num_enc_blocks, "encoder");
        check(mowe_positions_dec, num_dec_blocks, "decoder");
        if (num_mowe_layers() > 0 && routing_vocab_size <= 0) {
            throw ConfigError("model: routing_vocab_size must be set when MoWE layers are present");
        }
    }

    static const std::set<std::string>& keys() {
        static const std::set<std::string> k = {"d_model", "num_heads", "num_enc_blocks", "num_dec_blocks", "ffn_hidden",
                                                "mowe_positions_enc", "mowe_positions_dec", "share_experts",
                                                "default_vocab_size", "routing_vocab_size", "max_seq_len"};
        return k;
    }

    void write(KeyValues& kv, const std::string& prefix = "") const {
        kv.set(prefix + "d_model", std::to_string(d_model));
        kv.set(prefix + "num_heads", std::to_string(num_heads));
        kv.set(prefix + "num_enc_blocks", std::to_string(num_enc_blocks));
        kv.set(prefix + "num_dec_blocks", std::to_string(num_dec_blocks));
        kv.set(prefix + "ffn_hidden", std::to_string(ffn_hidden));
        kv.set(prefix + "mowe_positions_enc", join(mowe_positions_enc));
        kv.set(prefix + "mowe_positions_dec", join(mowe_positions_dec));
        kv.set(prefix + "share_experts", share_experts ? "true" : "false");
        kv.set(prefix + "default_vocab_size", std::to_string(default_vocab_size));
        kv.set(prefix + "routing_vocab_size", std::to_string(routing_vocab_size));
        kv.set(prefix + "max_seq_len", std::to_string(max_seq_len));
    }

    /// Reads the keys present under `prefix`, keeping defaults for the rest.
    void read(const KeyValues& kv, const std::string& prefix = "") {
        auto as_int = [&](const char* k, int& dst) {
            if (kv.has(prefix + k)) {
                dst = static_cast<int>(kv.integer(prefix + k));
            }
        };
        auto as_list = [&](const char* k, std::vector<int>& dst) {
            if (kv.has(prefix + k)) {
                dst.clear();
                for (const auto v : kv.int_list(prefix + k)) {
                    dst.push_back(static_cast<int>(v));
                }
            }
        };
        as_int("d_model", d_model);
        as_int("num_heads", num_heads);
        as_int("num_enc_blocks", num_enc_blocks);
        as_int("num_dec_blocks", num_dec_blocks);
        as_int("ffn_hidden", ffn_hidden);
        as_list("mowe_positions_enc", mowe_positions_enc);
        as_list("mowe_positions_dec", mowe_positions_dec);
        share_experts = kv.boolean(prefix + "share_experts", share_experts);
        as_int("default_vocab_size", default_vocab_size);
        as_int("routing_vocab_size", routing_vocab_size);
        as_int("max_seq_len", max_seq_len);
    }

    bool operator==(const ModelConfig&) const = default;
};

/// One encoder-decoder training example. `target` ends with </s>; the decoder input is
/// `<pad>` followed by target[0..n-1], and `dec_routing` are the routing ids of that
/// decoder input.
struct Example {
    TokenSequence input;
    std::vector<RoutingId> input_routing;
    TokenSequence target;
    std::vector<RoutingId> dec_routing;

    TokenSequence decoder_input() const {
        TokenSequence d = {kPadId};
        d.insert(d.end(), target.begin(), target.end() - (target.empty() ? 0 : 1));
        return d;
    }
};

/// Appends </s> to both sides and computes routing ids for encoder and decoder input.
inline Example make_example(TokenSequence input, TokenSequence target, const RoutingHashTable& table) {
    Example ex;
    ex.input = std::move(input);
    ex.input.push_back(kEosId);
    ex.target = std::move(target);
    ex.target.push_back(kEosId);
    ex.input_routing = assign_routing_ids(table, ex.input).routing_ids;
    ex.dec_routing = assign_routing_ids(table, ex.decoder_input()).routing_ids;
    return ex;
}

struct LossStats {
    double loss = 0.0;
    std::int64_t target_tokens = 0;
    std::int64_t routed_tokens = 0;  // token visits over all MoWE layers
    std::int64_t dropped = 0;
    std::int64_t bypassed = 0;
};

template <typename T>
class Model {
public:
    Model() = default;

    Model(const ModelConfig& cfg, const BucketPlan& plan, std::uint64_t seed) : cfg_(cfg), plan_(plan) {
        cfg_.validate();
        if (cfg_.num_mowe_layers() > 0 && plan_.vocab_size() != cfg_.routing_vocab_size) {
            throw ConfigError("model: bucket plan covers " + std::to_string(plan_.vocab_size()) + " routing ids, config says " +
                              std::to_string(cfg_.routing_vocab_size));
        }
        Rng rng(seed);
        const int d = cfg_.d_model;
        const double w = 1.0 / std::sqrt(static_cast<double>(d));
        const double out_scale = 1.0 / std::sqrt(2.0 * (cfg_.num_enc_blocks + cfg_.num_dec_blocks));
        embed_ = add("embed", cfg_.default_vocab_size, d, rng, 1.0);
        enc_pos_ = add("enc.pos", cfg_.max_seq_len, d, rng, 0.1);
        dec_pos_ = add("dec.pos", cfg_.max_seq_len, d, rng, 0.1);

        auto attn = [&](const std::string& p) {
            AttnIdx a;
            a.q = add(p + ".q", d, d, rng, w);
            a.k = add(p + ".k", d, d, rng, w);
            a.v = add(p + ".v", d, d, rng, w);
            a.o = add(p + ".o", d, d, rng, w * out_scale);
            return a;
        };
        auto ffn = [&](Block& b, const std::string& p, bool is_mowe) {
            b.ffn_norm = add_norm(p + ".ffn_norm");
            if (is_mowe) {
                b.pool = cfg_.share_experts ? 0 : static_cast<int>(pools_.size());
                if (!cfg_.share_experts || pools_.empty()) {
                    pools_.emplace_back(plan_, d, rng, Activation::Gelu, cfg_.share_experts ? "experts" : "experts." + p);
                }
            } else {
                b.w1 = add(p + ".ffn.w1", d, cfg_.ffn_hidden, rng, w);
                b.w2 = add(p + ".ffn.w2", cfg_.ffn_hidden, d, rng, out_scale / std::sqrt(static_cast<double>(cfg_.ffn_hidden)));
            }
        };
        for (int l = 0; l < cfg_.num_enc_blocks; ++l) {
            const std::string p = "enc." + std::to_string(l);
            Block b;
            b.self_norm = add_norm(p + ".attn_norm");
            b.self = attn(p + ".attn");
            ffn(b, p, contains(cfg_.mowe_positions_enc, l));
            enc_.push_back(b);
        }
        enc_final_ = add_norm("enc.final_norm");
        for (int l = 0; l < cfg_.num_dec_blocks; ++l) {
            const std::string p = "dec." + std::to_string(l);
            Block b;
            b.self_norm = add_norm(p + ".self_norm");
            b.self = attn(p + ".self");
            b.cross_norm = add_norm(p + ".cross_norm");
            b.cross = attn(p + ".cross");
            ffn(b, p, contains(cfg_.mowe_positions_dec, l));
            dec_.push_back(b);
        }
        dec_final_ = add_norm("dec.final_norm");
        lm_head_ = add("lm_head", d, cfg_.default_vocab_size, rng, w);
    }

    const ModelConfig& config() const { return cfg_; }
    const BucketPlan& plan() const { return plan_; }
    std::vector<ExpertPool<T>>& pools() { return pools_; }
    const std::vector<ExpertPool<T>>& pools() const { return pools_; }
    std::vector<Param<T>>& dense_params() { return params_; }
    const std::vector<Param<T>>& dense_params() const { return params_; }

    /// Every parameter, dense first, then expert pools in creation order.
    std::vector<Param<T>*> all_params() {
        std::vector<Param<T>*> out;
        for (auto& p : params_) {
            out.push_back(&p);
        }
        for (auto& pool : pools_) {
            for (auto& p : pool.params()) {
                out.push_back(&p);
            }
        }
        return out;
    }
    std::vector<const Param<T>*> all_params() const {
        std::vector<const Param<T>*> out;
        for (const auto& p : params_) {
            out.push_back(&p);
        }
        for (const auto& pool : pools_) {
            for (const auto& p : pool.params()) {
                out.push_back(&p);
            }
        }
        return out;
    }

    void set_experts_frozen(bool frozen) {
        for (auto& pool : pools_) {
            pool.set_frozen(frozen);
        }
    }

    void set_deactivation(const std::function<bool(RoutingId)>& predicate) {
        for (auto& pool : pools_) {
            pool.set_deactivation(predicate);
        }
    }
    void clear_deactivation() {
        for (auto& pool : pools_) {
            pool.clear_deactivation();
        }
    }

    /// Mean token cross-entropy of the targets; no gradients.
    LossStats loss(const std::vector<Example>& batch) const {
        Tape tape;
        return forward(batch, tape, false);
    }

    /// Zeroes all gradients, then runs forward and backward over the batch. MoWE layers
    /// listed in `expert_grad_layers` (indices in encoder-then-decoder order) are the only
    /// ones that accumulate expert gradients; empty means all of them.
    LossStats loss_and_grad(const std::vector<Example>& batch, const std::vector<int>& expert_grad_layers = {}) {
        for (auto* p : all_params()) {
            p->zero_grad();
        }
        Tape tape;
        const auto stats = forward(batch, tape, true);
        backward(batch, tape, expert_grad_layers);
        return stats;
    }

    /// Greedy decoding. Decoder routing ids are recomputed each step with the longest
    /// match ending at the newest position.
    TokenSequence generate(const TokenSequence& input, const RoutingHashTable& table, int max_len) const {
        Example ex;
        ex.input = input;
        ex.input_routing = assign_routing_ids(table, input).routing_ids;
        std::vector<Example> batch = {ex};
        Tape tape;
        const Segments enc_seg = segments(batch, true);
        const RowMat<T> memory = run_encoder(batch, enc_seg, tape, false);
        TokenSequence out;
        const int limit = std::min(max_len, cfg_.max_seq_len - 1);
        for (int step = 0; step < limit; ++step) {
            batch[0].target = out;
            batch[0].target.push_back(kEosId);
            batch[0].dec_routing = assign_routing_ids(table, batch[0].decoder_input()).routing_ids;
            const Segments dec_seg = segments(batch, false);
            const RowMat<T> h = run_decoder(batch, dec_seg, memory, enc_seg, tape, false);
            const RowVec<T> logits = h.row(h.rows() - 1) * params_[static_cast<std::size_t>(lm_head_)].mat();
            Eigen::Index best = 0;
            logits.maxCoeff(&best);
            if (best == kEosId) {
                break;
            }
            out.push_back(static_cast<TokenId>(best));
        }
        return out;
    }

private:
    struct AttnIdx {
        int q = -1, k = -1, v = -1, o = -1;
    };
    struct Block {
        int self_norm = -1;
        AttnIdx self;
        int cross_norm = -1;
        AttnIdx cross;
        int ffn_norm = -1;
        int w1 = -1, w2 = -1;
        int pool = -1;  // >= 0 for MoWE blocks
    };

    struct Segments {
        std::vector<Eigen::Index> off;  // size batch + 1
        Eigen::Index len(std::size_t e) const { return off[e + 1] - off[e]; }
    };

    struct NormCache {
        RowMat<T> x;
        Eigen::Matrix<T, Eigen::Dynamic, 1> inv_rms;
    };
    struct AttnCache {
        RowMat<T> xq, xkv, q, k, v, o;
        std::vector<RowMat<T>> probs;  // [example * heads + head]
    };
    struct FfnCache {
        RowMat<T> x, pre;
        DispatchPlan dp;
        typename ExpertPool<T>::Cache expert;
        int mowe_layer = -1;
    };
    struct BlockCache {
        NormCache n_self, n_cross, n_ffn;
        AttnCache self, cross;
        FfnCache ffn;
    };
    struct Tape {
        std::vector<BlockCache> enc, dec;
        NormCache enc_final, dec_final;
        RowMat<T> memory, dec_out, probs;
        std::vector<TokenId> targets;
        LossStats stats;
    };

    static bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

    int add(const std::string& name, int rows, int cols, Rng& rng, double stddev) {
        params_.emplace_back(name, rows, cols);
        params_.back().init_normal(rng, stddev);
        return static_cast<int>(params_.size()) - 1;
    }
    int add_norm(const std::string& name) {
        params_.emplace_back(name, 1, cfg_.d_model);
        params_.back().fill(T(1));
        return static_cast<int>(params_.size()) - 1;
    }
    Param<T>& P(int i) { return params_[static_cast<std::size_t>(i)]; }
    const Param<T>& P(int i) const { return params_[static_cast<std::size_t>(i)]; }

    Segments segments(const std::vector<Example>& batch, bool encoder) const {
        Segments s;
        s.off.push_back(0);
        for (const auto& ex : batch) {
            const auto n = static_cast<Eigen::Index>(encoder ? ex.input.size() : ex.target.size());
            if (n < 1 || n > cfg_.max_seq_len) {
                throw Error("model: sequence length " + std::to_string(n) + " outside [1, " + std::to_string(cfg_.max_seq_len) + "]");
            }
            s.off.push_back(s.off.back() + n);
        }
        return s;
    }

    // ---- primitives ----

    RowMat<T> norm_forward(const RowMat<T>& x, int g, NormCache* c) const {
        const T eps = T(1e-6);
        Eigen::Matrix<T, Eigen::Dynamic, 1> inv = ((x.array().square().rowwise().sum() / T(x.cols())) + eps).rsqrt();
        RowMat<T> y = (x.array().colwise() * inv.array()).matrix();
        y = (y.array().rowwise() * P(g).mat().row(0).array()).matrix();
        if (c) {
            c->x = x;
            c->inv_rms = std::move(inv);
        }
        return y;
    }

    RowMat<T> norm_backward(const NormCache& c, int g, const RowMat<T>& dy) {
        const auto gain = P(g).mat().row(0).array();
        const RowMat<T> xhat = (c.x.array().colwise() * c.inv_rms.array()).matrix();
        P(g).grad_mat().row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
        const RowMat<T> dxhat = (dy.array().rowwise() * gain).matrix();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (dxhat.array() * xhat.array()).rowwise().sum() / T(c.x.cols());
        RowMat<T> dx = ((dxhat.array() - xhat.array().colwise() * dot.array()).colwise() * c.inv_rms.array()).matrix();
        return dx;
    }

    RowMat<T> attn_forward(const RowMat<T>& xq, const Segments& sq, const RowMat<T>& xkv, const Segments& sk, bool causal,
                           const AttnIdx& a, AttnCache* c) const {
        const int heads = cfg_.num_heads;
        const int dh = cfg_.d_model / heads;
        const T scale = T(1) / std::sqrt(T(dh));
        RowMat<T> q = xq * P(a.q).mat();
        RowMat<T> k = xkv * P(a.k).mat();
        RowMat<T> v = xkv * P(a.v).mat();
        RowMat<T> o(xq.rows(), cfg_.d_model);
        if (c) {
            c->probs.clear();
        }
        for (std::size_t e = 0; e + 1 < sq.off.size(); ++e) {
            const Eigen::Index lq = sq.len(e);
            const Eigen::Index lk = sk.len(e);
            for (int h = 0; h < heads; ++h) {
                const auto qh = q.block(sq.off[e], h * dh, lq, dh);
                const auto kh = k.block(sk.off[e], h * dh, lk, dh);
                const auto vh = v.block(sk.off[e], h * dh, lk, dh);
                RowMat<T> s = (qh * kh.transpose()) * scale;
                for (Eigen::Index i = 0; i < lq; ++i) {
                    if (causal) {
                        for (Eigen::Index j = i + 1; j < lk; ++j) {
                            s(i, j) = -std::numeric_limits<T>::infinity();
                        }
                    }
                    const T mx = s.row(i).maxCoeff();
                    s.row(i) = (s.row(i).array() - mx).exp().matrix();
                    s.row(i) /= s.row(i).sum();
                }
                o.block(sq.off[e], h * dh, lq, dh).noalias() = s * vh;
                if (c) {
                    c->probs.push_back(std::move(s));
                }
            }
        }
        RowMat<T> out = o * P(a.o).mat();
        if (c) {
            c->xq = xq;
            c->xkv = xkv;
            c->q = std::move(q);
            c->k = std::move(k);
            c->v = std::move(v);
            c->o = std::move(o);
        }
        return out;
    }

    /// Returns {dxq, dxkv}.
    std::pair<RowMat<T>, RowMat<T>> attn_backward(const AttnCache& c, const Segments& sq, const Segments& sk, const AttnIdx& a,
                                                  const RowMat<T>& dout) {
        const int heads = cfg_.num_heads;
        const int dh = cfg_.d_model / heads;
        const T scale = T(1) / std::sqrt(T(dh));
        P(a.o).grad_mat().noalias() += c.o.transpose() * dout;
        const RowMat<T> dO = dout * P(a.o).mat().transpose();
        RowMat<T> dq = RowMat<T>::Zero(c.q.rows(), c.q.cols());
        RowMat<T> dk = RowMat<T>::Zero(c.k.rows(), c.k.cols());
        RowMat<T> dv = RowMat<T>::Zero(c.v.rows(), c.v.cols());
        std::size_t idx = 0;
        for (std::size_t e = 0; e + 1 < sq.off.size(); ++e) {
            const Eigen::Index lq = sq.len(e);
            const Eigen::Index lk = sk.len(e);
            for (int h = 0; h < heads; ++h, ++idx) {
                const RowMat<T>& p = c.probs[idx];
                const auto doh = dO.block(sq.off[e], h * dh, lq, dh);
                const auto qh = c.q.block(sq.off[e], h * dh, lq, dh);
                const auto kh = c.k.block(sk.off[e], h * dh, lk, dh);
                const auto vh = c.v.block(sk.off[e], h * dh, lk, dh);
                dv.block(sk.off[e], h * dh, lk, dh).noalias() += p.transpose() * doh;
                const RowMat<T> dp = doh * vh.transpose();
                const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (dp.array() * p.array()).rowwise().sum();
                const RowMat<T> ds = ((dp.array().colwise() - row_dot.array()) * p.array()).matrix() * scale;
                dq.block(sq.off[e], h * dh, lq, dh).noalias() += ds * kh;
                dk.block(sk.off[e], h * dh, lk, dh).noalias() += ds.transpose() * qh;
            }
        }
        P(a.q).grad_mat().noalias() += c.xq.transpose() * dq;
        P(a.k).grad_mat().noalias() += c.xkv.transpose() * dk;
        P(a.v).grad_mat().noalias() += c.xkv.transpose() * dv;
        RowMat<T> dxq = dq * P(a.q).mat().transpose();
        RowMat<T> dxkv = dk * P(a.k).mat().transpose();
        dxkv.noalias() += dv * P(a.v).mat().transpose();
        return {std::move(dxq), std::move(dxkv)};
    }

    RowMat<T> ffn_forward(const Block& b, const RowMat<T>& x, const std::vector<RoutingId>& routing, int mowe_layer,
                          FfnCache* c, LossStats& stats) const {
        if (b.pool >= 0) {
            DispatchPlan dp = route(plan_, routing);
            stats.routed_tokens += static_cast<std::int64_t>(dp.size());
            stats.dropped += dp.count(Disposition::Dropped);
            stats.bypassed += dp.count(Disposition::Bypassed);
            RowMat<T> y = pools_[static_cast<std::size_t>(b.pool)].forward(dp, x, c ? &c->expert : nullptr);
            if (c) {
                c->x = x;
                c->dp = std::move(dp);
                c->mowe_layer = mowe_layer;
            }
            return y;
        }
        RowMat<T> pre = x * P(b.w1).mat();
        RowMat<T> y = pre.unaryExpr([](T v) { return gelu(v); }) * P(b.w2).mat();
        if (c) {
            c->x = x;
            c->pre = std::move(pre);
        }
        return y;
    }

    RowMat<T> ffn_backward(const Block& b, const FfnCache& c, const RowMat<T>& dy, const std::vector<int>& expert_grad_layers) {
        if (b.pool >= 0) {
            auto& pool = pools_[static_cast<std::size_t>(b.pool)];
            const bool keep = expert_grad_layers.empty() || contains(expert_grad_layers, c.mowe_layer);
            const bool was_frozen = pool.frozen();
            if (!keep) {
                pool.set_frozen(true);
            }
            RowMat<T> dx = pool.backward(c.dp, c.x, c.expert, dy);
            if (!keep) {
                pool.set_frozen(was_frozen);
            }
            return dx;
        }
        const RowMat<T> act = c.pre.unaryExpr([](T v) { return gelu(v); });
        P(b.w2).grad_mat().noalias() += act.transpose() * dy;
        const RowMat<T> dpre = ((dy * P(b.w2).mat().transpose()).array() * c.pre.unaryExpr([](T v) { return gelu_grad(v); }).array()).matrix();
        P(b.w1).grad_mat().noalias() += c.x.transpose() * dpre;
        return dpre * P(b.w1).mat().transpose();
    }

    RowMat<T> embed_tokens(const std::vector<Example>& batch, const Segments& seg, bool encoder) const {
        const auto& emb = P(embed_);
        const auto& pos = P(encoder ? enc_pos_ : dec_pos_);
        RowMat<T> x(seg.off.back(), cfg_.d_model);
        for (std::size_t e = 0; e < batch.size(); ++e) {
            const TokenSequence ids = encoder ? batch[e].input : batch[e].decoder_input();
            for (Eigen::Index i = 0; i < seg.len(e); ++i) {
                const TokenId id = ids[static_cast<std::size_t>(i)];
                if (id < 0 || id >= cfg_.default_vocab_size) {
                    throw Error("model: token id " + std::to_string(id) + " out of range");
                }
                x.row(seg.off[e] + i) = emb.mat().row(id) + pos.mat().row(i);
            }
        }
        return x;
    }

    void embed_backward(const std::vector<Example>& batch, const Segments& seg, bool encoder, const RowMat<T>& dx) {
        auto& emb = P(embed_);
        auto& pos = P(encoder ? enc_pos_ : dec_pos_);
        for (std::size_t e = 0; e < batch.size(); ++e) {
            const TokenSequence ids = encoder ? batch[e].input : batch[e].decoder_input();
            for (Eigen::Index i = 0; i < seg.len(e); ++i) {
                emb.grad_mat().row(ids[static_cast<std::size_t>(i)]) += dx.row(seg.off[e] + i);
                pos.grad_mat().row(i) += dx.row(seg.off[e] + i);
            }
        }
    }

    std::vector<RoutingId> flat_routing(const std::vector<Example>& batch, bool encoder) const {
        std::vector<RoutingId> out;
        for (const auto& ex : batch) {
            const auto& r = encoder ? ex.input_routing : ex.dec_routing;
            const auto n = encoder ? ex.input.size() : ex.target.size();
            if (r.size() != n) {
                throw Error("model: routing ids do not match sequence length");
            }
            out.insert(out.end(), r.begin(), r.end());
        }
        return out;
    }

    RowMat<T> run_encoder(const std::vector<Example>& batch, const Segments& seg, Tape& tape, bool record) const {
        RowMat<T> x = embed_tokens(batch, seg, true);
        const auto routing = pools_.empty() ? std::vector<RoutingId>{} : flat_routing(batch, true);
        if (record) {
            tape.enc.assign(enc_.size(), BlockCache{});
        }
        int mowe_layer = 0;
        for (std::size_t l = 0; l < enc_.size(); ++l) {
            const Block& b = enc_[l];
            BlockCache* c = record ? &tape.enc[l] : nullptr;
            const RowMat<T> a = norm_forward(x, b.self_norm, c ? &c->n_self : nullptr);
            x += attn_forward(a, seg, a, seg, false, b.self, c ? &c->self : nullptr);
            const RowMat<T> f = norm_forward(x, b.ffn_norm, c ? &c->n_ffn : nullptr);
            x += ffn_forward(b, f, routing, b.pool >= 0 ? mowe_layer++ : -1, c ? &c->ffn : nullptr, tape.stats);
        }
        return norm_forward(x, enc_final_, record ? &tape.enc_final : nullptr);
    }

    RowMat<T> run_decoder(const std::vector<Example>& batch, const Segments& seg, const RowMat<T>& memory, const Segments& enc_seg,
                          Tape& tape, bool record) const {
        RowMat<T> y = embed_tokens(batch, seg, false);
        const auto routing = pools_.empty() ? std::vector<RoutingId>{} : flat_routing(batch, false);
        if (record) {
            tape.dec.assign(dec_.size(), BlockCache{});
        }
        int mowe_layer = static_cast<int>(cfg_.mowe_positions_enc.size());
        for (std::size_t l = 0; l < dec_.size(); ++l) {
            const Block& b = dec_[l];
            BlockCache* c = record ? &tape.dec[l] : nullptr;
            const RowMat<T> a = norm_forward(y, b.self_norm, c ? &c->n_self : nullptr);
            y += attn_forward(a, seg, a, seg, true, b.self, c ? &c->self : nullptr);
            const RowMat<T> q = norm_forward(y, b.cross_norm, c ? &c->n_cross : nullptr);
            y += attn_forward(q, seg, memory, enc_seg, false, b.cross, c ? &c->cross : nullptr);
            const RowMat<T> f = norm_forward(y, b.ffn_norm, c ? &c->n_ffn : nullptr);
            y += ffn_forward(b, f, routing, b.pool >= 0 ? mowe_layer++ : -1, c ? &c->ffn : nullptr, tape.stats);
        }
        return norm_forward(y, dec_final_, record ? &tape.dec_final : nullptr);
    }

    LossStats forward(const std::vector<Example>& batch, Tape& tape, bool record) const {
        if (batch.empty()) {
            throw Error("model: empty batch");
        }
        const Segments enc_seg = segments(batch, true);
        const Segments dec_seg = segments(batch, false);
        RowMat<T> memory = run_encoder(batch, enc_seg, tape, record);
        RowMat<T> h = run_decoder(batch, dec_seg, memory, enc_seg, tape, record);
        RowMat<T> logits = h * P(lm_head_).mat();
        std::vector<TokenId> targets;
        for (const auto& ex : batch) {
            targets.insert(targets.end(), ex.target.begin(), ex.target.end());
        }
        double total = 0.0;
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            const T mx = logits.row(i).maxCoeff();
            logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
            const T z = logits.row(i).sum();
            logits.row(i) /= z;
            const TokenId t = targets[static_cast<std::size_t>(i)];
            if (t < 0 || t >= cfg_.default_vocab_size) {
                throw Error("model: target id out of range");
            }
            total -= static_cast<double>(std::log(std::max(logits(i, t), std::numeric_limits<T>::min())));
        }
        LossStats stats = tape.stats;
        stats.target_tokens = static_cast<std::int64_t>(targets.size());
        stats.loss = total / static_cast<double>(targets.size());
        if (record) {
            tape.memory = std::move(memory);
            tape.dec_out = std::move(h);
            tape.probs = std::move(logits);
            tape.targets = std::move(targets);
            tape.stats = stats;
        }
        return stats;
    }

    void backward(const std::vector<Example>& batch, Tape& tape, const std::vector<int>& expert_grad_layers) {
        const Segments enc_seg = segments(batch, true);
        const Segments dec_seg = segments(batch, false);
        const T inv_n = T(1) / T(tape.targets.size());
        RowMat<T> dlogits = tape.probs;
        for (std::size_t i = 0; i < tape.targets.size(); ++i) {
            dlogits(static_cast<Eigen::Index>(i), tape.targets[i]) -= T(1);
        }
        dlogits *= inv_n;
        P(lm_head_).grad_mat().noalias() += tape.dec_out.transpose() * dlogits;
        RowMat<T> dy = norm_backward(tape.dec_final, dec_final_, dlogits * P(lm_head_).mat().transpose());
        RowMat<T> dmemory = RowMat<T>::Zero(tape.memory.rows(), tape.memory.cols());
        for (std::size_t l = dec_.size(); l-- > 0;) {
            const Block& b = dec_[l];
            const BlockCache& c = tape.dec[l];
            dy += norm_backward(c.n_ffn, b.ffn_norm, ffn_backward(b, c.ffn, dy, expert_grad_layers));
            auto [dq, dmem] = attn_backward(c.cross, dec_seg, enc_seg, b.cross, dy);
            dmemory += dmem;
            dy += norm_backward(c.n_cross, b.cross_norm, dq);
            auto [ds, ds_kv] = attn_backward(c.self, dec_seg, dec_seg, b.self, dy);
            dy += norm_backward(c.n_self, b.self_norm, ds + ds_kv);
        }
        embed_backward(batch, dec_seg, false, dy);
        RowMat<T> dx = norm_backward(tape.enc_final, enc_final_, dmemory);
        for (std::size_t l = enc_.size(); l-- > 0;) {
            const Block& b = enc_[l];
            const BlockCache& c = tape.enc[l];
            dx += norm_backward(c.n_ffn, b.ffn_norm, ffn_backward(b, c.ffn, dx, expert_grad_layers));
            auto [da, da_kv] = attn_backward(c.self, enc_seg, enc_seg, b.self, dx);
            dx += norm_backward(c.n_self, b.self_norm, da + da_kv);
        }
        embed_backward(batch, enc_seg, true, dx);
    }

    ModelConfig cfg_;
    BucketPlan plan_;
    std::vector<Param<T>> params_;
    std::vector<ExpertPool<T>> pools_;
    std::vector<Block> enc_, dec_;
    int embed_ = -1, enc_pos_ = -1, dec_pos_ = -1, enc_final_ = -1, dec_final_ = -1, lm_head_ = -1;
};

/// Copy of `src` with parameters converted to another scalar type.
template <typename To, typename From>
Model<To> convert_model(const Model<From>& src, std::uint64_t seed = 0) {
    Model<To> dst(src.config(), src.plan(), seed);
    auto s = src.all_params();
    auto d = dst.all_params();
    for (std::size_t i = 0; i < s.size(); ++i) {
        std::transform(s[i]->value.begin(), s[i]->value.end(), d[i]->value.begin(), [](From v) { return static_cast<To>(v); });
        d[i]->frozen = s[i]->frozen;
    }
    for (std::size_t i = 0; i < src.pools().size(); ++i) {
        dst.pools()[i].set_frozen(src.pools()[i].frozen());
    }
    return dst;
}

}  // namespace mowe
