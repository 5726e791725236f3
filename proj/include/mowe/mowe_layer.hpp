#pragma once

// The MoWE layer: fixed hierarchical routing (routing id -> bucket -> block -> expert),
// capacity-bounded dispatch, per-token expert FFNs, and the all-to-all cost accountant.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mowe/bucketing.hpp"
#include "mowe/common.hpp"
#include "mowe/tensor.hpp"

namespace mowe {

enum class Disposition : std::uint8_t { Assigned, Bypassed, Dropped };

struct TokenRoute {
    Disposition kind = Disposition::Bypassed;
    RoutingId routing_id = 0;
    int bucket = -1;
    int block = -1;
    int expert = -1;  // index within the bucket
    int slot = -1;
};

struct DispatchPlan {
    std::vector<TokenRoute> tokens;
    std::vector<std::vector<int>> occupancy;  // [bucket][expert] -> slots used
    std::vector<int> capacity;                // per bucket

    std::size_t size() const { return tokens.size(); }

    std::int64_t count(Disposition d) const {
        return std::count_if(tokens.begin(), tokens.end(), [d](const TokenRoute& t) { return t.kind == d; });
    }
};

/// Expert index within a bucket is rank_within_bucket mod total_experts. Experts are
/// striped over blocks (block = expert mod num_blocks), so the destination block of an id
/// depends only on the block count. Slots fill first-come in sequence order; a token
/// arriving at a full expert is dropped.
inline DispatchPlan route(const BucketPlan& plan, const std::vector<RoutingId>& routing_ids) {
    DispatchPlan dp;
    dp.tokens.resize(routing_ids.size());
    dp.occupancy.resize(plan.buckets.size());
    for (std::size_t b = 0; b < plan.buckets.size(); ++b) {
        dp.occupancy[b].assign(static_cast<std::size_t>(plan.buckets[b].total_experts()), 0);
        dp.capacity.push_back(plan.buckets[b].capacity_per_expert);
    }
    for (std::size_t i = 0; i < routing_ids.size(); ++i) {
        const RoutingId rid = routing_ids[i];
        if (rid < 0 || rid >= plan.vocab_size()) {
            throw Error("route: routing id " + std::to_string(rid) + " outside the plan");
        }
        TokenRoute& t = dp.tokens[i];
        t.routing_id = rid;
        const std::int64_t rank = plan.rank_of[static_cast<std::size_t>(rid)];
        const int bucket = plan.bucket_of_rank(rank);
        if (bucket < 0) {
            t.kind = Disposition::Bypassed;
            continue;
        }
        const auto& shape = plan.buckets[static_cast<std::size_t>(bucket)];
        const auto expert = static_cast<int>((rank - plan.cuts[static_cast<std::size_t>(bucket)]) % shape.total_experts());
        t.bucket = bucket;
        t.expert = expert;
        t.block = expert % shape.num_blocks;
        int& used = dp.occupancy[static_cast<std::size_t>(bucket)][static_cast<std::size_t>(expert)];
        if (used < shape.capacity_per_expert) {
            t.kind = Disposition::Assigned;
            t.slot = used++;
        } else {
            t.kind = Disposition::Dropped;
        }
    }
    return dp;
}

struct CommReport {
    std::int64_t num_blocks_touched = 0;
    std::map<std::pair<int, int>, std::int64_t> tokens_sent_per_block;  // (bucket, block) -> tokens
    std::int64_t total_all2all_payload = 0;                             // tokens x d_model
    std::int64_t drop_count = 0;
    std::int64_t bypass_count = 0;

    bool operator==(const CommReport&) const = default;
};

/// All-to-all traffic of one dispatch: only tokens holding a slot travel, and traffic
/// is counted per destination block.
inline CommReport comm_cost(const DispatchPlan& dp, int d_model) {
    CommReport r;
    for (const auto& t : dp.tokens) {
        switch (t.kind) {
            case Disposition::Assigned:
                ++r.tokens_sent_per_block[{t.bucket, t.block}];
                r.total_all2all_payload += d_model;
                break;
            case Disposition::Dropped:
                ++r.drop_count;
                break;
            case Disposition::Bypassed:
                ++r.bypass_count;
                break;
        }
    }
    r.num_blocks_touched = static_cast<std::int64_t>(r.tokens_sent_per_block.size());
    return r;
}

enum class Activation { Gelu, Linear };

template <typename T>
T gelu(T x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
    constexpr T c = T(0.7978845608028654);
    const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

/// Expert parameters for every bucket. Expert e of bucket b owns row e of
/// `params[2b]` (W_in, d_model x hidden, row-major) and row e of `params[2b+1]`
/// (W_out, hidden x d_model). Any number of MoWE layers may share one pool.
template <typename T>
class ExpertPool {
public:
    struct Cache {
        std::vector<T> pre;                  // hidden pre-activations, concatenated
        std::vector<std::int64_t> offset;    // per token; -1 when the token produced zero
    };

    ExpertPool() = default;

    ExpertPool(const BucketPlan& plan, int d_model, Rng& rng, Activation act = Activation::Gelu,
               const std::string& prefix = "experts")
        : d_model_(d_model), act_(act), deactivated_(static_cast<std::size_t>(plan.vocab_size()), 0) {
        for (int b = 0; b < plan.k(); ++b) {
            const auto& s = plan.buckets[static_cast<std::size_t>(b)];
            hidden_.push_back(s.hidden_dim);
            const int experts = s.total_experts();
            auto& w_in = params_.emplace_back(prefix + ".b" + std::to_string(b) + ".w_in", experts, d_model * s.hidden_dim);
            w_in.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(d_model)));
            auto& w_out = params_.emplace_back(prefix + ".b" + std::to_string(b) + ".w_out", experts, s.hidden_dim * d_model);
            w_out.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(s.hidden_dim)));
        }
    }

    int d_model() const { return d_model_; }
    int num_buckets() const { return static_cast<int>(hidden_.size()); }
    int hidden_dim(int bucket) const { return hidden_[static_cast<std::size_t>(bucket)]; }
    Activation activation() const { return act_; }
    void set_activation(Activation a) { act_ = a; }

    bool frozen() const { return frozen_; }
    void set_frozen(bool f) {
        frozen_ = f;
        for (auto& p : params_) {
            p.frozen = f;
        }
    }

    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }

    /// W_in of one expert as a d_model x hidden matrix view.
    Eigen::Map<RowMat<T>> w_in(int bucket, int expert) {
        return {params_[static_cast<std::size_t>(2 * bucket)].row_ptr(expert), d_model_, hidden_dim(bucket)};
    }
    Eigen::Map<RowMat<T>> w_out(int bucket, int expert) {
        return {params_[static_cast<std::size_t>(2 * bucket + 1)].row_ptr(expert), hidden_dim(bucket), d_model_};
    }
    Eigen::Map<const RowMat<T>> w_in(int bucket, int expert) const {
        return {params_[static_cast<std::size_t>(2 * bucket)].row_ptr(expert), d_model_, hidden_dim(bucket)};
    }
    Eigen::Map<const RowMat<T>> w_out(int bucket, int expert) const {
        return {params_[static_cast<std::size_t>(2 * bucket + 1)].row_ptr(expert), hidden_dim(bucket), d_model_};
    }

    /// Marks routing ids whose expert output is forced to zero.
    void set_deactivation(const std::function<bool(RoutingId)>& predicate) {
        for (std::size_t id = 0; id < deactivated_.size(); ++id) {
            deactivated_[id] = predicate(static_cast<RoutingId>(id)) ? 1 : 0;
        }
    }
    void clear_deactivation() { std::fill(deactivated_.begin(), deactivated_.end(), 0); }
    bool is_deactivated(RoutingId id) const { return deactivated_.at(static_cast<std::size_t>(id)) != 0; }

    /// y = W_out^T act(W_in^T x) per assigned token (rows of x); every other token
    /// (bypassed, dropped, deactivated) gets a zero row.
    RowMat<T> forward(const DispatchPlan& dp, const RowMat<T>& x, Cache* cache = nullptr) const {
        if (static_cast<std::size_t>(x.rows()) != dp.size() || x.cols() != d_model_) {
            throw Error("ExpertPool::forward: input is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                        ", dispatch has " + std::to_string(dp.size()) + " tokens of width " + std::to_string(d_model_));
        }
        RowMat<T> y = RowMat<T>::Zero(x.rows(), d_model_);
        if (cache) {
            cache->pre.clear();
            cache->offset.assign(dp.size(), -1);
        }
        for (std::size_t i = 0; i < dp.size(); ++i) {
            const auto& t = dp.tokens[i];
            if (!active(t)) {
                continue;
            }
            const int h = hidden_dim(t.bucket);
            const auto row = static_cast<Eigen::Index>(i);
            const RowVec<T> pre = x.row(row) * w_in(t.bucket, t.expert);
            RowVec<T> a = pre;
            if (act_ == Activation::Gelu) {
                a = pre.unaryExpr([](T v) { return gelu(v); });
            }
            y.row(row).noalias() = a * w_out(t.bucket, t.expert);
            if (cache) {
                cache->offset[i] = static_cast<std::int64_t>(cache->pre.size());
                cache->pre.insert(cache->pre.end(), pre.data(), pre.data() + h);
            }
        }
        return y;
    }

    /// Returns dx and, unless frozen, accumulates parameter gradients.
    RowMat<T> backward(const DispatchPlan& dp, const RowMat<T>& x, const Cache& cache, const RowMat<T>& dy) {
        RowMat<T> dx = RowMat<T>::Zero(x.rows(), x.cols());
        for (std::size_t i = 0; i < dp.size(); ++i) {
            if (cache.offset[i] < 0) {
                continue;
            }
            const auto& t = dp.tokens[i];
            const int h = hidden_dim(t.bucket);
            const auto row = static_cast<Eigen::Index>(i);
            const Eigen::Map<const RowVec<T>> pre(cache.pre.data() + cache.offset[i], h);
            RowVec<T> a = pre;
            RowVec<T> slope = RowVec<T>::Ones(h);
            if (act_ == Activation::Gelu) {
                a = pre.unaryExpr([](T v) { return gelu(v); });
                slope = pre.unaryExpr([](T v) { return gelu_grad(v); });
            }
            const RowVec<T> da = dy.row(row) * w_out(t.bucket, t.expert).transpose();
            const RowVec<T> dpre = da.cwiseProduct(slope);
            dx.row(row).noalias() = dpre * w_in(t.bucket, t.expert).transpose();
            if (!frozen_) {
                auto& gin = params_[static_cast<std::size_t>(2 * t.bucket)];
                auto& gout = params_[static_cast<std::size_t>(2 * t.bucket + 1)];
                Eigen::Map<RowMat<T>>(gin.grad_row_ptr(t.expert), d_model_, h).noalias() += x.row(row).transpose() * dpre;
                Eigen::Map<RowMat<T>>(gout.grad_row_ptr(t.expert), h, d_model_).noalias() += a.transpose() * dy.row(row);
            }
        }
        return dx;
    }

private:
    bool active(const TokenRoute& t) const {
        return t.kind == Disposition::Assigned && deactivated_[static_cast<std::size_t>(t.routing_id)] == 0;
    }

    int d_model_ = 0;
    Activation act_ = Activation::Gelu;
    bool frozen_ = false;
    std::vector<int> hidden_;
    std::vector<Param<T>> params_;
    std::vector<char> deactivated_;
};

}  // namespace mowe
