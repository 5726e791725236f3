#pragma once

// Synthetic fact-recall benchmark and the experiment harness built on it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mowe/bucketing.hpp"
#include "mowe/common.hpp"
#include "mowe/kv.hpp"
#include "mowe/model.hpp"
#include "mowe/routing.hpp"
#include "mowe/span.hpp"
#include "mowe/tokenizer.hpp"
#include "mowe/train.hpp"

namespace mowe {

struct QaPair {
    std::string question;
    std::string answer;
    std::string entity;
};

struct FactCorpus {
    std::vector<std::string> entities;
    std::vector<std::string> values;  // values[i] belongs to entities[i]
    std::vector<std::string> pretrain;
    std::vector<QaPair> qa;

    std::string serialize_pretrain() const {
        std::string out;
        for (const auto& l : pretrain) {
            out += l + "\n";
        }
        return out;
    }
};

inline std::string serialize_qa(const std::vector<QaPair>& qa) {
    std::string out;
    for (const auto& q : qa) {
        out += q.question + "\t" + q.answer + "\n";
    }
    return out;
}

inline std::vector<QaPair> parse_qa(std::string_view text) {
    std::vector<QaPair> out;
    for (const auto& line : split(text, '\n')) {
        if (trim(line).empty()) {
            continue;
        }
        const auto f = split(line, '\t');
        if (f.size() != 2) {
            throw ConfigError("qa file: expected 'question<TAB>answer', got '" + line + "'");
        }
        out.push_back({f[0], f[1], ""});
    }
    return out;
}

namespace facts {

inline const std::vector<std::string>& syllables() {
    static const std::vector<std::string> s = {"ka", "zor", "vel", "mi", "tra", "quin", "dus", "bel", "ro",  "xan",
                                               "po", "lum", "ner", "shi", "gav", "te",   "fol", "yun", "bri", "ox",
                                               "sa", "dre", "kul", "vi", "mo",  "pex",  "jan", "hul", "ze",  "tor"};
    return s;
}

inline const std::vector<std::string>& places() {
    static const std::vector<std::string> p = {"paris", "lima",  "oslo",  "cairo", "delhi", "tokyo", "rome",  "quito",
                                               "dakar", "hanoi", "sofia", "baku",  "accra", "bern",  "minsk", "seoul"};
    return p;
}

inline const std::vector<std::string>& templates() {
    static const std::vector<std::string> t = {"{e} is located in {v}",  "{e} lies in {v}",        "you can find {e} in {v}",
                                               "the town of {e} is in {v}", "{e} is a place in {v}", "travelers reach {e} in {v}",
                                               "{e} belongs to {v}",     "in {v} there is {e}"};
    return t;
}

inline std::string fill(const std::string& tmpl, const std::string& e, const std::string& v) {
    std::string out = tmpl;
    out.replace(out.find("{e}"), 3, e);
    out.replace(out.find("{v}"), 3, v);
    return out;
}

}  // namespace facts

/// Entities are made-up three-syllable words; each is placed in one of a fixed set of
/// places and mentioned `occurrences` times using the first `num_templates` templates.
inline FactCorpus gen_fact_corpus(std::uint64_t seed, int num_entities, int num_templates, int occurrences) {
    if (num_entities < 0 || occurrences < 1 || num_templates < 1 ||
        num_templates > static_cast<int>(facts::templates().size())) {
        throw ConfigError("fact corpus: need num_entities >= 0, occurrences >= 1, num_templates in [1, " +
                          std::to_string(facts::templates().size()) + "]");
    }
    const auto& syl = facts::syllables();
    if (num_entities > static_cast<int>(syl.size() * syl.size() * syl.size()) / 2) {
        throw ConfigError("fact corpus: too many entities");
    }
    Rng rng(seed);
    FactCorpus fc;
    std::set<std::string> seen(facts::places().begin(), facts::places().end());
    while (static_cast<int>(fc.entities.size()) < num_entities) {
        std::string e;
        for (int i = 0; i < 3; ++i) {
            e += syl[rng.below(syl.size())];
        }
        if (seen.insert(e).second) {
            fc.entities.push_back(e);
            fc.values.push_back(facts::places()[rng.below(facts::places().size())]);
        }
    }
    for (std::size_t i = 0; i < fc.entities.size(); ++i) {
        for (int k = 0; k < occurrences; ++k) {
            const auto& t = facts::templates()[static_cast<std::size_t>(k % num_templates)];
            fc.pretrain.push_back(facts::fill(t, fc.entities[i], fc.values[i]));
        }
        fc.qa.push_back({"where is " + fc.entities[i] + " ?", fc.values[i], fc.entities[i]});
    }
    rng.shuffle(fc.pretrain);
    return fc;
}

struct ExperimentConfig {
    // corpus
    std::uint64_t corpus_seed = 7;
    int num_entities = 160;
    int num_templates = 4;
    int occurrences = 12;
    double train_fraction = 0.5;  // share of QA pairs used for finetuning; the rest is evaluated
    // vocabularies
    int default_vocab_size = 256;
    int reserved = 3 + 16;
    int routing_top_k = -1;  // knowledge words kept; -1 keeps all entities, 0 keeps none
    // plan
    int num_buckets = 4;
    int bypass_top_n = 16;
    ShapeSpec shapes = [] {
        ShapeSpec s;
        s.buckets = {{4, 1, 32, 0}, {4, 1, 32, 0}, {4, 2, 16, 0}, {4, 64, 16, 0}};
        s.tokens_per_batch = 320;
        return s;
    }();
    // model
    ModelConfig model = [] {
        ModelConfig m;
        m.d_model = 32;
        m.num_heads = 2;
        m.num_enc_blocks = 2;
        m.num_dec_blocks = 2;
        m.ffn_hidden = 64;
        m.mowe_positions_enc = {1};
        m.mowe_positions_dec = {1};
        m.max_seq_len = 24;
        return m;
    }();
    bool dense_baseline = false;
    // training
    int pretrain_steps = 2000;
    int finetune_steps = 500;
    int batch_size = 32;
    double pretrain_lr = 1e-3;
    double finetune_lr = 1e-4;
    bool freeze_experts = true;
    SpanOptions span;

    static const std::set<std::string>& keys() {
        static const std::set<std::string> k = [] {
            std::set<std::string> s = {"corpus_seed", "num_entities", "num_templates", "occurrences", "train_fraction",
                                       "default_vocab_size", "reserved", "routing_top_k", "num_buckets", "bypass_top_n",
                                       "num_blocks", "experts_per_block", "hidden_dim", "capacity_per_expert",
                                       "capacity_factor", "tokens_per_batch", "dense_baseline", "pretrain_steps",
                                       "finetune_steps", "batch_size", "pretrain_lr", "finetune_lr", "freeze_experts",
                                       "corruption_rate", "mean_span_len"};
            for (const auto& m : ModelConfig::keys()) {
                if (m != "default_vocab_size" && m != "routing_vocab_size") {
                    s.insert("model." + m);
                }
            }
            return s;
        }();
        return k;
    }

    void read(const KeyValues& kv) {
        corpus_seed = static_cast<std::uint64_t>(kv.integer("corpus_seed", static_cast<long long>(corpus_seed)));
        num_entities = static_cast<int>(kv.integer("num_entities", num_entities));
        num_templates = static_cast<int>(kv.integer("num_templates", num_templates));
        occurrences = static_cast<int>(kv.integer("occurrences", occurrences));
        train_fraction = kv.real("train_fraction", train_fraction);
        default_vocab_size = static_cast<int>(kv.integer("default_vocab_size", default_vocab_size));
        reserved = static_cast<int>(kv.integer("reserved", reserved));
        routing_top_k = static_cast<int>(kv.integer("routing_top_k", routing_top_k));
        num_buckets = static_cast<int>(kv.integer("num_buckets", num_buckets));
        bypass_top_n = static_cast<int>(kv.integer("bypass_top_n", bypass_top_n));
        if (kv.has("num_blocks") || kv.has("experts_per_block") || kv.has("hidden_dim")) {
            KeyValues sk;
            for (const char* k : {"num_blocks", "experts_per_block", "hidden_dim", "capacity_per_expert", "capacity_factor",
                                  "tokens_per_batch"}) {
                if (kv.has(k)) {
                    sk.set(k, kv.str(k));
                }
            }
            shapes = ShapeSpec::from_kv(sk);
        } else {
            shapes.capacity_factor = kv.real("capacity_factor", shapes.capacity_factor);
            shapes.tokens_per_batch = kv.integer("tokens_per_batch", shapes.tokens_per_batch);
        }
        dense_baseline = kv.boolean("dense_baseline", dense_baseline);
        pretrain_steps = static_cast<int>(kv.integer("pretrain_steps", pretrain_steps));
        finetune_steps = static_cast<int>(kv.integer("finetune_steps", finetune_steps));
        batch_size = static_cast<int>(kv.integer("batch_size", batch_size));
        pretrain_lr = kv.real("pretrain_lr", pretrain_lr);
        finetune_lr = kv.real("finetune_lr", finetune_lr);
        freeze_experts = kv.boolean("freeze_experts", freeze_experts);
        span.corruption_rate = kv.real("corruption_rate", span.corruption_rate);
        span.mean_span_len = kv.real("mean_span_len", span.mean_span_len);
        model.read(kv, "model.");
        validate();
    }

    void validate() const {
        if (train_fraction <= 0 || train_fraction >= 1) {
            throw ConfigError("train_fraction must be in (0, 1)");
        }
        if (batch_size < 1 || pretrain_steps < 0 || finetune_steps < 0) {
            throw ConfigError("batch_size must be positive and step counts non-negative");
        }
        if (static_cast<int>(shapes.buckets.size()) != num_buckets) {
            throw ConfigError("num_buckets does not match the per-bucket shape lists");
        }
    }
};

/// Vocabularies, routing table, plan and QA split derived from a fact corpus.
struct FactWorld {
    FactCorpus corpus;
    SubwordVocab dv;
    RoutingVocab rv;
    RoutingHashTable table;
    FrequencyTable freq;
    BucketPlan plan;
    std::vector<QaPair> qa_train, qa_eval;
};

inline FactWorld build_fact_world(const ExperimentConfig& cfg) {
    FactWorld w;
    w.corpus = gen_fact_corpus(cfg.corpus_seed, cfg.num_entities, cfg.num_templates, cfg.occurrences);
    // Questions are part of the vocabulary corpus so their words get ordinary pieces.
    std::vector<std::string> vocab_text = w.corpus.pretrain;
    vocab_text.push_back("where is ?");
    w.dv = learn_vocab(vocab_text, cfg.default_vocab_size, cfg.reserved);
    const int top_k = cfg.routing_top_k < 0 ? std::max<int>(1, static_cast<int>(w.corpus.entities.size())) : cfg.routing_top_k;
    if (top_k > 0 && !w.corpus.entities.empty()) {
        w.rv = extend_with_default(build_routing_vocab(w.corpus.entities, w.corpus.pretrain, top_k), w.dv);
    } else {
        w.rv = extend_with_default(RoutingVocab{}, w.dv);
    }
    w.table = build_hash_table(w.rv, w.dv);
    w.freq = count_frequencies(w.table, w.corpus.pretrain, w.dv);
    w.plan = make_plan(split_buckets(w.freq, cfg.num_buckets, cfg.bypass_top_n), cfg.shapes, &w.freq);
    const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * static_cast<double>(w.corpus.qa.size())));
    w.qa_train.assign(w.corpus.qa.begin(), w.corpus.qa.begin() + static_cast<std::ptrdiff_t>(n_train));
    w.qa_eval.assign(w.corpus.qa.begin() + static_cast<std::ptrdiff_t>(n_train), w.corpus.qa.end());
    return w;
}

inline ModelConfig model_config_for(const ExperimentConfig& cfg, const FactWorld& w) {
    ModelConfig m = cfg.model;
    m.default_vocab_size = w.dv.size();
    m.routing_vocab_size = w.rv.size();
    if (cfg.dense_baseline) {
        m = dense_matched_config(m, w.plan, 8, 3);
    }
    return m;
}

inline std::vector<Example> qa_examples(const std::vector<QaPair>& qa, const SubwordVocab& dv, const RoutingHashTable& table) {
    std::vector<Example> out;
    for (const auto& q : qa) {
        out.push_back(make_example(encode(dv, q.question), encode(dv, q.answer), table));
    }
    return out;
}

inline std::string answer(const Model<float>& model, const SubwordVocab& dv, const RoutingHashTable& table,
                          const std::string& question, int max_len = 8) {
    auto ids = encode(dv, question);
    ids.push_back(kEosId);
    return decode(dv, model.generate(ids, table, max_len));
}

/// Exact-match fraction under greedy decoding.
inline double eval_recall(const Model<float>& model, const SubwordVocab& dv, const RoutingHashTable& table,
                          const std::vector<QaPair>& qa) {
    if (qa.empty()) {
        return 0.0;
    }
    int hits = 0;
    for (const auto& q : qa) {
        hits += answer(model, dv, table, q.question) == q.answer ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(qa.size());
}

/// Span-corruption batches drawn with replacement from `lines`. Batch `step` depends only
/// on (seed, step).
inline BatchFn span_batches(const std::vector<std::string>& lines, const SubwordVocab& dv, const RoutingHashTable& table,
                            int batch_size, const SpanOptions& opt, std::uint64_t seed) {
    return [&lines, &dv, &table, batch_size, opt, seed](int step) {
        Rng pick(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(step) + 1);
        std::vector<std::string> chosen;
        for (int i = 0; i < batch_size; ++i) {
            chosen.push_back(lines[pick.below(lines.size())]);
        }
        return make_span_batch(pick.next(), chosen, dv, table, opt);
    };
}

inline BatchFn pretrain_batches(const FactWorld& w, const ExperimentConfig& cfg, std::uint64_t seed) {
    SpanOptions opt = cfg.span;
    opt.max_len = cfg.model.max_seq_len - 1;
    return span_batches(w.corpus.pretrain, w.dv, w.table, cfg.batch_size, opt, seed);
}

inline BatchFn finetune_batches(const std::vector<Example>& pool, int batch_size, std::uint64_t seed) {
    return [&pool, batch_size, seed](int step) {
        Rng pick(seed * 0xD1B54A32D192ED03ULL + static_cast<std::uint64_t>(step) + 7);
        std::vector<Example> b;
        for (int i = 0; i < batch_size; ++i) {
            b.push_back(pool[pick.below(pool.size())]);
        }
        return b;
    };
}

struct CellResult {
    double recall = 0.0;
    double pretrain_final_loss = 0.0;
    double finetune_final_loss = 0.0;
    std::vector<TrainRecord> pretrain_trace, finetune_trace;
};

/// Pretrains and finetunes one model in place.
inline CellResult train_cell(Model<float>& model, const FactWorld& w, const ExperimentConfig& cfg, std::uint64_t seed) {
    if (w.corpus.pretrain.empty() || w.qa_train.empty()) {
        throw Error("experiment: empty fact corpus");
    }
    CellResult r;
    Adam<float> pre({cfg.pretrain_lr});
    r.pretrain_trace = train(model, pre, pretrain_batches(w, cfg, seed), cfg.pretrain_steps);
    model.set_experts_frozen(cfg.freeze_experts);
    const auto train_examples = qa_examples(w.qa_train, w.dv, w.table);
    Adam<float> fine({cfg.finetune_lr});
    r.finetune_trace = train(model, fine, finetune_batches(train_examples, cfg.batch_size, seed), cfg.finetune_steps);
    model.set_experts_frozen(false);
    r.pretrain_final_loss = r.pretrain_trace.empty() ? 0.0 : r.pretrain_trace.back().loss;
    r.finetune_final_loss = r.finetune_trace.empty() ? 0.0 : r.finetune_trace.back().loss;
    r.recall = eval_recall(model, w.dv, w.table, w.qa_eval);
    return r;
}

inline CellResult run_cell(const ExperimentConfig& cfg, std::uint64_t seed, Model<float>* out_model = nullptr) {
    const FactWorld w = build_fact_world(cfg);
    Model<float> model(model_config_for(cfg, w), w.plan, seed);
    auto r = train_cell(model, w, cfg, seed);
    if (out_model) {
        *out_model = std::move(model);
    }
    return r;
}

struct Flip {
    std::string question, gold, answer_on, answer_off;
};

struct ProbeResult {
    double recall_on = 0.0;
    double recall_off = 0.0;
    std::vector<Flip> flips;  // questions whose answer changed
};

/// Evaluates with experts active, then with experts of routing ids >= threshold switched off.
inline ProbeResult run_deactivation_probe(Model<float>& model, const SubwordVocab& dv, const RoutingHashTable& table,
                                          const std::vector<QaPair>& qa, RoutingId threshold) {
    ProbeResult r;
    model.clear_deactivation();
    std::vector<std::string> on;
    for (const auto& q : qa) {
        on.push_back(answer(model, dv, table, q.question));
    }
    model.set_deactivation([threshold](RoutingId id) { return id >= threshold; });
    int hit_on = 0, hit_off = 0;
    for (std::size_t i = 0; i < qa.size(); ++i) {
        const auto off = answer(model, dv, table, qa[i].question);
        hit_on += on[i] == qa[i].answer ? 1 : 0;
        hit_off += off == qa[i].answer ? 1 : 0;
        if (off != on[i]) {
            r.flips.push_back({qa[i].question, qa[i].answer, on[i], off});
        }
    }
    model.clear_deactivation();
    if (!qa.empty()) {
        r.recall_on = static_cast<double>(hit_on) / static_cast<double>(qa.size());
        r.recall_off = static_cast<double>(hit_off) / static_cast<double>(qa.size());
    }
    return r;
}

inline std::string format_flips(const std::vector<Flip>& flips) {
    std::string out = "question,gold,answer_on,answer_off\n";
    for (const auto& f : flips) {
        out += f.question + "," + f.gold + "," + f.answer_on + "," + f.answer_off + "\n";
    }
    return out;
}

struct SweepRow {
    std::string axis_value;
    std::uint64_t seed = 0;
    double metric = 0.0;
};

struct SweepResult {
    std::string axis;
    std::vector<SweepRow> rows;

    std::string csv() const {
        std::string out = "axis_value,seed,metric\n";
        for (const auto& r : rows) {
            std::ostringstream m;
            m.precision(6);
            m << std::fixed << r.metric;
            out += r.axis_value + "," + std::to_string(r.seed) + "," + m.str() + "\n";
        }
        return out;
    }
};

inline const std::vector<std::string>& sweep_axes() {
    static const std::vector<std::string> a = {"routing_vocab_size", "num_experts", "mowe_layers", "expert_dims", "freeze"};
    return a;
}

/// Applies one axis value to a copy of `base`.
inline ExperimentConfig apply_axis(const ExperimentConfig& base, const std::string& axis, const std::string& value) {
    ExperimentConfig c = base;
    long long v = 0;
    try {
        std::size_t used = 0;
        v = std::stoll(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
    } catch (const std::exception&) {
        throw ConfigError("sweep: value '" + value + "' for axis " + axis + " is not an integer");
    }
    if (axis == "routing_vocab_size") {
        // Knowledge words kept on top of the default vocabulary.
        c.routing_top_k = static_cast<int>(v);
    } else if (axis == "num_experts") {
        // Experts per block in the rarest bucket.
        c.shapes.buckets.back().experts_per_block = static_cast<int>(v);
    } else if (axis == "mowe_layers") {
        const int n = static_cast<int>(v);
        if (n < 0 || n > c.model.num_enc_blocks + c.model.num_dec_blocks) {
            throw ConfigError("sweep: mowe_layers out of range");
        }
        c.model.mowe_positions_enc.clear();
        c.model.mowe_positions_dec.clear();
        auto place = [](int count, int blocks) {
            std::vector<int> pos;
            for (int i = 0; i < count; ++i) {
                pos.push_back((blocks - 1 - i + blocks) % blocks);
            }
            std::sort(pos.begin(), pos.end());
            return pos;
        };
        const int enc = std::min((n + 1) / 2, c.model.num_enc_blocks);
        c.model.mowe_positions_enc = place(enc, c.model.num_enc_blocks);
        c.model.mowe_positions_dec = place(n - enc, c.model.num_dec_blocks);
        if (n == 0) {
            c.dense_baseline = false;
        }
    } else if (axis == "expert_dims") {
        // Hidden width of the rarest bucket.
        c.shapes.buckets.back().hidden_dim = static_cast<int>(v);
    } else if (axis == "freeze") {
        c.freeze_experts = v != 0;
    } else {
        throw ConfigError("sweep: unknown axis '" + axis + "'");
    }
    return c;
}

inline SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis, const std::vector<std::string>& values,
                             const std::vector<std::uint64_t>& seeds,
                             const std::function<void(const SweepRow&)>& on_row = {}) {
    SweepResult res;
    res.axis = axis;
    for (const auto& value : values) {
        const auto cfg = apply_axis(base, axis, value);
        for (const auto seed : seeds) {
            SweepRow row{value, seed, run_cell(cfg, seed).recall};
            res.rows.push_back(row);
            if (on_row) {
                on_row(row);
            }
        }
    }
    return res;
}

}  // namespace mowe
