#pragma once

// Subcommands of the `mowe` tool. Each command reads a merged KeyValues config (config
// file first, then flag overrides) and writes its artifacts; the executable only parses
// arguments and maps exceptions to exit codes.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mowe/bucketing.hpp"
#include "mowe/checkpoint.hpp"
#include "mowe/common.hpp"
#include "mowe/experiments.hpp"
#include "mowe/kv.hpp"
#include "mowe/model.hpp"
#include "mowe/mowe_layer.hpp"
#include "mowe/routing.hpp"
#include "mowe/span.hpp"
#include "mowe/tokenizer.hpp"
#include "mowe/train.hpp"

namespace mowe::cli {

struct FlagSpec {
    std::string flag;  // without leading dashes
    std::string key;
    std::string help;
    bool is_switch = false;
};

struct Command {
    std::string name;
    std::string help;
    std::vector<FlagSpec> flags;
    std::function<void(const KeyValues&, std::ostream&)> run;
};

inline const std::set<std::string>& plain_keys() {
    static const std::set<std::string> k = {
        "seed",      "corpus",     "names",     "default_vocab", "routing_dir", "freq",           "plan",
        "shapes",    "checkpoint", "init",      "qa",            "out",         "trace",          "vocab_size",
        "reserved",  "top_k",      "k",         "bypass",        "split",       "steps",          "batch_size",
        "lr",        "freeze_experts", "corruption_rate", "mean_span_len", "threshold", "axis",   "values",
        "seeds",     "dispatch",   "max_len"};
    return k;
}

/// Rejects keys that no command understands.
inline void check_keys(const KeyValues& kv) {
    for (const auto& [k, v] : kv.entries()) {
        if (plain_keys().count(k)) {
            continue;
        }
        if (k.rfind("model.", 0) == 0 && ModelConfig::keys().count(k.substr(6))) {
            continue;
        }
        if (k.rfind("exp.", 0) == 0 && ExperimentConfig::keys().count(k.substr(4))) {
            continue;
        }
        throw ConfigError("unknown key '" + k + "'");
    }
}

namespace detail {

inline std::string need_path(const KeyValues& kv, const std::string& key) {
    if (!kv.has(key)) {
        throw ConfigError("missing key '" + key + "'");
    }
    const auto& p = kv.str(key);
    if (!std::filesystem::exists(p)) {
        throw ConfigError("key '" + key + "': no such file '" + p + "'");
    }
    return p;
}

/// Output path whose parent directory must already exist.
inline std::string out_path(const KeyValues& kv, const std::string& key) {
    if (!kv.has(key)) {
        throw ConfigError("missing key '" + key + "'");
    }
    const std::filesystem::path p(kv.str(key));
    if (p.has_parent_path() && !std::filesystem::is_directory(p.parent_path())) {
        throw ConfigError("key '" + key + "': directory '" + p.parent_path().string() + "' does not exist");
    }
    return p.string();
}

inline std::string fixed(double v, int digits = 6) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

inline std::string trace_csv(const std::vector<TrainRecord>& trace) {
    std::string out = "step,loss,tokens_dropped,bypass_fraction\n";
    for (const auto& r : trace) {
        out += std::to_string(r.step) + "," + fixed(r.loss) + "," + std::to_string(r.dropped) + "," + fixed(r.bypass_fraction) + "\n";
    }
    return out;
}

struct Routing {
    SubwordVocab dv;
    RoutingVocab rv;
    RoutingHashTable table;
};

inline Routing load_routing(const KeyValues& kv) {
    Routing r;
    r.dv = SubwordVocab::load(need_path(kv, "default_vocab"));
    const auto dir = std::filesystem::path(need_path(kv, "routing_dir"));
    for (const char* f : {"routing_vocab.tsv", "hash_table.tsv"}) {
        if (!std::filesystem::exists(dir / f)) {
            throw ConfigError("key 'routing_dir': missing " + (dir / f).string());
        }
    }
    r.rv = RoutingVocab::load((dir / "routing_vocab.tsv").string());
    r.table = RoutingHashTable::load((dir / "hash_table.tsv").string());
    if (r.table.vocab_size != r.rv.size() || r.rv.knowledge_threshold != r.dv.size()) {
        throw ConfigError("routing files do not match the default vocabulary");
    }
    return r;
}

inline std::vector<std::string> nonempty_lines(const std::string& path) {
    std::vector<std::string> out;
    for (auto& l : read_lines(path)) {
        if (!trim(l).empty()) {
            out.push_back(trim(l));
        }
    }
    return out;
}

inline ExperimentConfig experiment_config(const KeyValues& kv) {
    KeyValues sub;
    for (const auto& [k, v] : kv.entries()) {
        if (k.rfind("exp.", 0) == 0) {
            sub.set(k.substr(4), v);
        }
    }
    ExperimentConfig cfg;
    cfg.read(sub);
    return cfg;
}

inline std::vector<std::string> csv_list(const std::string& s) {
    std::vector<std::string> out;
    for (const auto& f : split(s, ',')) {
        if (!trim(f).empty()) {
            out.push_back(trim(f));
        }
    }
    return out;
}

inline std::uint64_t seed(const KeyValues& kv) { return static_cast<std::uint64_t>(kv.integer("seed", 0)); }

inline void emit(const KeyValues& kv, std::ostream& os, const std::string& text) {
    if (kv.has("out")) {
        write_file(out_path(kv, "out"), text);
    } else {
        os << text;
    }
}

}  // namespace detail

inline void build_default_vocab(const KeyValues& kv, std::ostream& os) {
    const auto corpus = detail::nonempty_lines(detail::need_path(kv, "corpus"));
    const auto out = detail::out_path(kv, "out");
    const auto v = learn_vocab(corpus, static_cast<int>(kv.integer("vocab_size", 1024)), static_cast<int>(kv.integer("reserved", 19)));
    v.save(out);
    os << "pieces=" << v.size() << " reserved=" << v.reserved() << "\n";
}

inline void build_routing_vocab_cmd(const KeyValues& kv, std::ostream& os) {
    const auto names = detail::nonempty_lines(detail::need_path(kv, "names"));
    const auto corpus = detail::nonempty_lines(detail::need_path(kv, "corpus"));
    const auto dv = SubwordVocab::load(detail::need_path(kv, "default_vocab"));
    if (!kv.has("out")) {
        throw ConfigError("missing key 'out'");
    }
    const std::filesystem::path dir(kv.str("out"));
    std::filesystem::create_directories(dir);
    const auto rv = extend_with_default(build_routing_vocab(names, corpus, static_cast<int>(kv.integer("top_k", 100000))), dv);
    const auto table = build_hash_table(rv, dv);
    const auto freq = count_frequencies(table, corpus, dv);
    write_file((dir / "routing_vocab.tsv").string(), rv.serialize());
    write_file((dir / "hash_table.tsv").string(), table.serialize());
    write_file((dir / "freq.tsv").string(), freq.serialize());
    os << "routing_ids=" << rv.size() << " knowledge_threshold=" << rv.knowledge_threshold << " keys=" << table.map.size()
       << " dropped_too_long=" << table.dropped_too_long << " collisions=" << table.collisions << "\n";
}

inline void plan_buckets(const KeyValues& kv, std::ostream& os) {
    const auto ft = FrequencyTable::load(detail::need_path(kv, "freq"));
    const auto out = detail::out_path(kv, "out");
    const ShapeSpec shapes = kv.has("shapes") ? ShapeSpec::from_kv(KeyValues::load(detail::need_path(kv, "shapes"))) : desk_default_shapes();
    const auto mode_name = kv.str("split", "mass");
    if (mode_name != "mass" && mode_name != "count") {
        throw ConfigError("key 'split': expected 'mass' or 'count', got '" + mode_name + "'");
    }
    const auto mode = mode_name == "mass" ? SplitMode::Mass : SplitMode::Count;
    const auto bounds = split_buckets(ft, static_cast<int>(kv.integer("k", 4)), static_cast<int>(kv.integer("bypass", 16)), mode);
    const auto plan = make_plan(bounds, shapes, &ft);
    plan.save(out);
    os << "buckets=" << plan.k() << " experts=" << plan.total_experts() << " expected_hidden=" << detail::fixed(plan.expected_hidden_dim(), 3)
       << "\n";
}

inline void pretrain(const KeyValues& kv, std::ostream& os) {
    const auto corpus = detail::nonempty_lines(detail::need_path(kv, "corpus"));
    const auto r = detail::load_routing(kv);
    const auto plan = BucketPlan::load(detail::need_path(kv, "plan"));
    const auto out = detail::out_path(kv, "out");
    const auto trace_path = kv.has("trace") ? detail::out_path(kv, "trace") : out + ".loss.csv";
    if (corpus.empty()) {
        throw ConfigError("key 'corpus': corpus is empty");
    }
    ModelConfig cfg;
    cfg.read(kv, "model.");
    cfg.default_vocab_size = r.dv.size();
    cfg.routing_vocab_size = r.rv.size();
    const auto seed = detail::seed(kv);
    Model<float> model(cfg, plan, seed);
    SpanOptions span;
    span.corruption_rate = kv.real("corruption_rate", span.corruption_rate);
    span.mean_span_len = kv.real("mean_span_len", span.mean_span_len);
    span.max_len = cfg.max_seq_len - 1;
    const int batch = static_cast<int>(kv.integer("batch_size", 32));
    Adam<float> opt({kv.real("lr", 1e-3)});
    const auto trace = train(model, opt, span_batches(corpus, r.dv, r.table, batch, span, seed), static_cast<int>(kv.integer("steps", 200)));
    make_checkpoint(model, r.dv.fingerprint(), r.rv.fingerprint()).save(out);
    write_file(trace_path, detail::trace_csv(trace));
    os << "steps=" << trace.size() << " final_loss=" << detail::fixed(trace.empty() ? 0.0 : trace.back().loss) << "\n";
}

inline void finetune(const KeyValues& kv, std::ostream& os) {
    const auto r = detail::load_routing(kv);
    const auto ckpt = Checkpoint::load(detail::need_path(kv, "init"));
    ckpt.check_vocab(r.dv.fingerprint(), r.rv.fingerprint());
    const auto qa = parse_qa(read_file(detail::need_path(kv, "qa")));
    const auto out = detail::out_path(kv, "out");
    const auto trace_path = kv.has("trace") ? detail::out_path(kv, "trace") : out + ".loss.csv";
    if (qa.empty()) {
        throw ConfigError("key 'qa': no question/answer pairs");
    }
    auto model = model_from_checkpoint<float>(ckpt);
    model.set_experts_frozen(kv.boolean("freeze_experts", true));
    const auto examples = qa_examples(qa, r.dv, r.table);
    Adam<float> opt({kv.real("lr", 1e-4)});
    const auto trace = train(model, opt, finetune_batches(examples, static_cast<int>(kv.integer("batch_size", 32)), detail::seed(kv)),
                             static_cast<int>(kv.integer("steps", 100)));
    make_checkpoint(model, r.dv.fingerprint(), r.rv.fingerprint()).save(out);
    write_file(trace_path, detail::trace_csv(trace));
    os << "steps=" << trace.size() << " final_loss=" << detail::fixed(trace.empty() ? 0.0 : trace.back().loss) << "\n";
}

inline void eval(const KeyValues& kv, std::ostream& os) {
    const auto r = detail::load_routing(kv);
    const auto ckpt = Checkpoint::load(detail::need_path(kv, "checkpoint"));
    ckpt.check_vocab(r.dv.fingerprint(), r.rv.fingerprint());
    const auto qa = parse_qa(read_file(detail::need_path(kv, "qa")));
    const auto model = model_from_checkpoint<float>(ckpt);
    const int max_len = static_cast<int>(kv.integer("max_len", 8));
    std::string csv = "question,gold,prediction,correct\n";
    int hits = 0;
    for (const auto& q : qa) {
        const auto pred = answer(model, r.dv, r.table, q.question, max_len);
        hits += pred == q.answer ? 1 : 0;
        csv += q.question + "," + q.answer + "," + pred + "," + (pred == q.answer ? "1" : "0") + "\n";
    }
    if (kv.has("out")) {
        write_file(detail::out_path(kv, "out"), csv);
    }
    os << "exact_match=" << detail::fixed(qa.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(qa.size())) << " questions=" << qa.size()
       << "\n";
}

inline void ablate(const KeyValues& kv, std::ostream& os) {
    const auto cfg = detail::experiment_config(kv);
    if (!kv.has("axis") || !kv.has("values")) {
        throw ConfigError("missing key '" + std::string(kv.has("axis") ? "values" : "axis") + "'");
    }
    const auto axis = kv.str("axis");
    if (std::find(sweep_axes().begin(), sweep_axes().end(), axis) == sweep_axes().end()) {
        throw ConfigError("key 'axis': unknown axis '" + axis + "'");
    }
    const auto values = detail::csv_list(kv.str("values"));
    std::vector<std::uint64_t> seeds;
    for (const auto& s : detail::csv_list(kv.str("seeds", std::to_string(detail::seed(kv))))) {
        try {
            seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
            throw ConfigError("key 'seeds': bad seed '" + s + "'");
        }
    }
    if (kv.has("out")) {
        detail::out_path(kv, "out");
    }
    for (const auto& v : values) {
        apply_axis(cfg, axis, v);  // validates every value before training starts
    }
    const auto res = run_sweep(cfg, axis, values, seeds);
    detail::emit(kv, os, res.csv());
}

inline void stats(const KeyValues& kv, std::ostream& os) {
    if (!kv.boolean("dispatch", false)) {
        throw ConfigError("stats: only --dispatch is supported");
    }
    const auto corpus = detail::nonempty_lines(detail::need_path(kv, "corpus"));
    const auto r = detail::load_routing(kv);
    const auto plan = BucketPlan::load(detail::need_path(kv, "plan"));
    ModelConfig mc;
    mc.read(kv, "model.");
    const auto batch = static_cast<std::size_t>(kv.integer("batch_size", 32));
    if (batch == 0) {
        throw ConfigError("key 'batch_size': must be positive");
    }
    std::string csv = "batch,tokens,num_blocks_touched,total_all2all_payload,drop_count,bypass_count\n";
    for (std::size_t start = 0, b = 0; start < corpus.size(); start += batch, ++b) {
        std::vector<RoutingId> ids;
        for (std::size_t i = start; i < std::min(corpus.size(), start + batch); ++i) {
            const auto a = assign_routing_ids(r.table, encode(r.dv, corpus[i]));
            ids.insert(ids.end(), a.routing_ids.begin(), a.routing_ids.end());
        }
        const auto rep = comm_cost(route(plan, ids), mc.d_model);
        csv += std::to_string(b) + "," + std::to_string(ids.size()) + "," + std::to_string(rep.num_blocks_touched) + "," +
               std::to_string(rep.total_all2all_payload) + "," + std::to_string(rep.drop_count) + "," + std::to_string(rep.bypass_count) + "\n";
    }
    detail::emit(kv, os, csv);
}

inline void probe_deactivation(const KeyValues& kv, std::ostream& os) {
    const auto r = detail::load_routing(kv);
    const auto ckpt = Checkpoint::load(detail::need_path(kv, "checkpoint"));
    ckpt.check_vocab(r.dv.fingerprint(), r.rv.fingerprint());
    const auto qa = parse_qa(read_file(detail::need_path(kv, "qa")));
    auto model = model_from_checkpoint<float>(ckpt);
    const auto threshold = static_cast<RoutingId>(kv.integer("threshold", r.rv.knowledge_threshold));
    const auto p = run_deactivation_probe(model, r.dv, r.table, qa, threshold);
    if (kv.has("out")) {
        write_file(detail::out_path(kv, "out"), format_flips(p.flips));
    }
    os << "threshold=" << threshold << " recall_on=" << detail::fixed(p.recall_on) << " recall_off=" << detail::fixed(p.recall_off)
       << " flips=" << p.flips.size() << "\n";
}

inline void gen_facts(const KeyValues& kv, std::ostream& os) {
    const auto cfg = detail::experiment_config(kv);
    if (!kv.has("out")) {
        throw ConfigError("missing key 'out'");
    }
    const std::filesystem::path dir(kv.str("out"));
    std::filesystem::create_directories(dir);
    const auto w = build_fact_world(cfg);
    std::string names;
    for (const auto& e : w.corpus.entities) {
        names += e + "\n";
    }
    write_file((dir / "pretrain.txt").string(), w.corpus.serialize_pretrain());
    write_file((dir / "names.txt").string(), names);
    write_file((dir / "qa_train.tsv").string(), serialize_qa(w.qa_train));
    write_file((dir / "qa_eval.tsv").string(), serialize_qa(w.qa_eval));
    os << "entities=" << w.corpus.entities.size() << " lines=" << w.corpus.pretrain.size() << "\n";
}

inline const std::vector<Command>& commands() {
    static const std::vector<Command> c = {
        {"build-default-vocab", "Learn the default subword vocabulary",
         {{"corpus", "corpus", "training text, one line per sentence"},
          {"size", "vocab_size", "number of pieces including reserved ids"},
          {"reserved", "reserved", "pad, eos, unk and sentinel ids at the front"},
          {"out", "out", "vocabulary file to write"}},
         build_default_vocab},
        {"build-routing-vocab", "Build the routing vocabulary, hash table and frequency table",
         {{"names", "names", "entity names, one per line"},
          {"corpus", "corpus", "text used for word frequencies"},
          {"top-k", "top_k", "knowledge words to keep"},
          {"default-vocab", "default_vocab", "default vocabulary file"},
          {"out", "out", "output directory"}},
         build_routing_vocab_cmd},
        {"plan-buckets", "Split routing ids into frequency buckets and write a bucket plan",
         {{"freq", "freq", "frequency table (freq.tsv)"},
          {"k", "k", "number of buckets"},
          {"bypass", "bypass", "most frequent ids that skip experts"},
          {"shapes", "shapes", "per-bucket shape file"},
          {"split", "split", "mass or count"},
          {"out", "out", "plan file to write"}},
         plan_buckets},
        {"pretrain", "Span-corruption pretraining",
         {{"corpus", "corpus", "pretraining text"},
          {"default-vocab", "default_vocab", "default vocabulary file"},
          {"routing", "routing_dir", "routing directory"},
          {"plan", "plan", "bucket plan"},
          {"steps", "steps", "optimizer steps"},
          {"batch-size", "batch_size", "lines per batch"},
          {"lr", "lr", "learning rate"},
          {"out", "out", "checkpoint to write"},
          {"trace", "trace", "loss trace CSV"}},
         pretrain},
        {"finetune", "Finetune on question/answer pairs",
         {{"init", "init", "checkpoint to start from"},
          {"qa", "qa", "question<TAB>answer file"},
          {"default-vocab", "default_vocab", "default vocabulary file"},
          {"routing", "routing_dir", "routing directory"},
          {"steps", "steps", "optimizer steps"},
          {"batch-size", "batch_size", "examples per batch"},
          {"lr", "lr", "learning rate"},
          {"freeze", "freeze_experts", "keep expert parameters fixed (true/false)"},
          {"out", "out", "checkpoint to write"},
          {"trace", "trace", "loss trace CSV"}},
         finetune},
        {"eval", "Exact-match evaluation with greedy decoding",
         {{"checkpoint", "checkpoint", "model checkpoint"},
          {"qa", "qa", "question<TAB>answer file"},
          {"default-vocab", "default_vocab", "default vocabulary file"},
          {"routing", "routing_dir", "routing directory"},
          {"out", "out", "per-question CSV"}},
         eval},
        {"ablate", "Train and evaluate one fact-recall model per axis value and seed",
         {{"axis", "axis", "routing_vocab_size, num_experts, mowe_layers, expert_dims or freeze"},
          {"values", "values", "comma-separated axis values"},
          {"seeds", "seeds", "comma-separated seeds"},
          {"out", "out", "results CSV"}},
         ablate},
        {"stats", "Dispatch statistics per batch",
         {{"dispatch", "dispatch", "report all-to-all traffic per batch", true},
          {"corpus", "corpus", "text to route"},
          {"default-vocab", "default_vocab", "default vocabulary file"},
          {"routing", "routing_dir", "routing directory"},
          {"plan", "plan", "bucket plan"},
          {"batch-size", "batch_size", "lines per batch"},
          {"out", "out", "CSV to write"}},
         stats},
        {"probe-deactivation", "Compare recall with and without knowledge experts",
         {{"checkpoint", "checkpoint", "model checkpoint"},
          {"qa", "qa", "question<TAB>answer file"},
          {"default-vocab", "default_vocab", "default vocabulary file"},
          {"routing", "routing_dir", "routing directory"},
          {"threshold", "threshold", "first deactivated routing id"},
          {"out", "out", "CSV of changed answers"}},
         probe_deactivation},
        {"gen-facts", "Write the synthetic fact corpus and QA splits",
         {{"num-entities", "exp.num_entities", "number of entities"},
          {"occurrences", "exp.occurrences", "mentions per entity"},
          {"out", "out", "output directory"}},
         gen_facts},
    };
    return c;
}

inline const Command& find_command(const std::string& name) {
    for (const auto& c : commands()) {
        if (c.name == name) {
            return c;
        }
    }
    throw ConfigError("unknown command '" + name + "'");
}

/// Merges a config file and overrides, validates keys and runs the command.
inline void run(const std::string& command, const std::string& config_path, const std::vector<std::pair<std::string, std::string>>& overrides,
                std::ostream& os) {
    KeyValues kv;
    if (!config_path.empty()) {
        if (!std::filesystem::exists(config_path)) {
            throw ConfigError("config file '" + config_path + "' not found");
        }
        kv = KeyValues::load(config_path);
    }
    for (const auto& [k, v] : overrides) {
        kv.set(k, v);
    }
    check_keys(kv);
    find_command(command).run(kv, os);
}

}  // namespace mowe::cli
