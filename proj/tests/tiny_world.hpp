#pragma once

// Small tokenizer + routing + plan setup shared by the model-level tests.

#include <string>
#include <vector>

#include "mowe/bucketing.hpp"
#include "mowe/model.hpp"
#include "mowe/routing.hpp"
#include "mowe/tokenizer.hpp"

namespace tiny {

struct World {
    mowe::SubwordVocab dv;
    mowe::RoutingVocab rv;
    mowe::RoutingHashTable table;
    mowe::BucketPlan plan;
    std::vector<std::string> corpus;
};

inline std::vector<std::string> corpus() {
    return {"the lighthouse of alexandria is in egypt", "the colosseum is in rome", "the parthenon is in athens",
            "mount kilimanjaro is in tanzania", "the acropolis is in athens", "the lighthouse is tall",
            "rome is in italy", "athens is in greece", "egypt has the pyramids", "tanzania has kilimanjaro"};
}

inline World make_world(int capacity = 64) {
    World w;
    w.corpus = corpus();
    w.dv = mowe::learn_vocab(w.corpus, 70, 8);
    w.rv = mowe::extend_with_default(
        mowe::build_routing_vocab({"lighthouse", "alexandria", "colosseum", "parthenon", "kilimanjaro", "acropolis", "tanzania"},
                                  w.corpus, 10),
        w.dv);
    w.table = mowe::build_hash_table(w.rv, w.dv);
    const auto ft = mowe::count_frequencies(w.table, w.corpus, w.dv);
    const auto bounds = mowe::split_buckets(ft, 3, 4);
    mowe::ShapeSpec shapes;
    shapes.buckets = {{2, 1, 6, capacity}, {2, 2, 4, capacity}, {2, 3, 3, capacity}};
    w.plan = mowe::make_plan(bounds, shapes, &ft);
    return w;
}

inline mowe::ModelConfig small_config(const World& w) {
    mowe::ModelConfig c;
    c.d_model = 8;
    c.num_heads = 2;
    c.num_enc_blocks = 2;
    c.num_dec_blocks = 2;
    c.ffn_hidden = 12;
    c.mowe_positions_enc = {1};
    c.mowe_positions_dec = {0};
    c.default_vocab_size = w.dv.size();
    c.routing_vocab_size = w.rv.size();
    c.max_seq_len = 24;
    return c;
}

inline mowe::Example example(const World& w, const std::string& in, const std::string& out) {
    return mowe::make_example(mowe::encode(w.dv, in), mowe::encode(w.dv, out), w.table);
}

inline std::vector<mowe::Example> qa_batch(const World& w) {
    return {example(w, "where is the lighthouse", "alexandria"), example(w, "where is the colosseum", "rome"),
            example(w, "where is kilimanjaro", "tanzania")};
}

}  // namespace tiny
