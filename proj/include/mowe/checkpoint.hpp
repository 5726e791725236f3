#pragma once

// Checkpoint file: a text header, the bucket plan text, then every tensor as little-endian
// float32.
//
//   # mowe-checkpoint v1
//   dtype = f32
//   default_vocab_hash = <hex>
//   routing_vocab_hash = <hex>
//   model.<key> = <value>          (one line per ModelConfig field)
//   plan_bytes = <n>
//   tensor <name> <rows> <cols> <byte offset into payload>
//   ...
//   end
//   <plan text, n bytes><payload>

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mowe/bucketing.hpp"
#include "mowe/common.hpp"
#include "mowe/kv.hpp"
#include "mowe/model.hpp"

namespace mowe {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

struct TensorEntry {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<float> data;
};

struct Checkpoint {
    ModelConfig config;
    BucketPlan plan;
    std::uint64_t default_vocab_hash = 0;
    std::uint64_t routing_vocab_hash = 0;
    std::vector<TensorEntry> tensors;

    static std::string hex(std::uint64_t v) {
        std::ostringstream s;
        s << std::hex << v;
        return s.str();
    }

    std::string serialize() const {
        std::string head = "# mowe-checkpoint v1\n";
        KeyValues kv;
        kv.set("dtype", "f32");
        kv.set("default_vocab_hash", hex(default_vocab_hash));
        kv.set("routing_vocab_hash", hex(routing_vocab_hash));
        config.write(kv, "model.");
        const std::string plan_text = plan.serialize();
        kv.set("plan_bytes", std::to_string(plan_text.size()));
        head += kv.serialize();
        std::size_t offset = 0;
        for (const auto& t : tensors) {
            head += "tensor " + t.name + " " + std::to_string(t.rows) + " " + std::to_string(t.cols) + " " +
                    std::to_string(offset) + "\n";
            offset += t.data.size() * sizeof(float);
        }
        head += "end\n";
        std::string out = head + plan_text;
        const std::size_t start = out.size();
        out.resize(start + offset);
        std::size_t pos = start;
        for (const auto& t : tensors) {
            std::memcpy(out.data() + pos, t.data.data(), t.data.size() * sizeof(float));
            pos += t.data.size() * sizeof(float);
        }
        return out;
    }

    static Checkpoint parse(const std::string& bytes) {
        std::size_t pos = 0;
        auto next_line = [&]() {
            const auto nl = bytes.find('\n', pos);
            if (nl == std::string::npos) {
                throw ConfigError("checkpoint: truncated header");
            }
            std::string line = bytes.substr(pos, nl - pos);
            pos = nl + 1;
            return line;
        };
        if (next_line() != "# mowe-checkpoint v1") {
            throw ConfigError("checkpoint: not a mowe checkpoint");
        }
        std::string kv_text;
        struct Raw {
            std::string name;
            int rows, cols;
            std::size_t offset;
        };
        std::vector<Raw> raw;
        for (;;) {
            const std::string line = next_line();
            if (line == "end") {
                break;
            }
            if (line.rfind("tensor ", 0) == 0) {
                const auto f = split_ws(line);
                if (f.size() != 5) {
                    throw ConfigError("checkpoint: bad tensor line '" + line + "'");
                }
                raw.push_back({f[1], std::stoi(f[2]), std::stoi(f[3]), static_cast<std::size_t>(std::stoull(f[4]))});
            } else {
                kv_text += line + "\n";
            }
        }
        const KeyValues kv = KeyValues::parse(kv_text);
        if (kv.str("dtype") != "f32") {
            throw ConfigError("checkpoint: unsupported dtype '" + kv.str("dtype") + "'");
        }
        Checkpoint c;
        c.default_vocab_hash = std::stoull(kv.str("default_vocab_hash"), nullptr, 16);
        c.routing_vocab_hash = std::stoull(kv.str("routing_vocab_hash"), nullptr, 16);
        c.config.read(kv, "model.");
        const auto plan_bytes = static_cast<std::size_t>(kv.integer("plan_bytes"));
        if (pos + plan_bytes > bytes.size()) {
            throw ConfigError("checkpoint: truncated plan");
        }
        c.plan = BucketPlan::parse(std::string_view(bytes).substr(pos, plan_bytes));
        pos += plan_bytes;
        const std::size_t payload = bytes.size() - pos;
        std::size_t expected = 0;
        for (const auto& r : raw) {
            if (r.rows < 0 || r.cols < 0 || r.offset != expected) {
                throw ConfigError("checkpoint: tensor '" + r.name + "' has a bad shape or offset");
            }
            TensorEntry t{r.name, r.rows, r.cols, std::vector<float>(static_cast<std::size_t>(r.rows) * r.cols)};
            expected += t.data.size() * sizeof(float);
            if (expected > payload) {
                throw ConfigError("checkpoint: payload shorter than the header says");
            }
            std::memcpy(t.data.data(), bytes.data() + pos + r.offset, t.data.size() * sizeof(float));
            c.tensors.push_back(std::move(t));
        }
        if (expected != payload) {
            throw ConfigError("checkpoint: payload size does not match the header");
        }
        return c;
    }

    void save(const std::string& path) const { write_file(path, serialize()); }
    static Checkpoint load(const std::string& path) { return parse(read_file(path)); }

    /// Fails when the checkpoint was trained with different vocabularies.
    void check_vocab(std::uint64_t default_hash, std::uint64_t routing_hash) const {
        if (default_hash != default_vocab_hash || routing_hash != routing_vocab_hash) {
            throw Error("checkpoint: vocabulary hash mismatch (checkpoint " + hex(default_vocab_hash) + "/" +
                        hex(routing_vocab_hash) + ", given " + hex(default_hash) + "/" + hex(routing_hash) + ")");
        }
    }
};

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, std::uint64_t default_hash, std::uint64_t routing_hash) {
    Checkpoint c;
    c.config = model.config();
    c.plan = model.plan();
    c.default_vocab_hash = default_hash;
    c.routing_vocab_hash = routing_hash;
    for (const auto* p : model.all_params()) {
        TensorEntry t{p->name, p->rows, p->cols, {}};
        t.data.reserve(p->size());
        for (const T v : p->value) {
            t.data.push_back(static_cast<float>(v));
        }
        c.tensors.push_back(std::move(t));
    }
    return c;
}

template <typename T = float>
Model<T> model_from_checkpoint(const Checkpoint& c) {
    Model<T> m(c.config, c.plan, 0);
    std::map<std::string, const TensorEntry*> by_name;
    for (const auto& t : c.tensors) {
        by_name[t.name] = &t;
    }
    auto params = m.all_params();
    if (params.size() != c.tensors.size()) {
        throw Error("checkpoint: holds " + std::to_string(c.tensors.size()) + " tensors, model needs " +
                    std::to_string(params.size()));
    }
    for (auto* p : params) {
        const auto it = by_name.find(p->name);
        if (it == by_name.end() || it->second->rows != p->rows || it->second->cols != p->cols) {
            throw Error("checkpoint: missing or misshaped tensor '" + p->name + "'");
        }
        for (std::size_t i = 0; i < p->size(); ++i) {
            p->value[i] = static_cast<T>(it->second->data[i]);
        }
    }
    return m;
}

}  // namespace mowe
