#pragma once

// Flat key=value configuration: parsed from a text file, overridable by
// command-line assignments, serialized into every checkpoint for provenance.

#include <map>
#include <string>

#include "vsyn/losses.hpp"
#include "vsyn/networks.hpp"
#include "vsyn/nn.hpp"

namespace vsyn {

struct TrainConfig {
    std::string dataset;
    std::string out_dir = "runs/default";
    int batch_size = 16;
    int64_t total_steps = 20000;
    AdamConfig adam_eg, adam_d, adam_dac;
    LossWeights weights;
    ModelConfig model;
    uint64_t seed = 0;
    int64_t checkpoint_interval = 1000;
    int64_t metrics_interval = 1;
    int threads = 2;

    std::string serialize() const;
    static TrainConfig deserialize(const std::string& text);

    void apply(const std::string& key, const std::string& value);
};

// key=value lines; '#' starts a comment.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> parse_kv_file(const std::string& path);

}  // namespace vsyn
