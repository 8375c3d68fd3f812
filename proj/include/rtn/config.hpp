#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rtn/pipeline.hpp"
#include "rtn/prid.hpp"
#include "rtn/tmil.hpp"

namespace rtn {

enum class DiscardStrategy { prid, random };

inline const char* discard_strategy_name(DiscardStrategy s) {
    switch (s) {
        case DiscardStrategy::prid: return "prid";
        case DiscardStrategy::random: return "random";
    }
    throw std::invalid_argument("unknown discard strategy");
}

inline DiscardStrategy discard_strategy_from_name(const std::string& name) {
    if (name == "prid") return DiscardStrategy::prid;
    if (name == "random") return DiscardStrategy::random;
    throw std::invalid_argument("unknown discard strategy '" + name + "' (expected prid or random)");
}

// Everything one run needs. The learning rates are not part of the paper's
// protocol; they default to the optimizer's default.
struct ExperimentConfig {
    int n = 19;
    int m = 14;
    int cube_size = 20;
    int k_folds = 5;
    int tmil_epochs = 200;
    int agent_epochs = 400;
    int batch_size = 2;
    PoolingMode pooling_mode = PoolingMode::pma;
    DiscardStrategy discard_strategy = DiscardStrategy::prid;
    std::uint64_t seed = 1;
    double tmil_lr = 1e-3;
    double agent_lr = 1e-3;
    TransformerConfig transformer;
    SyntheticSpec synthetic;
};

void validate_experiment_config(const ExperimentConfig& cfg);

// Copy with the shared fields (n, cube_size, seed, positional table span)
// pushed down into the nested specs.
ExperimentConfig resolved(ExperimentConfig cfg);

// Plain-text `key = value` lines with optional [experiment], [transformer],
// and [synthetic] sections; bare keys belong to [experiment]. '#' starts a
// comment. Unknown keys and malformed values are hard errors naming the line.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Canonical flat dump; parsing it back yields an identical config.
std::vector<std::pair<std::string, std::string>> experiment_config_kv(const ExperimentConfig& cfg);
std::string format_experiment_config(const ExperimentConfig& cfg);

// FNV-1a over the canonical dump, as fixed-width hex.
std::string experiment_config_hash(const ExperimentConfig& cfg);

}  // namespace rtn
