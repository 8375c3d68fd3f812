#include "rtn/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "rtn/rng.hpp"

namespace rtn {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(int line, const std::string& what) {
    throw std::invalid_argument("config line " + std::to_string(line) + ": " + what);
}

int parse_int(const std::string& v, int line) {
    try {
        std::size_t idx = 0;
        const long long x = std::stoll(v, &idx);
        if (idx != v.size()) fail(line, "trailing characters after integer '" + v + "'");
        if (x < INT32_MIN || x > INT32_MAX) fail(line, "integer out of range: " + v);
        return static_cast<int>(x);
    } catch (const std::invalid_argument&) {
        fail(line, "expected an integer, got '" + v + "'");
    } catch (const std::out_of_range&) {
        fail(line, "integer out of range: " + v);
    }
}

std::uint64_t parse_u64(const std::string& v, int line) {
    if (!v.empty() && v[0] == '-') fail(line, "seed must be non-negative: " + v);
    try {
        std::size_t idx = 0;
        const unsigned long long x = std::stoull(v, &idx);
        if (idx != v.size()) fail(line, "trailing characters after integer '" + v + "'");
        return static_cast<std::uint64_t>(x);
    } catch (const std::invalid_argument&) {
        fail(line, "expected an unsigned integer, got '" + v + "'");
    } catch (const std::out_of_range&) {
        fail(line, "integer out of range: " + v);
    }
}

double parse_double(const std::string& v, int line) {
    try {
        std::size_t idx = 0;
        const double x = std::stod(v, &idx);
        if (idx != v.size()) fail(line, "trailing characters after number '" + v + "'");
        return x;
    } catch (const std::invalid_argument&) {
        fail(line, "expected a number, got '" + v + "'");
    } catch (const std::out_of_range&) {
        fail(line, "number out of range: " + v);
    }
}

bool parse_bool(const std::string& v, int line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(line, "expected true/false, got '" + v + "'");
}

// Shortest decimal form that parses back to the same double.
std::string fmt_double(double v) {
    for (int prec = 6; prec <= 17; ++prec) {
        std::ostringstream os;
        os << std::setprecision(prec) << v;
        if (std::stod(os.str()) == v) return os.str();
    }
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

enum class Section { experiment, transformer, synthetic };

void apply_experiment(ExperimentConfig& cfg, const std::string& key, const std::string& value,
                      int line) {
    if (key == "n") cfg.n = parse_int(value, line);
    else if (key == "m") cfg.m = parse_int(value, line);
    else if (key == "cube_size") cfg.cube_size = parse_int(value, line);
    else if (key == "k_folds") cfg.k_folds = parse_int(value, line);
    else if (key == "tmil_epochs") cfg.tmil_epochs = parse_int(value, line);
    else if (key == "agent_epochs") cfg.agent_epochs = parse_int(value, line);
    else if (key == "batch_size") cfg.batch_size = parse_int(value, line);
    else if (key == "seed") cfg.seed = parse_u64(value, line);
    else if (key == "tmil_lr") cfg.tmil_lr = parse_double(value, line);
    else if (key == "agent_lr") cfg.agent_lr = parse_double(value, line);
    else if (key == "pooling") {
        try {
            cfg.pooling_mode = pooling_mode_from_name(value);
        } catch (const std::invalid_argument& e) {
            fail(line, e.what());
        }
    } else if (key == "discard_strategy") {
        try {
            cfg.discard_strategy = discard_strategy_from_name(value);
        } catch (const std::invalid_argument& e) {
            fail(line, e.what());
        }
    } else {
        fail(line, "unknown key '" + key + "' in [experiment]");
    }
}

void apply_transformer(TransformerConfig& cfg, const std::string& key, const std::string& value,
                       int line) {
    if (key == "embed_dim") cfg.embed_dim = parse_int(value, line);
    else if (key == "layers") cfg.layers = parse_int(value, line);
    else if (key == "heads") cfg.heads = parse_int(value, line);
    else if (key == "mlp_hidden") cfg.mlp_hidden = parse_int(value, line);
    else if (key == "use_positional") cfg.use_positional = parse_bool(value, line);
    else if (key == "max_instances") cfg.max_instances = parse_int(value, line);
    else if (key == "extractor_c1") cfg.extractor_c1 = parse_int(value, line);
    else if (key == "extractor_c2") cfg.extractor_c2 = parse_int(value, line);
    else fail(line, "unknown key '" + key + "' in [transformer]");
}

void apply_synthetic(SyntheticSpec& spec, const std::string& key, const std::string& value,
                     int line) {
    if (key == "n") spec.n = parse_int(value, line);
    else if (key == "cube_size") spec.cube_size = parse_int(value, line);
    else if (key == "num_informative") spec.num_informative = parse_int(value, line);
    else if (key == "noise_level") spec.noise_level = parse_double(value, line);
    else if (key == "num_bags") spec.num_bags = parse_int(value, line);
    else if (key == "positive_fraction") spec.positive_fraction = parse_double(value, line);
    else if (key == "volume_size") spec.volume_size = parse_int(value, line);
    else if (key == "centerline_points") spec.centerline_points = parse_int(value, line);
    else if (key == "seed") spec.seed = parse_u64(value, line);
    else if (key == "tube_radius") spec.patterns.tube_radius = parse_double(value, line);
    else if (key == "smooth_intensity") spec.patterns.smooth_intensity = parse_double(value, line);
    else if (key == "smooth_speckle") spec.patterns.smooth_speckle = parse_double(value, line);
    else if (key == "artifact_dropout_intensity")
        spec.patterns.artifact_dropout_intensity = parse_double(value, line);
    else if (key == "artifact_speckle") spec.patterns.artifact_speckle = parse_double(value, line);
    else if (key == "artifact_stripe_period")
        spec.patterns.artifact_stripe_period = parse_int(value, line);
    else if (key == "artifact_stripe_on") spec.patterns.artifact_stripe_on = parse_int(value, line);
    else if (key == "lowcontrast_intensity")
        spec.patterns.lowcontrast_intensity = parse_double(value, line);
    else fail(line, "unknown key '" + key + "' in [synthetic]");
}

}  // namespace

void validate_experiment_config(const ExperimentConfig& cfg) {
    if (cfg.n < 1) throw std::invalid_argument("config: n must be >= 1");
    if (cfg.m < 0) throw std::invalid_argument("config: m must be >= 0");
    if (cfg.m >= cfg.n) {
        throw std::invalid_argument("config: m must leave at least one instance (m < n), got m=" +
                                    std::to_string(cfg.m) + " n=" + std::to_string(cfg.n));
    }
    if (cfg.cube_size < 1) throw std::invalid_argument("config: cube_size must be >= 1");
    if (cfg.k_folds < 2) throw std::invalid_argument("config: k_folds must be >= 2");
    if (cfg.k_folds > cfg.synthetic.num_bags) {
        throw std::invalid_argument("config: k_folds exceeds num_bags");
    }
    if (cfg.tmil_epochs < 0) throw std::invalid_argument("config: tmil_epochs must be >= 0");
    if (cfg.agent_epochs < 0) throw std::invalid_argument("config: agent_epochs must be >= 0");
    if (cfg.batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (!(cfg.tmil_lr > 0.0)) throw std::invalid_argument("config: tmil_lr must be positive");
    if (!(cfg.agent_lr > 0.0)) throw std::invalid_argument("config: agent_lr must be positive");
    TransformerConfig t = cfg.transformer;
    t.max_instances = cfg.n;  // value in the file is overridden anyway
    validate_config(t);
}

ExperimentConfig resolved(ExperimentConfig cfg) {
    cfg.synthetic.n = cfg.n;
    cfg.synthetic.cube_size = cfg.cube_size;
    cfg.synthetic.seed = derive_seed(cfg.seed, 100);
    cfg.transformer.max_instances = cfg.n;
    return cfg;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
    ExperimentConfig cfg;
    Section section = Section::experiment;
    std::istringstream is(text);
    std::string raw;
    int line = 0;
    while (std::getline(is, raw)) {
        ++line;
        const auto hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string s = trim(raw);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') fail(line, "unterminated section header");
            const std::string name = trim(s.substr(1, s.size() - 2));
            if (name == "experiment") section = Section::experiment;
            else if (name == "transformer") section = Section::transformer;
            else if (name == "synthetic") section = Section::synthetic;
            else fail(line, "unknown section [" + name + "]");
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) fail(line, "expected key = value");
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        if (key.empty()) fail(line, "empty key");
        if (value.empty()) fail(line, "empty value for key '" + key + "'");
        switch (section) {
            case Section::experiment: apply_experiment(cfg, key, value, line); break;
            case Section::transformer: apply_transformer(cfg.transformer, key, value, line); break;
            case Section::synthetic: apply_synthetic(cfg.synthetic, key, value, line); break;
        }
    }
    validate_experiment_config(cfg);
    return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_experiment_config(buf.str());
}

std::vector<std::pair<std::string, std::string>> experiment_config_kv(const ExperimentConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("[experiment]", "");
    kv.emplace_back("n", std::to_string(cfg.n));
    kv.emplace_back("m", std::to_string(cfg.m));
    kv.emplace_back("cube_size", std::to_string(cfg.cube_size));
    kv.emplace_back("k_folds", std::to_string(cfg.k_folds));
    kv.emplace_back("tmil_epochs", std::to_string(cfg.tmil_epochs));
    kv.emplace_back("agent_epochs", std::to_string(cfg.agent_epochs));
    kv.emplace_back("batch_size", std::to_string(cfg.batch_size));
    kv.emplace_back("pooling", pooling_mode_name(cfg.pooling_mode));
    kv.emplace_back("discard_strategy", discard_strategy_name(cfg.discard_strategy));
    kv.emplace_back("seed", std::to_string(cfg.seed));
    kv.emplace_back("tmil_lr", fmt_double(cfg.tmil_lr));
    kv.emplace_back("agent_lr", fmt_double(cfg.agent_lr));
    kv.emplace_back("[transformer]", "");
    kv.emplace_back("embed_dim", std::to_string(cfg.transformer.embed_dim));
    kv.emplace_back("layers", std::to_string(cfg.transformer.layers));
    kv.emplace_back("heads", std::to_string(cfg.transformer.heads));
    kv.emplace_back("mlp_hidden", std::to_string(cfg.transformer.mlp_hidden));
    kv.emplace_back("use_positional", cfg.transformer.use_positional ? "true" : "false");
    kv.emplace_back("max_instances", std::to_string(cfg.transformer.max_instances));
    kv.emplace_back("extractor_c1", std::to_string(cfg.transformer.extractor_c1));
    kv.emplace_back("extractor_c2", std::to_string(cfg.transformer.extractor_c2));
    kv.emplace_back("[synthetic]", "");
    kv.emplace_back("n", std::to_string(cfg.synthetic.n));
    kv.emplace_back("cube_size", std::to_string(cfg.synthetic.cube_size));
    kv.emplace_back("num_informative", std::to_string(cfg.synthetic.num_informative));
    kv.emplace_back("noise_level", fmt_double(cfg.synthetic.noise_level));
    kv.emplace_back("num_bags", std::to_string(cfg.synthetic.num_bags));
    kv.emplace_back("positive_fraction", fmt_double(cfg.synthetic.positive_fraction));
    kv.emplace_back("volume_size", std::to_string(cfg.synthetic.volume_size));
    kv.emplace_back("centerline_points", std::to_string(cfg.synthetic.centerline_points));
    kv.emplace_back("seed", std::to_string(cfg.synthetic.seed));
    kv.emplace_back("tube_radius", fmt_double(cfg.synthetic.patterns.tube_radius));
    kv.emplace_back("smooth_intensity", fmt_double(cfg.synthetic.patterns.smooth_intensity));
    kv.emplace_back("smooth_speckle", fmt_double(cfg.synthetic.patterns.smooth_speckle));
    kv.emplace_back("artifact_dropout_intensity",
                    fmt_double(cfg.synthetic.patterns.artifact_dropout_intensity));
    kv.emplace_back("artifact_speckle", fmt_double(cfg.synthetic.patterns.artifact_speckle));
    kv.emplace_back("artifact_stripe_period",
                    std::to_string(cfg.synthetic.patterns.artifact_stripe_period));
    kv.emplace_back("artifact_stripe_on",
                    std::to_string(cfg.synthetic.patterns.artifact_stripe_on));
    kv.emplace_back("lowcontrast_intensity",
                    fmt_double(cfg.synthetic.patterns.lowcontrast_intensity));
    return kv;
}

std::string format_experiment_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    for (const auto& [k, v] : experiment_config_kv(cfg)) {
        if (v.empty() && !k.empty() && k.front() == '[') os << k << "\n";
        else os << k << " = " << v << "\n";
    }
    return os.str();
}

std::string experiment_config_hash(const ExperimentConfig& cfg) {
    const std::uint64_t h = hash_string(format_experiment_config(cfg));
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace rtn
