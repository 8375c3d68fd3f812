#include "rtn/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rtn/experiment.hpp"
#include "rtn/serialize.hpp"
#include "rtn/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rtn {
namespace {

// Streaming FNV-1a over the file bytes; the run manifest records input
// digests so a run can be matched to the exact files it consumed.
std::string file_digest_hex(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string() + " for digest");
    std::uint64_t h = 1469598103934665603ull;
    char buf[65536];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) {
        const std::streamsize got = is.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!is) break;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

std::uint64_t parse_seed(const std::string& s, const std::string& origin) {
    if (s.empty() || s[0] == '-') {
        throw std::invalid_argument(origin + " seed must be a non-negative integer, got '" + s +
                                    "'");
    }
    std::size_t idx = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(s, &idx);
    } catch (const std::exception&) {
        throw std::invalid_argument(origin + " seed is not an integer: '" + s + "'");
    }
    if (idx != s.size()) {
        throw std::invalid_argument(origin + " seed has trailing characters: '" + s + "'");
    }
    return v;
}

// --seed beats RTN_SEED beats the config file.
std::uint64_t resolve_seed(const std::string& flag, const ExperimentConfig& cfg) {
    if (!flag.empty()) return parse_seed(flag, "--seed");
    if (const char* env = std::getenv("RTN_SEED")) return parse_seed(env, "RTN_SEED");
    return cfg.seed;
}

void write_run_manifest(const fs::path& path, const std::string& command, std::uint64_t seed,
                        const std::vector<fs::path>& inputs, const ExperimentConfig* cfg) {
    atomic_write_file(path, [&](std::ostream& os) {
        os << "command = " << command << "\n";
        os << "version = " << version_string() << "\n";
        os << "seed = " << seed << "\n";
        for (const fs::path& input : inputs) {
            os << "input = " << input.string() << " fnv1a64:" << file_digest_hex(input) << "\n";
        }
        if (cfg) {
            os << "\n# resolved configuration\n" << format_experiment_config(*cfg);
        }
    });
}

void write_text(const fs::path& path, const std::string& text) {
    atomic_write_file(path, [&](std::ostream& os) { os << text; });
}

std::vector<Bag> load_bags_checked(const fs::path& path, int n) {
    auto bags = load_bag_archive(path);
    if (bags.empty()) throw std::runtime_error(path.string() + ": archive holds no bags");
    for (const Bag& bag : bags) {
        if (static_cast<int>(bag.instances.size()) != n) {
            throw std::runtime_error(path.string() + ": bag '" + bag.id + "' has " +
                                     std::to_string(bag.instances.size()) +
                                     " instances but the config says n = " + std::to_string(n));
        }
    }
    return bags;
}

void shuffle(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
        std::swap(v[i - 1], v[j]);
    }
}

struct Args {
    std::string config;
    std::string data;
    std::string out;
    std::string tmil;
    std::string agent;
    std::string seed;
    std::string axis;
    std::string values;
    std::vector<std::string> episodes;
    int n = 19;
    int jobs = 1;
};

int cmd_generate(const Args& a) {
    ExperimentConfig cfg = load_experiment_config(a.config);
    cfg.seed = resolve_seed(a.seed, cfg);
    cfg = resolved(cfg);
    std::cerr << "generating " << cfg.synthetic.num_bags << " bags (n = " << cfg.n
              << ", cube = " << cfg.cube_size << ", seed = " << cfg.seed << ")\n";
    std::vector<Bag> bags;
    {
        auto generated = generate_synthetic_dataset(cfg.synthetic);
        bags.reserve(generated.size());
        for (auto& g : generated) bags.push_back(std::move(g.bag));
    }
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_bag_archive(out, bags);
    save_manifest(out, bags);  // per-bag listing at <out>.manifest
    write_run_manifest(fs::path(out.string() + ".meta.txt"), "generate", cfg.seed,
                       {fs::path(a.config)}, &cfg);
    std::cerr << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_pretrain(const Args& a) {
    ExperimentConfig cfg = load_experiment_config(a.config);
    cfg.seed = resolve_seed(a.seed, cfg);
    cfg = resolved(cfg);
    const auto bags = load_bags_checked(a.data, cfg.n);
    fs::create_directories(a.out);

    TMilModel<double> model(cfg.transformer, derive_seed(cfg.seed, 200));
    AdamOptimizer<double> opt(model.parameters(), AdamConfig{cfg.tmil_lr});
    Rng rng(derive_seed(cfg.seed, 300));
    std::vector<int> order(bags.size());
    for (std::size_t i = 0; i < bags.size(); ++i) order[i] = static_cast<int>(i);
    const int every = std::max(1, cfg.tmil_epochs / 10);
    double last_loss = 0.0;
    for (int epoch = 0; epoch < cfg.tmil_epochs; ++epoch) {
        shuffle(order, rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const Bag*> batch;
            for (std::size_t i = b; i < order.size() && i < b + static_cast<std::size_t>(cfg.batch_size); ++i) {
                batch.push_back(&bags[static_cast<std::size_t>(order[i])]);
            }
            loss_sum += pretrain_step(model, opt, batch, cfg.m, rng);
            ++batches;
        }
        last_loss = loss_sum / std::max(1, batches);
        if ((epoch + 1) % every == 0 || epoch + 1 == cfg.tmil_epochs) {
            std::cerr << "epoch " << (epoch + 1) << "/" << cfg.tmil_epochs << " loss "
                      << last_loss << "\n";
        }
    }
    const fs::path out(a.out);
    save_checkpoint(out / "tmil.rtnc", model.parameters());
    save_kv_sidecar(out / "tmil.cfg", transformer_config_kv(cfg.transformer));

    // training-set metrics on full bags, recorded for the run log
    model.freeze();
    std::vector<int> preds, labels;
    std::vector<double> scores;
    for (const Bag& bag : bags) {
        const auto o = model.forward(cubes_of<double>(bag.instances));
        preds.push_back(o.predicted_label);
        scores.push_back(o.prob_positive);
        labels.push_back(bag.label);
    }
    bool pos = false, neg = false;
    for (int y : labels) (y ? pos : neg) = true;
    json rec;
    rec["command"] = "pretrain";
    rec["config_hash"] = experiment_config_hash(cfg);
    rec["seed"] = cfg.seed;
    rec["bags"] = bags.size();
    rec["epochs"] = cfg.tmil_epochs;
    rec["final_epoch_mean_loss"] = last_loss;
    rec["train_accuracy"] = accuracy(preds, labels);
    rec["train_auc"] = (pos && neg) ? json(auc(scores, labels)) : json(nullptr);
    rec["checkpoint"] = "tmil.rtnc";
    write_text(out / "metrics.json", rec.dump(2) + "\n");
    write_run_manifest(out / "manifest.txt", "pretrain", cfg.seed,
                       {fs::path(a.config), fs::path(a.data)}, &cfg);
    std::cerr << "wrote " << (out / "tmil.rtnc").string() << " (train acc "
              << accuracy(preds, labels) << ")\n";
    return 0;
}

TMilModel<double> load_backbone(const fs::path& ckpt, const TransformerConfig& tcfg) {
    TMilModel<double> model(tcfg, 0);
    load_checkpoint(ckpt, model.parameters());
    model.freeze();
    return model;
}

int cmd_train_agent(const Args& a) {
    ExperimentConfig cfg = load_experiment_config(a.config);
    cfg.seed = resolve_seed(a.seed, cfg);
    cfg = resolved(cfg);
    if (cfg.m < 1) throw std::runtime_error("train-agent: config has m = 0, nothing to discard");
    if (cfg.discard_strategy != DiscardStrategy::prid) {
        throw std::runtime_error("train-agent: config selects the random strategy, no agent to train");
    }
    const auto bags = load_bags_checked(a.data, cfg.n);
    fs::create_directories(a.out);
    TMilModel<double> model = load_backbone(a.tmil, cfg.transformer);

    std::vector<std::unique_ptr<TMilJudge<double>>> judges;
    judges.reserve(bags.size());
    for (const Bag& bag : bags) {
        judges.push_back(std::make_unique<TMilJudge<double>>(model, cubes_of<double>(bag.instances)));
    }

    AgentNetwork<double> agent(cfg.n, cfg.m, cfg.transformer.embed_dim, cfg.transformer.heads,
                               cfg.pooling_mode, derive_seed(cfg.seed, 400));
    AdamOptimizer<double> opt(agent.parameters(), AdamConfig{cfg.agent_lr});
    Rng rng(derive_seed(cfg.seed, 500));
    std::vector<int> order(bags.size());
    for (std::size_t i = 0; i < bags.size(); ++i) order[i] = static_cast<int>(i);
    const int every = std::max(1, cfg.agent_epochs / 10);
    double last_loss = 0.0;
    double last_reward = 0.0;
    for (int epoch = 0; epoch < cfg.agent_epochs; ++epoch) {
        shuffle(order, rng);
        const bool last = epoch + 1 == cfg.agent_epochs;
        double loss_sum = 0.0;
        long long reward_sum = 0;
        int batches = 0, episodes = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<EpisodeTask<double>> tasks;
            for (std::size_t i = b; i < order.size() && i < b + static_cast<std::size_t>(cfg.batch_size); ++i) {
                const Bag& bag = bags[static_cast<std::size_t>(order[i])];
                tasks.push_back(EpisodeTask<double>{judges[static_cast<std::size_t>(order[i])].get(),
                                                    bag.id, bag.label});
            }
            std::vector<Episode> out_eps;
            loss_sum += train_agent_step(agent, opt, tasks, cfg.m, rng, false,
                                         last ? &out_eps : nullptr);
            for (const Episode& ep : out_eps) {
                for (const EpisodeStep& st : ep.steps) reward_sum += st.reward;
                ++episodes;
            }
            ++batches;
        }
        last_loss = loss_sum / std::max(1, batches);
        if (last && episodes > 0) last_reward = static_cast<double>(reward_sum) / episodes;
        if ((epoch + 1) % every == 0 || last) {
            std::cerr << "epoch " << (epoch + 1) << "/" << cfg.agent_epochs << " loss "
                      << last_loss << "\n";
        }
    }
    const fs::path out(a.out);
    save_checkpoint(out / "agent.rtnc", agent.parameters());
    save_kv_sidecar(out / "agent.cfg",
                    {{"n", std::to_string(cfg.n)},
                     {"m", std::to_string(cfg.m)},
                     {"embed_dim", std::to_string(cfg.transformer.embed_dim)},
                     {"heads", std::to_string(cfg.transformer.heads)},
                     {"pooling", pooling_mode_name(cfg.pooling_mode)}});
    json rec;
    rec["command"] = "train-agent";
    rec["config_hash"] = experiment_config_hash(cfg);
    rec["seed"] = cfg.seed;
    rec["bags"] = bags.size();
    rec["epochs"] = cfg.agent_epochs;
    rec["final_epoch_mean_loss"] = last_loss;
    rec["final_epoch_mean_total_reward"] = last_reward;
    rec["checkpoint"] = "agent.rtnc";
    write_text(out / "metrics.json", rec.dump(2) + "\n");
    write_run_manifest(out / "manifest.txt", "train-agent", cfg.seed,
                       {fs::path(a.config), fs::path(a.data), fs::path(a.tmil)}, &cfg);
    std::cerr << "wrote " << (out / "agent.rtnc").string() << "\n";
    return 0;
}

int cmd_evaluate(const Args& a) {
    ExperimentConfig cfg = load_experiment_config(a.config);
    cfg.seed = resolve_seed(a.seed, cfg);
    cfg = resolved(cfg);
    const auto bags = load_bags_checked(a.data, cfg.n);
    fs::create_directories(a.out);
    TMilModel<double> model = load_backbone(a.tmil, cfg.transformer);

    std::optional<AgentNetwork<double>> agent;
    if (cfg.m > 0 && cfg.discard_strategy == DiscardStrategy::prid) {
        if (a.agent.empty()) {
            throw std::runtime_error(
                "evaluate: the prid strategy with m > 0 needs --agent <checkpoint>");
        }
        agent.emplace(cfg.n, cfg.m, cfg.transformer.embed_dim, cfg.transformer.heads,
                      cfg.pooling_mode, 0);
        load_checkpoint(fs::path(a.agent), agent->parameters());
    }

    std::vector<int> indices(bags.size());
    for (std::size_t i = 0; i < bags.size(); ++i) indices[i] = static_cast<int>(i);
    Rng rng(derive_seed(cfg.seed, 600));
    const BagEvaluation ev = evaluate_bags(model, agent ? &*agent : nullptr, cfg.discard_strategy,
                                           bags, indices, cfg.n, cfg.m, rng);

    MetricsReport report;
    report.config_hash = experiment_config_hash(cfg);
    report.seed = cfg.seed;
    report.accuracy = ev.accuracy;
    report.auc = ev.auc;
    report.full_bag_accuracy = ev.full_bag_accuracy;
    report.negative_recall = ev.negative_recall;
    report.accuracy_mean = ev.accuracy;
    report.auc_mean = ev.auc.value_or(0.0);
    FoldMetrics fm;
    fm.fold = 0;
    fm.test_bags = static_cast<int>(bags.size());
    fm.accuracy = ev.accuracy;
    fm.auc = ev.auc;
    fm.full_bag_accuracy = ev.full_bag_accuracy;
    fm.negative_recall = ev.negative_recall;
    report.folds.push_back(fm);

    const fs::path out(a.out);
    std::string log_text;
    for (const Episode& ep : ev.episodes) {
        log_text += format_episode_line(ep);
        log_text += '\n';
    }
    write_text(out / "episodes.log", log_text);
    write_text(out / "report.txt", format_metrics_report(report));
    write_text(out / "report.json", metrics_report_json(report));
    std::vector<fs::path> inputs{fs::path(a.config), fs::path(a.data), fs::path(a.tmil)};
    if (!a.agent.empty()) inputs.push_back(fs::path(a.agent));
    write_run_manifest(out / "manifest.txt", "evaluate", cfg.seed, inputs, &cfg);
    std::cout << format_metrics_report(report);
    return 0;
}

int cmd_ablate(const Args& a) {
    ExperimentConfig cfg = load_experiment_config(a.config);
    cfg.seed = resolve_seed(a.seed, cfg);
    std::vector<std::string> values;
    if (!a.values.empty()) {
        std::istringstream is(a.values);
        std::string tok;
        while (std::getline(is, tok, ',')) {
            if (!tok.empty()) values.push_back(tok);
        }
        if (values.empty()) throw std::runtime_error("ablate: --values has no entries");
    }
    const auto cells = run_ablation_grid(cfg, a.axis, fs::path(a.out), values, &std::cerr);
    write_run_manifest(fs::path(a.out) / "manifest.txt", "ablate", cfg.seed,
                       {fs::path(a.config)}, &cfg);
    std::cout << format_ablation_table(cells);
    return 0;
}

int cmd_report(const Args& a) {
    std::vector<Episode> episodes;
    for (const std::string& file : a.episodes) {
        std::ifstream is(file);
        if (!is) throw std::runtime_error("cannot open episode log " + file);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            episodes.push_back(parse_episode_line(line));
        }
    }
    if (episodes.empty()) throw std::runtime_error("report: no episodes in the given logs");
    const std::string text = index_distribution_report(episodes, a.n);
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "index_distribution.txt", text);
    std::vector<fs::path> inputs;
    for (const std::string& file : a.episodes) inputs.emplace_back(file);
    std::uint64_t seed = 0;
    if (!a.seed.empty()) seed = parse_seed(a.seed, "--seed");
    write_run_manifest(fs::path(a.out) / "manifest.txt", "report", seed, inputs, nullptr);
    std::cout << text;
    return 0;
}

}  // namespace

int run_cli(std::vector<std::string> args) {
    CLI::App app{"reinforced instance discarding for vessel-level image quality assessment"};
    app.set_version_flag("--version", std::string(version_string()));
    app.require_subcommand(1);
    app.fallthrough();
    app.footer("Config file keys and their defaults (sections in brackets, bare keys belong\n"
               "to [experiment], '#' starts a comment):\n\n" +
               format_experiment_config(ExperimentConfig{}));

    Args a;
    app.add_option("--jobs", a.jobs, "fold-level workers (reserved; execution is serial)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    CLI::App* gen = app.add_subcommand("generate", "synthesize a bag archive from a config");
    gen->add_option("--spec", a.config, "experiment config file")->required();
    gen->add_option("--out", a.out, "bag archive to write (.rtnb)")->required();
    gen->add_option("--seed", a.seed, "seed override (beats RTN_SEED and the config)");

    CLI::App* pre = app.add_subcommand("pretrain", "stage 1: train the backbone on random subsets");
    pre->add_option("--data", a.data, "bag archive")->required();
    pre->add_option("--config", a.config, "experiment config file")->required();
    pre->add_option("--out", a.out, "output directory for checkpoint and records")->required();
    pre->add_option("--seed", a.seed, "seed override (beats RTN_SEED and the config)");

    CLI::App* tra = app.add_subcommand("train-agent",
                                       "stage 2: train the discard agent against a frozen backbone");
    tra->add_option("--data", a.data, "bag archive")->required();
    tra->add_option("--config", a.config, "experiment config file")->required();
    tra->add_option("--tmil", a.tmil, "stage-1 backbone checkpoint")->required();
    tra->add_option("--out", a.out, "output directory")->required();
    tra->add_option("--seed", a.seed, "seed override (beats RTN_SEED and the config)");

    CLI::App* eva = app.add_subcommand("evaluate", "score an archive with trained checkpoints");
    eva->add_option("--data", a.data, "bag archive")->required();
    eva->add_option("--config", a.config, "experiment config file")->required();
    eva->add_option("--tmil", a.tmil, "backbone checkpoint")->required();
    eva->add_option("--agent", a.agent, "agent checkpoint (needed for prid with m > 0)");
    eva->add_option("--out", a.out, "output directory")->required();
    eva->add_option("--seed", a.seed, "seed override (beats RTN_SEED and the config)");

    CLI::App* abl = app.add_subcommand("ablate", "self-contained k-fold grid over one axis");
    abl->add_option("--config", a.config, "experiment config file")->required();
    abl->add_option("--axis", a.axis, "m | pooling | cube_size")->required();
    abl->add_option("--values", a.values, "comma-separated values (default: the standard grid)");
    abl->add_option("--out", a.out, "output directory")->required();
    abl->add_option("--seed", a.seed, "seed override (beats RTN_SEED and the config)");

    CLI::App* rep = app.add_subcommand("report", "index-distribution report from episode logs");
    rep->add_option("--episodes", a.episodes, "episode log files")->required()->expected(-1);
    rep->add_option("--n", a.n, "instances per bag in the logs")->capture_default_str();
    rep->add_option("--out", a.out, "output directory")->required();
    rep->add_option("--seed", a.seed, "recorded in the manifest only");

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (!a.config.empty() && (gen->parsed() || pre->parsed() || tra->parsed() ||
                                  eva->parsed() || abl->parsed())) {
            if (!fs::exists(a.config)) {
                std::cerr << "error: config not found: " << a.config << "\n";
                return 2;
            }
        }
        if (gen->parsed()) return cmd_generate(a);
        if (pre->parsed()) return cmd_pretrain(a);
        if (tra->parsed()) return cmd_train_agent(a);
        if (eva->parsed()) return cmd_evaluate(a);
        if (abl->parsed()) return cmd_ablate(a);
        if (rep->parsed()) return cmd_report(a);
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const CorruptFileError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace rtn
