#include "rtn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "rtn/metrics.hpp"
#include "rtn/serialize.hpp"
#include "rtn/tmil.hpp"
#include "rtn/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rtn {
namespace {

void shuffle(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
        std::swap(v[i - 1], v[j]);
    }
}

bool both_classes(const std::vector<int>& labels) {
    bool pos = false, neg = false;
    for (int y : labels) (y ? pos : neg) = true;
    return pos && neg;
}

struct MeanStd {
    double mean = 0.0, sd = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
    MeanStd r;
    if (v.empty()) return r;
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - r.mean) * (x - r.mean);
        r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return r;
}

std::string fmt4(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << v;
    return os.str();
}

std::string fmt4(const std::optional<double>& v) { return v ? fmt4(*v) : std::string("n/a"); }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void write_text(const fs::path& path, const std::string& text) {
    atomic_write_file(path, [&](std::ostream& os) { os << text; });
}

}  // namespace

MetricsReport run_two_stage(const ExperimentConfig& config, const fs::path& out_dir,
                            std::ostream* progress) {
    const ExperimentConfig cfg = resolved(config);
    validate_experiment_config(cfg);
    fs::create_directories(out_dir);

    std::vector<Bag> bags;
    {
        auto generated = generate_synthetic_dataset(cfg.synthetic);
        bags.reserve(generated.size());
        for (auto& g : generated) bags.push_back(std::move(g.bag));
    }
    const int num_bags = static_cast<int>(bags.size());
    const auto splits = kfold_split(num_bags, cfg.k_folds, derive_seed(cfg.seed, 101));

    MetricsReport report;
    report.config_hash = experiment_config_hash(cfg);
    report.seed = cfg.seed;

    std::vector<int> pooled_pred, pooled_label, pooled_full;
    std::vector<double> pooled_score;
    double pooled_negrec = 0.0;
    int pooled_negrec_bags = 0;
    std::vector<double> fold_accs, fold_aucs;

    for (int f = 0; f < cfg.k_folds; ++f) {
        const FoldSplit& split = splits[static_cast<std::size_t>(f)];

        // stage 1: supervised backbone on random (n - m)-subsets
        TMilModel<double> model(cfg.transformer, derive_seed(cfg.seed, 200 + static_cast<std::uint64_t>(f)));
        AdamOptimizer<double> opt(model.parameters(), AdamConfig{cfg.tmil_lr});
        Rng srng(derive_seed(cfg.seed, 300 + static_cast<std::uint64_t>(f)));
        const int report_every = std::max(1, cfg.tmil_epochs / 10);
        for (int epoch = 0; epoch < cfg.tmil_epochs; ++epoch) {
            std::vector<int> order = split.train;
            shuffle(order, srng);
            double loss_sum = 0.0;
            int batches = 0;
            for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
                std::vector<const Bag*> batch;
                for (std::size_t i = b; i < order.size() && i < b + static_cast<std::size_t>(cfg.batch_size); ++i) {
                    batch.push_back(&bags[static_cast<std::size_t>(order[i])]);
                }
                loss_sum += pretrain_step(model, opt, batch, cfg.m, srng);
                ++batches;
            }
            if (progress && ((epoch + 1) % report_every == 0 || epoch + 1 == cfg.tmil_epochs)) {
                *progress << "fold " << f << " stage1 epoch " << (epoch + 1) << "/" << cfg.tmil_epochs
                          << " loss " << fmt4(loss_sum / std::max(1, batches)) << "\n";
            }
        }
        const std::string tmil_name = "tmil_fold" + std::to_string(f) + ".rtnc";
        save_checkpoint(out_dir / tmil_name, model.parameters());
        save_kv_sidecar(out_dir / ("tmil_fold" + std::to_string(f) + ".cfg"),
                        transformer_config_kv(cfg.transformer));
        report.checkpoints.push_back(tmil_name);
        model.freeze();

        // stage 2: discard agent against the frozen backbone
        const bool use_agent = cfg.m > 0 && cfg.discard_strategy == DiscardStrategy::prid;
        std::optional<AgentNetwork<double>> agent;
        if (use_agent) {
            agent.emplace(cfg.n, cfg.m, cfg.transformer.embed_dim, cfg.transformer.heads,
                          cfg.pooling_mode, derive_seed(cfg.seed, 400 + static_cast<std::uint64_t>(f)));
        }
        if (use_agent && cfg.agent_epochs > 0) {
            std::vector<std::unique_ptr<TMilJudge<double>>> judges(bags.size());
            for (int idx : split.train) {
                judges[static_cast<std::size_t>(idx)] = std::make_unique<TMilJudge<double>>(
                    model, cubes_of<double>(bags[static_cast<std::size_t>(idx)].instances));
            }
            AdamOptimizer<double> aopt(agent->parameters(), AdamConfig{cfg.agent_lr});
            Rng arng(derive_seed(cfg.seed, 500 + static_cast<std::uint64_t>(f)));
            const int agent_every = std::max(1, cfg.agent_epochs / 10);
            for (int epoch = 0; epoch < cfg.agent_epochs; ++epoch) {
                std::vector<int> order = split.train;
                shuffle(order, arng);
                double loss_sum = 0.0;
                int batches = 0;
                for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
                    std::vector<EpisodeTask<double>> tasks;
                    for (std::size_t i = b; i < order.size() && i < b + static_cast<std::size_t>(cfg.batch_size); ++i) {
                        const Bag& bag = bags[static_cast<std::size_t>(order[i])];
                        tasks.push_back(EpisodeTask<double>{
                            judges[static_cast<std::size_t>(order[i])].get(), bag.id, bag.label});
                    }
                    loss_sum += train_agent_step(*agent, aopt, tasks, cfg.m, arng);
                    ++batches;
                }
                if (progress && ((epoch + 1) % agent_every == 0 || epoch + 1 == cfg.agent_epochs)) {
                    *progress << "fold " << f << " stage2 epoch " << (epoch + 1) << "/"
                              << cfg.agent_epochs << " loss " << fmt4(loss_sum / std::max(1, batches))
                              << "\n";
                }
            }
        }
        if (use_agent) {
            const std::string agent_name = "agent_fold" + std::to_string(f) + ".rtnc";
            save_checkpoint(out_dir / agent_name, agent->parameters());
            save_kv_sidecar(out_dir / ("agent_fold" + std::to_string(f) + ".cfg"),
                            {{"n", std::to_string(cfg.n)},
                             {"m", std::to_string(cfg.m)},
                             {"embed_dim", std::to_string(cfg.transformer.embed_dim)},
                             {"heads", std::to_string(cfg.transformer.heads)},
                             {"pooling", pooling_mode_name(cfg.pooling_mode)}});
            report.checkpoints.push_back(agent_name);
        }

        // held-out evaluation on the surviving sets
        Rng erng(derive_seed(cfg.seed, 600 + static_cast<std::uint64_t>(f)));
        const BagEvaluation ev = evaluate_bags(model, agent ? &*agent : nullptr,
                                               cfg.discard_strategy, bags, split.test, cfg.n,
                                               cfg.m, erng);
        std::string log_text;
        for (const Episode& ep : ev.episodes) {
            log_text += format_episode_line(ep);
            log_text += '\n';
        }
        write_text(out_dir / ("episodes_fold" + std::to_string(f) + ".log"), log_text);

        FoldMetrics fm;
        fm.fold = f;
        fm.test_bags = static_cast<int>(split.test.size());
        fm.accuracy = ev.accuracy;
        fm.full_bag_accuracy = ev.full_bag_accuracy;
        fm.auc = ev.auc;
        fm.negative_recall = ev.negative_recall;
        report.folds.push_back(fm);
        fold_accs.push_back(fm.accuracy);
        if (fm.auc) fold_aucs.push_back(*fm.auc);
        if (progress) {
            *progress << "fold " << f << " acc " << fmt4(fm.accuracy) << " auc " << fmt4(fm.auc)
                      << " full " << fmt4(fm.full_bag_accuracy) << " neg-recall "
                      << fmt4(fm.negative_recall) << "\n";
        }

        pooled_pred.insert(pooled_pred.end(), ev.predictions.begin(), ev.predictions.end());
        pooled_label.insert(pooled_label.end(), ev.labels.begin(), ev.labels.end());
        pooled_full.insert(pooled_full.end(), ev.full_predictions.begin(),
                           ev.full_predictions.end());
        pooled_score.insert(pooled_score.end(), ev.scores.begin(), ev.scores.end());
        pooled_negrec += ev.negative_recall_sum;
        pooled_negrec_bags += ev.negative_recall_bags;
    }

    report.accuracy = accuracy(pooled_pred, pooled_label);
    report.full_bag_accuracy = accuracy(pooled_full, pooled_label);
    if (both_classes(pooled_label)) report.auc = auc(pooled_score, pooled_label);
    if (pooled_negrec_bags > 0) report.negative_recall = pooled_negrec / pooled_negrec_bags;
    const MeanStd acc_ms = mean_std(fold_accs);
    report.accuracy_mean = acc_ms.mean;
    report.accuracy_std = acc_ms.sd;
    const MeanStd auc_ms = mean_std(fold_aucs);
    report.auc_mean = auc_ms.mean;
    report.auc_std = auc_ms.sd;

    write_text(out_dir / "report.txt", format_metrics_report(report));
    write_text(out_dir / "report.json", metrics_report_json(report));
    return report;
}

std::string format_metrics_report(const MetricsReport& report) {
    std::ostringstream os;
    os << "config " << report.config_hash << "  seed " << report.seed << "\n";
    os << std::left << std::setw(8) << "fold" << std::right << std::setw(6) << "bags"
       << std::setw(10) << "acc" << std::setw(10) << "auc" << std::setw(10) << "full"
       << std::setw(12) << "neg-recall" << "\n";
    for (const FoldMetrics& fm : report.folds) {
        os << std::left << std::setw(8) << fm.fold << std::right << std::setw(6) << fm.test_bags
           << std::setw(10) << fmt4(fm.accuracy) << std::setw(10) << fmt4(fm.auc) << std::setw(10)
           << fmt4(fm.full_bag_accuracy) << std::setw(12) << fmt4(fm.negative_recall) << "\n";
    }
    os << std::left << std::setw(8) << "mean" << std::right << std::setw(6) << ""
       << std::setw(10) << fmt4(report.accuracy_mean) << std::setw(10) << fmt4(report.auc_mean)
       << std::setw(10) << "" << std::setw(12) << "" << "\n";
    os << std::left << std::setw(8) << "std" << std::right << std::setw(6) << ""
       << std::setw(10) << fmt4(report.accuracy_std) << std::setw(10) << fmt4(report.auc_std)
       << std::setw(10) << "" << std::setw(12) << "" << "\n";
    int total = 0;
    for (const FoldMetrics& fm : report.folds) total += fm.test_bags;
    os << std::left << std::setw(8) << "pooled" << std::right << std::setw(6) << total
       << std::setw(10) << fmt4(report.accuracy) << std::setw(10) << fmt4(report.auc)
       << std::setw(10) << fmt4(report.full_bag_accuracy) << std::setw(12)
       << fmt4(report.negative_recall) << "\n";
    return os.str();
}

std::string metrics_report_json(const MetricsReport& report) {
    json j;
    j["config_hash"] = report.config_hash;
    j["seed"] = report.seed;
    j["version"] = version_string();
    j["pooled"] = {{"accuracy", report.accuracy},
                   {"auc", opt_json(report.auc)},
                   {"full_bag_accuracy", report.full_bag_accuracy},
                   {"negative_recall", opt_json(report.negative_recall)}};
    j["fold_mean"] = {{"accuracy", report.accuracy_mean}, {"auc", report.auc_mean}};
    j["fold_std"] = {{"accuracy", report.accuracy_std}, {"auc", report.auc_std}};
    j["folds"] = json::array();
    for (const FoldMetrics& fm : report.folds) {
        j["folds"].push_back({{"fold", fm.fold},
                              {"test_bags", fm.test_bags},
                              {"accuracy", fm.accuracy},
                              {"auc", opt_json(fm.auc)},
                              {"full_bag_accuracy", fm.full_bag_accuracy},
                              {"negative_recall", opt_json(fm.negative_recall)}});
    }
    j["checkpoints"] = report.checkpoints;
    return j.dump(2) + "\n";
}

std::vector<AblationCell> run_ablation_grid(const ExperimentConfig& base, const std::string& axis,
                                            const fs::path& out_dir,
                                            std::vector<std::string> values,
                                            std::ostream* progress) {
    if (axis != "m" && axis != "pooling" && axis != "cube_size") {
        throw std::invalid_argument("ablation axis must be m, pooling, or cube_size (got '" +
                                    axis + "')");
    }
    if (values.empty()) {
        if (axis == "m") values = {"4", "9", "14"};
        else if (axis == "pooling") values = {"pma", "avg", "max"};
        else values = {"15", "20", "30"};
    }
    fs::create_directories(out_dir);

    std::vector<AblationCell> cells;
    for (const std::string& value : values) {
        std::vector<DiscardStrategy> strategies;
        if (axis == "m") strategies = {DiscardStrategy::prid, DiscardStrategy::random};
        else strategies = {base.discard_strategy};
        for (DiscardStrategy strategy : strategies) {
            ExperimentConfig cfg = base;
            cfg.discard_strategy = strategy;
            try {
                if (axis == "m") cfg.m = std::stoi(value);
                else if (axis == "pooling") cfg.pooling_mode = pooling_mode_from_name(value);
                else cfg.cube_size = std::stoi(value);
            } catch (const std::exception& e) {
                throw std::invalid_argument("ablation value '" + value + "' for axis " + axis +
                                            ": " + e.what());
            }
            const std::string cell_name =
                axis + "_" + value + "_" + discard_strategy_name(strategy);
            if (progress) *progress << "ablation cell " << cell_name << "\n";
            AblationCell cell;
            cell.axis = axis;
            cell.value = value;
            cell.strategy = strategy;
            cell.report = run_two_stage(cfg, out_dir / cell_name, progress);
            cells.push_back(std::move(cell));
        }
    }

    write_text(out_dir / "ablation.txt", format_ablation_table(cells));
    json j = json::array();
    for (const AblationCell& cell : cells) {
        j.push_back({{"axis", cell.axis},
                     {"value", cell.value},
                     {"strategy", discard_strategy_name(cell.strategy)},
                     {"config_hash", cell.report.config_hash},
                     {"seed", cell.report.seed},
                     {"accuracy", cell.report.accuracy},
                     {"auc", opt_json(cell.report.auc)},
                     {"full_bag_accuracy", cell.report.full_bag_accuracy},
                     {"negative_recall", opt_json(cell.report.negative_recall)}});
    }
    write_text(out_dir / "ablation.json", j.dump(2) + "\n");
    return cells;
}

std::string format_ablation_table(const std::vector<AblationCell>& cells) {
    std::ostringstream os;
    os << std::left << std::setw(11) << "axis" << std::setw(8) << "value" << std::setw(10)
       << "strategy" << std::right << std::setw(10) << "acc" << std::setw(10) << "auc"
       << std::setw(10) << "full" << std::setw(12) << "neg-recall" << "\n";
    for (const AblationCell& cell : cells) {
        os << std::left << std::setw(11) << cell.axis << std::setw(8) << cell.value
           << std::setw(10) << discard_strategy_name(cell.strategy) << std::right << std::setw(10)
           << fmt4(cell.report.accuracy) << std::setw(10) << fmt4(cell.report.auc) << std::setw(10)
           << fmt4(cell.report.full_bag_accuracy) << std::setw(12)
           << fmt4(cell.report.negative_recall) << "\n";
    }
    return os.str();
}

IndexDistribution index_distribution(const std::vector<Episode>& episodes, int n) {
    if (n < 1) throw std::invalid_argument("index_distribution: n must be >= 1");
    IndexDistribution dist;
    dist.n = n;
    dist.reserved_correct.assign(static_cast<std::size_t>(n), 0);
    dist.discarded_correct.assign(static_cast<std::size_t>(n), 0);
    dist.reserved_wrong.assign(static_cast<std::size_t>(n), 0);
    dist.discarded_wrong.assign(static_cast<std::size_t>(n), 0);
    // the discarded set comes from the recorded actions so parsed log lines
    // (which do not carry the surviving list) count the same way as live ones
    for (const Episode& ep : episodes) {
        const bool correct = ep.final_prediction == ep.label;
        auto& reserved = correct ? dist.reserved_correct : dist.reserved_wrong;
        auto& discarded = correct ? dist.discarded_correct : dist.discarded_wrong;
        (correct ? dist.episodes_correct : dist.episodes_wrong) += 1;
        std::vector<char> dropped(static_cast<std::size_t>(n), 0);
        for (const EpisodeStep& step : ep.steps) {
            const int i = step.action_original_index;
            if (i < 0 || i >= n) {
                throw std::invalid_argument("index_distribution: discarded index " +
                                            std::to_string(i) + " outside [0, n)");
            }
            if (dropped[static_cast<std::size_t>(i)]) {
                throw std::invalid_argument("index_distribution: index " + std::to_string(i) +
                                            " discarded twice in one episode");
            }
            dropped[static_cast<std::size_t>(i)] = 1;
        }
        for (int i = 0; i < n; ++i) {
            if (dropped[static_cast<std::size_t>(i)]) ++discarded[static_cast<std::size_t>(i)];
            else ++reserved[static_cast<std::size_t>(i)];
        }
    }
    return dist;
}

namespace {

void format_stratum(std::ostringstream& os, const char* title, long long episodes,
                    const std::vector<long long>& reserved,
                    const std::vector<long long>& discarded) {
    os << title << " (" << episodes << " episodes)\n";
    if (episodes == 0) {
        os << "  (no episodes in this stratum)\n";
        return;
    }
    os << "  index  reserved  discarded  reserved-share\n";
    for (std::size_t i = 0; i < reserved.size(); ++i) {
        const long long total = reserved[i] + discarded[i];
        const double share = total > 0 ? static_cast<double>(reserved[i]) / static_cast<double>(total) : 0.0;
        const int bar = static_cast<int>(std::lround(share * 24));
        os << "  " << std::right << std::setw(5) << i << std::setw(10) << reserved[i]
           << std::setw(11) << discarded[i] << "  " << std::string(static_cast<std::size_t>(bar), '#')
           << "\n";
    }
}

}  // namespace

std::string index_distribution_report(const std::vector<Episode>& episodes, int n) {
    const IndexDistribution dist = index_distribution(episodes, n);
    std::ostringstream os;
    os << "index distribution over " << episodes.size() << " episodes (n = " << n << ")\n";
    format_stratum(os, "correctly predicted", dist.episodes_correct, dist.reserved_correct,
                   dist.discarded_correct);
    format_stratum(os, "wrongly predicted", dist.episodes_wrong, dist.reserved_wrong,
                   dist.discarded_wrong);
    return os.str();
}

}  // namespace rtn
