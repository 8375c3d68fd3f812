#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rtn/config.hpp"
#include "rtn/metrics.hpp"
#include "rtn/prid.hpp"
#include "rtn/tmil.hpp"

namespace rtn {

struct FoldMetrics {
    int fold = 0;
    int test_bags = 0;
    double accuracy = 0.0;  // survivors-only prediction on the held-out bags
    std::optional<double> auc;  // absent when the held-out fold is single-class
    double full_bag_accuracy = 0.0;
    std::optional<double> negative_recall;  // absent when m == 0 or no bag has known negatives
};

struct MetricsReport {
    std::string config_hash;
    std::uint64_t seed = 0;
    double accuracy = 0.0;  // pooled over every held-out bag
    std::optional<double> auc;
    double full_bag_accuracy = 0.0;
    std::optional<double> negative_recall;
    double accuracy_mean = 0.0;  // across folds
    double accuracy_std = 0.0;
    double auc_mean = 0.0;  // across folds where auc is defined
    double auc_std = 0.0;
    std::vector<FoldMetrics> folds;
    std::vector<std::string> checkpoints;  // names relative to the run directory
};

// Full two-stage run: per fold, supervised backbone pretraining on random
// (n - m)-subsets, then (for the prid strategy with m > 0) REINFORCE training
// of the discard agent against the frozen backbone. Held-out bags are scored
// on the surviving set after m test-mode discards. Writes checkpoints,
// eval-only episode logs, report.json, and report.txt under out_dir; returns
// the same report. Identical config and seed give an identical report.
MetricsReport run_two_stage(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                            std::ostream* progress = nullptr);

std::string format_metrics_report(const MetricsReport& report);
std::string metrics_report_json(const MetricsReport& report);

struct AblationCell {
    std::string axis;
    std::string value;
    DiscardStrategy strategy = DiscardStrategy::prid;
    MetricsReport report;
};

// One run per cell with a shared seed. axis is "m", "pooling", or
// "cube_size"; empty values selects the standard grid (m: 4/9/14, run under
// both discard strategies; pooling: pma/avg/max; cube_size: 15/20/30).
// Writes per-cell outputs under out_dir/<axis>_<value>_<strategy>/ plus
// ablation.txt and ablation.json at the top.
std::vector<AblationCell> run_ablation_grid(const ExperimentConfig& base, const std::string& axis,
                                            const std::filesystem::path& out_dir,
                                            std::vector<std::string> values = {},
                                            std::ostream* progress = nullptr);
std::string format_ablation_table(const std::vector<AblationCell>& cells);

// Reserved/discarded counts per original instance index, split by whether the
// final prediction was correct.
struct IndexDistribution {
    int n = 0;
    long long episodes_correct = 0;
    long long episodes_wrong = 0;
    std::vector<long long> reserved_correct, discarded_correct;
    std::vector<long long> reserved_wrong, discarded_wrong;
};

IndexDistribution index_distribution(const std::vector<Episode>& episodes, int n);
std::string index_distribution_report(const std::vector<Episode>& episodes, int n);

// One test-mode evaluation pass over a set of bags against a frozen backbone.
struct BagEvaluation {
    std::vector<Episode> episodes;
    std::vector<int> predictions, labels, full_predictions;
    std::vector<double> scores;  // positive-class probability of the surviving set
    double accuracy = 0.0;
    std::optional<double> auc;
    double full_bag_accuracy = 0.0;
    double negative_recall_sum = 0.0;  // per-bag recall terms, for pooling
    int negative_recall_bags = 0;
    std::optional<double> negative_recall;
};

// agent is required for the prid strategy with m > 0 and ignored otherwise;
// rng feeds only the random strategy (prid evaluation is argmax).
template <typename T>
BagEvaluation evaluate_bags(const TMilModel<T>& model, AgentNetwork<T>* agent,
                            DiscardStrategy strategy, const std::vector<Bag>& bags,
                            std::span<const int> indices, int n, int m, Rng& rng) {
    if (m > 0 && strategy == DiscardStrategy::prid && agent == nullptr) {
        throw std::invalid_argument("evaluate_bags: prid discards need an agent");
    }
    BagEvaluation ev;
    for (int idx : indices) {
        const Bag& bag = bags.at(static_cast<std::size_t>(idx));
        if (static_cast<int>(bag.instances.size()) != n) {
            throw std::invalid_argument("evaluate_bags: bag '" + bag.id + "' has " +
                                        std::to_string(bag.instances.size()) +
                                        " instances, expected " + std::to_string(n));
        }
        TMilJudge<T> judge(model, cubes_of<T>(bag.instances));
        const auto full_out = model.aggregate(judge.features());
        Episode ep;
        if (m == 0) {
            ep.bag_id = bag.id;
            ep.label = bag.label;
            ep.surviving.resize(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) ep.surviving[static_cast<std::size_t>(i)] = i;
            ep.final_prediction = full_out.predicted_label;
        } else if (strategy == DiscardStrategy::prid) {
            ep = episode_rollout(judge, *agent, bag.id, bag.label, m, SampleMode::test, rng)
                     .episode;
        } else {
            ep = episode_rollout_random(judge, bag.id, bag.label, n, m, rng);
        }
        const auto out = model.aggregate(gather_rows(judge.features(), ep.surviving));
        ev.predictions.push_back(ep.final_prediction);
        ev.scores.push_back(static_cast<double>(out.prob_positive));
        ev.labels.push_back(bag.label);
        ev.full_predictions.push_back(full_out.predicted_label);
        if (m > 0 && !bag.informative.empty()) {
            std::vector<char> kept(static_cast<std::size_t>(n), 0);
            for (int s : ep.surviving) kept[static_cast<std::size_t>(s)] = 1;
            int negs = 0, caught = 0;
            for (int i = 0; i < n; ++i) {
                if (!bag.informative[static_cast<std::size_t>(i)]) {
                    ++negs;
                    if (!kept[static_cast<std::size_t>(i)]) ++caught;
                }
            }
            if (negs > 0) {
                ev.negative_recall_sum += static_cast<double>(caught) / static_cast<double>(negs);
                ++ev.negative_recall_bags;
            }
        }
        ev.episodes.push_back(std::move(ep));
    }
    ev.accuracy = accuracy(ev.predictions, ev.labels);
    ev.full_bag_accuracy = accuracy(ev.full_predictions, ev.labels);
    bool pos = false, neg = false;
    for (int y : ev.labels) (y ? pos : neg) = true;
    if (pos && neg) ev.auc = auc(ev.scores, ev.labels);
    if (ev.negative_recall_bags > 0) {
        ev.negative_recall = ev.negative_recall_sum / ev.negative_recall_bags;
    }
    return ev;
}

}  // namespace rtn
