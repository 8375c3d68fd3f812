#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "rtn/experiment.hpp"
#include "rtn/rng.hpp"
#include "rtn/tmil.hpp"

using rtn::Episode;
using rtn::ExperimentConfig;
using rtn::MetricsReport;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* tag) {
    fs::path p = fs::temp_directory_path() /
                 ("rtn_exp_" + std::to_string(::getpid()) + "_" + tag);
    fs::remove_all(p);
    return p;
}

// Small enough that a full two-stage run finishes in a couple of seconds.
ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.n = 5;
    cfg.m = 2;
    cfg.cube_size = 8;
    cfg.k_folds = 2;
    cfg.tmil_epochs = 2;
    cfg.agent_epochs = 2;
    cfg.batch_size = 2;
    cfg.seed = 11;
    cfg.transformer.embed_dim = 8;
    cfg.transformer.layers = 1;
    cfg.transformer.heads = 2;
    cfg.transformer.mlp_hidden = 16;
    cfg.transformer.extractor_c1 = 2;
    cfg.transformer.extractor_c2 = 3;
    cfg.synthetic.num_bags = 10;
    cfg.synthetic.num_informative = 2;
    cfg.synthetic.volume_size = 32;
    cfg.synthetic.centerline_points = 16;
    cfg.synthetic.positive_fraction = 0.5;
    return cfg;
}

Episode make_episode(const std::vector<int>& discarded, int label, int prediction) {
    Episode ep;
    ep.bag_id = "b";
    ep.label = label;
    for (int i : discarded) {
        rtn::EpisodeStep step;
        step.action_original_index = i;
        ep.steps.push_back(step);
    }
    ep.final_prediction = prediction;
    return ep;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("index distribution counts reserved and discarded per stratum") {
    std::vector<Episode> eps;
    eps.push_back(make_episode({1, 3}, 1, 1));     // kept {0, 2}, correct
    eps.push_back(make_episode({0, 2, 3}, 0, 1));  // kept {1}, wrong
    const auto dist = rtn::index_distribution(eps, 4);
    CHECK(dist.episodes_correct == 1);
    CHECK(dist.episodes_wrong == 1);
    CHECK(dist.reserved_correct == std::vector<long long>{1, 0, 1, 0});
    CHECK(dist.discarded_correct == std::vector<long long>{0, 1, 0, 1});
    CHECK(dist.reserved_wrong == std::vector<long long>{0, 1, 0, 0});
    CHECK(dist.discarded_wrong == std::vector<long long>{1, 0, 1, 1});

    CHECK_THROWS_AS(rtn::index_distribution(eps, 0), std::invalid_argument);
    std::vector<Episode> bad{make_episode({4}, 1, 1)};
    CHECK_THROWS_AS(rtn::index_distribution(bad, 4), std::invalid_argument);
    std::vector<Episode> twice{make_episode({2, 2}, 1, 1)};
    CHECK_THROWS_AS(rtn::index_distribution(twice, 4), std::invalid_argument);
}

TEST_CASE("random discards keep every index near-uniformly") {
    const int n = 10, m = 4, trials = 1000;
    rtn::Rng rng(404);
    std::vector<Episode> eps;
    for (int t = 0; t < trials; ++t) {
        const std::vector<int> kept = rtn::draw_subset(n, m, rng);
        std::vector<char> is_kept(n, 0);
        for (int i : kept) is_kept[static_cast<std::size_t>(i)] = 1;
        std::vector<int> discarded;
        for (int i = 0; i < n; ++i) {
            if (!is_kept[static_cast<std::size_t>(i)]) discarded.push_back(i);
        }
        eps.push_back(make_episode(discarded, 1, 1));
    }
    const auto dist = rtn::index_distribution(eps, n);
    CHECK(dist.episodes_correct == trials);
    const double expect = trials * static_cast<double>(n - m) / n;
    const double band = 3.0 * std::sqrt(trials * 0.6 * 0.4);
    for (int i = 0; i < n; ++i) {
        CHECK(std::abs(dist.reserved_correct[static_cast<std::size_t>(i)] - expect) <= band);
        CHECK(dist.reserved_correct[static_cast<std::size_t>(i)] +
                  dist.discarded_correct[static_cast<std::size_t>(i)] ==
              trials);
    }
    const std::string report = rtn::index_distribution_report(eps, n);
    CHECK(report.find("wrongly predicted (0 episodes)") != std::string::npos);
    CHECK(report.find("(no episodes in this stratum)") != std::string::npos);
}

TEST_CASE("an oracle that always keeps the planted indices shows up as concentration") {
    const int n = 6, trials = 1000;
    std::vector<Episode> eps;
    for (int t = 0; t < trials; ++t) {
        std::vector<int> discarded;  // everything except {0, 1, 2 + (t % 4)}
        for (int i = 2; i < n; ++i) {
            if (i != 2 + (t % 4)) discarded.push_back(i);
        }
        eps.push_back(make_episode(discarded, 1, 1));
    }
    const auto dist = rtn::index_distribution(eps, n);
    CHECK(dist.reserved_correct[0] == trials);
    CHECK(dist.reserved_correct[1] == trials);
    for (int i = 2; i < n; ++i) {
        CHECK(dist.reserved_correct[static_cast<std::size_t>(i)] == trials / 4);
    }
    const std::string report = rtn::index_distribution_report(eps, n);
    CHECK(report.find("########################") != std::string::npos);  // full 24-char bar
}

TEST_CASE("two identical runs produce identical reports and artifacts") {
    const ExperimentConfig cfg = tiny_config();
    const fs::path dir1 = scratch_dir("det1");
    const fs::path dir2 = scratch_dir("det2");
    const MetricsReport r1 = rtn::run_two_stage(cfg, dir1);
    const MetricsReport r2 = rtn::run_two_stage(cfg, dir2);

    CHECK(rtn::metrics_report_json(r1) == rtn::metrics_report_json(r2));
    CHECK(slurp(dir1 / "report.json") == slurp(dir2 / "report.json"));
    CHECK(slurp(dir1 / "report.json") == rtn::metrics_report_json(r1));
    CHECK(slurp(dir1 / "episodes_fold0.log") == slurp(dir2 / "episodes_fold0.log"));

    CHECK(r1.folds.size() == 2);
    CHECK(r1.accuracy >= 0.0);
    CHECK(r1.accuracy <= 1.0);
    REQUIRE(r1.auc.has_value());
    CHECK(*r1.auc >= 0.0);
    CHECK(*r1.auc <= 1.0);
    REQUIRE(r1.negative_recall.has_value());
    CHECK(*r1.negative_recall >= 0.0);
    CHECK(*r1.negative_recall <= 1.0);
    CHECK(r1.checkpoints == std::vector<std::string>{"tmil_fold0.rtnc", "agent_fold0.rtnc",
                                                     "tmil_fold1.rtnc", "agent_fold1.rtnc"});
    for (const std::string& name : r1.checkpoints) {
        CHECK(fs::exists(dir1 / name));
        CHECK(fs::exists(dir2 / name));
    }
    CHECK(fs::exists(dir1 / "tmil_fold0.cfg"));
    CHECK(fs::exists(dir1 / "agent_fold0.cfg"));

    // episode logs parse back and carry m discards each
    std::ifstream log(dir1 / "episodes_fold1.log");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        const Episode ep = rtn::parse_episode_line(line);
        CHECK(ep.steps.size() == 2);  // the log line carries the discards only
        ++lines;
    }
    CHECK(lines == 5);

    const std::string table = rtn::format_metrics_report(r1);
    CHECK(table.find("pooled") != std::string::npos);
    CHECK(table.find(r1.config_hash) != std::string::npos);

    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("m = 0 skips the agent and scores full bags") {
    ExperimentConfig cfg = tiny_config();
    cfg.m = 0;
    cfg.agent_epochs = 0;
    const fs::path dir = scratch_dir("m0");
    const MetricsReport r = rtn::run_two_stage(cfg, dir);
    CHECK(r.accuracy == r.full_bag_accuracy);  // nothing discarded, same model pass
    CHECK_FALSE(r.negative_recall.has_value());
    CHECK(r.checkpoints == std::vector<std::string>{"tmil_fold0.rtnc", "tmil_fold1.rtnc"});
    CHECK_FALSE(fs::exists(dir / "agent_fold0.rtnc"));
    std::ifstream log(dir / "episodes_fold0.log");
    std::string line;
    REQUIRE(std::getline(log, line));
    const Episode ep = rtn::parse_episode_line(line);
    CHECK(ep.steps.empty());
    fs::remove_all(dir);
}

TEST_CASE("the random discard strategy trains no agent but still discards") {
    ExperimentConfig cfg = tiny_config();
    cfg.discard_strategy = rtn::DiscardStrategy::random;
    const fs::path dir = scratch_dir("rand");
    const MetricsReport r = rtn::run_two_stage(cfg, dir);
    CHECK(r.checkpoints == std::vector<std::string>{"tmil_fold0.rtnc", "tmil_fold1.rtnc"});
    REQUIRE(r.negative_recall.has_value());
    std::ifstream log(dir / "episodes_fold0.log");
    std::string line;
    REQUIRE(std::getline(log, line));
    const Episode ep = rtn::parse_episode_line(line);
    CHECK(ep.steps.size() == 2);
    fs::remove_all(dir);
}

TEST_CASE("ablation grid shares the seed and writes one record per cell") {
    ExperimentConfig cfg = tiny_config();
    cfg.tmil_epochs = 1;
    cfg.agent_epochs = 1;
    const fs::path dir = scratch_dir("abl");
    const auto cells = rtn::run_ablation_grid(cfg, "m", dir, {"1", "2"});
    REQUIRE(cells.size() == 4);  // two values x {prid, random}
    CHECK(cells[0].strategy == rtn::DiscardStrategy::prid);
    CHECK(cells[1].strategy == rtn::DiscardStrategy::random);
    for (const auto& cell : cells) {
        CHECK(cell.report.seed == cfg.seed);
        const fs::path cell_dir =
            dir / ("m_" + cell.value + "_" + rtn::discard_strategy_name(cell.strategy));
        CHECK(fs::exists(cell_dir / "report.json"));
    }
    // same m, different strategy: the backbone stage is seeded identically
    CHECK(cells[0].report.full_bag_accuracy == cells[1].report.full_bag_accuracy);
    CHECK(fs::exists(dir / "ablation.txt"));
    CHECK(fs::exists(dir / "ablation.json"));
    const std::string table = slurp(dir / "ablation.txt");
    CHECK(table.find("random") != std::string::npos);
    CHECK(table.find("prid") != std::string::npos);

    const auto pooling_cells = rtn::run_ablation_grid(cfg, "pooling", dir / "pool", {"avg"});
    CHECK(pooling_cells.size() == 1);
    CHECK(pooling_cells[0].strategy == rtn::DiscardStrategy::prid);

    CHECK_THROWS_AS(rtn::run_ablation_grid(cfg, "epochs", dir, {"1"}), std::invalid_argument);
    CHECK_THROWS_AS(rtn::run_ablation_grid(cfg, "m", dir, {"not_a_number"}),
                    std::invalid_argument);
    fs::remove_all(dir);
}
