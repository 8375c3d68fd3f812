#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "rtn/serialize.hpp"
#include "rtn/tmil.hpp"

using namespace rtn;

namespace {

TransformerConfig small_cfg() {
    TransformerConfig cfg;
    cfg.embed_dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.mlp_hidden = 12;
    cfg.max_instances = 8;
    cfg.extractor_c1 = 4;
    cfg.extractor_c2 = 6;
    return cfg;
}

template <typename T>
std::vector<Tensor<T>> random_cubes(int count, int side, Rng& rng) {
    std::vector<Tensor<T>> cubes;
    for (int i = 0; i < count; ++i) {
        cubes.push_back(Tensor<T>::randn({1, side, side, side}, rng, T(0.5)));
    }
    return cubes;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("tmil config validation") {
    TransformerConfig cfg;
    CHECK_NOTHROW(validate_config(cfg));
    cfg.heads = 5;  // 32 % 5 != 0
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = TransformerConfig{};
    cfg.embed_dim = 0;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = TransformerConfig{};
    cfg.layers = -1;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
}

TEST_CASE("tmil config sidecar round trip") {
    TransformerConfig cfg = small_cfg();
    cfg.use_positional = true;
    const auto kv = transformer_config_kv(cfg);
    const TransformerConfig back = transformer_config_from_kv(kv);
    CHECK(back.embed_dim == cfg.embed_dim);
    CHECK(back.layers == cfg.layers);
    CHECK(back.heads == cfg.heads);
    CHECK(back.mlp_hidden == cfg.mlp_hidden);
    CHECK(back.use_positional == cfg.use_positional);
    CHECK(back.max_instances == cfg.max_instances);
    CHECK(back.extractor_c1 == cfg.extractor_c1);
    CHECK(back.extractor_c2 == cfg.extractor_c2);

    CHECK_THROWS_AS(transformer_config_from_kv({{"embed_dims", "32"}}), std::invalid_argument);
    CHECK_THROWS_AS(transformer_config_from_kv({{"embed_dim", "abc"}}), std::invalid_argument);
}

TEST_CASE("tmil output shapes at reference sizes") {
    TransformerConfig cfg;  // defaults: D=32, L=2, H=4
    TMilModel<float> model(cfg, 11);
    Rng rng(7);
    auto cubes = random_cubes<float>(19, 20, rng);
    auto feats = model.extract_features(cubes);
    CHECK(feats.shape() == Shape{19, 32});

    auto out = model.aggregate(feats);
    CHECK(out.logits.shape() == Shape{1, 2});
    CHECK(out.probabilities.shape() == Shape{1, 2});
    CHECK(out.quality_embedding.shape() == Shape{32});
    CHECK(out.instance_embeddings.shape() == Shape{19, 32});
    CHECK(out.probabilities.data()[0] + out.probabilities.data()[1] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(out.prob_positive == out.probabilities.data()[1]);
    CHECK((out.predicted_label == 0 || out.predicted_label == 1));
    CHECK(out.predicted_label == (out.logits.data()[1] > out.logits.data()[0] ? 1 : 0));
}

TEST_CASE("feature rows depend only on their own instance") {
    TMilModel<float> model(small_cfg(), 3);
    Rng rng(5);
    auto cube = Tensor<float>::randn({1, 8, 8, 8}, rng, 0.5f);
    std::vector<Tensor<float>> same{cube, cube, cube, cube};
    auto feats = model.extract_features(same);
    const int D = model.config().embed_dim;
    for (int r = 1; r < 4; ++r) {
        for (int c = 0; c < D; ++c) {
            CHECK(feats.data()[static_cast<std::size_t>(r * D + c)] ==
                  feats.data()[static_cast<std::size_t>(c)]);
        }
    }

    // perturb one instance; only its row moves
    auto other = Tensor<float>::randn({1, 8, 8, 8}, rng, 0.5f);
    std::vector<Tensor<float>> mixed{cube, cube, other, cube};
    auto feats2 = model.extract_features(mixed);
    bool row2_changed = false;
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < D; ++c) {
            const auto i = static_cast<std::size_t>(r * D + c);
            if (r == 2) {
                row2_changed = row2_changed || feats2.data()[i] != feats.data()[i];
            } else {
                CHECK(feats2.data()[i] == feats.data()[i]);
            }
        }
    }
    CHECK(row2_changed);
}

TEST_CASE("heterogeneous instance shapes are rejected") {
    TMilModel<float> model(small_cfg(), 3);
    Rng rng(5);
    std::vector<Tensor<float>> bad{Tensor<float>::randn({1, 8, 8, 8}, rng),
                                   Tensor<float>::randn({1, 9, 9, 9}, rng)};
    CHECK_THROWS_AS(model.extract_features(bad), std::invalid_argument);

    std::vector<Tensor<float>> two_channel{Tensor<float>::randn({2, 8, 8, 8}, rng)};
    CHECK_THROWS_AS(model.extract_features(two_channel), std::invalid_argument);

    std::vector<Tensor<float>> none;
    CHECK_THROWS_AS(model.extract_features(none), std::invalid_argument);
    CHECK_THROWS_AS(tmil_forward(model, none), std::invalid_argument);
}

TEST_CASE("bag output is invariant to instance order") {
    TransformerConfig cfg = small_cfg();
    cfg.layers = 2;
    TMilModel<double> model(cfg, 17);
    Rng rng(23);
    auto feats = Tensor<double>::randn({5, cfg.embed_dim}, rng);

    auto base = model.aggregate(feats);

    const std::vector<int> perm{3, 0, 4, 2, 1};
    std::vector<double> pd;
    for (int r : perm) {
        auto row = feats.data().subspan(static_cast<std::size_t>(r * cfg.embed_dim),
                                        static_cast<std::size_t>(cfg.embed_dim));
        pd.insert(pd.end(), row.begin(), row.end());
    }
    auto permuted = model.aggregate(Tensor<double>::from_data({5, cfg.embed_dim}, std::move(pd)));

    CHECK(std::abs(base.logits.data()[0] - permuted.logits.data()[0]) < 1e-12);
    CHECK(std::abs(base.logits.data()[1] - permuted.logits.data()[1]) < 1e-12);
    for (int d = 0; d < cfg.embed_dim; ++d) {
        CHECK(std::abs(base.quality_embedding.data()[static_cast<std::size_t>(d)] -
                       permuted.quality_embedding.data()[static_cast<std::size_t>(d)]) < 1e-12);
    }
    // instance embeddings follow the permutation
    for (int r = 0; r < 5; ++r) {
        for (int d = 0; d < cfg.embed_dim; ++d) {
            const double got = permuted.instance_embeddings.data()[static_cast<std::size_t>(r * cfg.embed_dim + d)];
            const double want = base.instance_embeddings.data()[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)] * cfg.embed_dim + d)];
            CHECK(std::abs(got - want) < 1e-12);
        }
    }
}

TEST_CASE("positional table is optional and bounded") {
    TransformerConfig cfg = small_cfg();
    cfg.use_positional = true;
    cfg.max_instances = 4;
    TMilModel<double> model(cfg, 9);
    Rng rng(2);
    auto feats_ok = Tensor<double>::randn({4, cfg.embed_dim}, rng);
    CHECK_NOTHROW(model.aggregate(feats_ok));
    auto feats_over = Tensor<double>::randn({5, cfg.embed_dim}, rng);
    CHECK_THROWS_AS(model.aggregate(feats_over), std::invalid_argument);

    // zero-initialized table: outputs match the positional-free model at the
    // same seed (the extra zero parameter consumes no rng draws at build time
    // because zeros bypass the generator)
    TransformerConfig plain = cfg;
    plain.use_positional = false;
    TMilModel<double> model2(plain, 9);
    auto a = model.aggregate(feats_ok);
    auto b = model2.aggregate(feats_ok);
    CHECK(a.logits.data()[0] == b.logits.data()[0]);
    CHECK(a.logits.data()[1] == b.logits.data()[1]);

    // a nonzero table breaks permutation invariance
    for (auto& p : model.parameters()) {
        if (p.name == "positional") {
            auto d = p.value.mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.05 * static_cast<double>(i % 7);
        }
    }
    std::vector<double> rev;
    for (int r = 3; r >= 0; --r) {
        auto row = feats_ok.data().subspan(static_cast<std::size_t>(r * cfg.embed_dim),
                                           static_cast<std::size_t>(cfg.embed_dim));
        rev.insert(rev.end(), row.begin(), row.end());
    }
    auto out_fwd = model.aggregate(feats_ok);
    auto out_rev = model.aggregate(Tensor<double>::from_data({4, cfg.embed_dim}, std::move(rev)));
    CHECK(std::abs(out_fwd.logits.data()[1] - out_rev.logits.data()[1]) > 1e-9);
}

TEST_CASE("zero encoder layers reduce to head on the quality token") {
    TransformerConfig cfg = small_cfg();
    cfg.layers = 0;
    TMilModel<double> model(cfg, 31);
    Rng rng(4);
    auto feats = Tensor<double>::randn({3, cfg.embed_dim}, rng);
    auto out = model.aggregate(feats);

    const Parameter<double>* token = nullptr;
    const Parameter<double>* hw = nullptr;
    const Parameter<double>* hb = nullptr;
    for (const auto& p : model.parameters()) {
        if (p.name == "quality_token") token = &p;
        if (p.name == "head.weight") hw = &p;
        if (p.name == "head.bias") hb = &p;
    }
    REQUIRE(token != nullptr);
    REQUIRE(hw != nullptr);
    REQUIRE(hb != nullptr);

    for (int d = 0; d < cfg.embed_dim; ++d) {
        CHECK(out.quality_embedding.data()[static_cast<std::size_t>(d)] ==
              token->value.data()[static_cast<std::size_t>(d)]);
    }
    for (int c = 0; c < 2; ++c) {
        long double acc = hb->value.data()[static_cast<std::size_t>(c)];
        for (int d = 0; d < cfg.embed_dim; ++d) {
            acc += static_cast<long double>(token->value.data()[static_cast<std::size_t>(d)]) *
                   static_cast<long double>(hw->value.data()[static_cast<std::size_t>(d * 2 + c)]);
        }
        CHECK(out.logits.data()[static_cast<std::size_t>(c)] ==
              doctest::Approx(static_cast<double>(acc)).epsilon(1e-12));
    }
}

TEST_CASE("same seed gives bitwise identical outputs") {
    TransformerConfig cfg = small_cfg();
    Rng data_rng(77);
    auto cubes = random_cubes<double>(3, 8, data_rng);

    TMilModel<double> m1(cfg, 123);
    TMilModel<double> m2(cfg, 123);
    auto o1 = m1.forward(cubes);
    auto o2 = m2.forward(cubes);
    CHECK(o1.logits.data()[0] == o2.logits.data()[0]);
    CHECK(o1.logits.data()[1] == o2.logits.data()[1]);

    TMilModel<double> m3(cfg, 124);
    auto o3 = m3.forward(cubes);
    CHECK(o1.logits.data()[1] != o3.logits.data()[1]);
}

TEST_CASE("gradient reaches every parameter") {
    TransformerConfig cfg = small_cfg();
    TMilModel<double> model(cfg, 41);
    std::vector<double> norms(model.parameters().size(), 0.0);
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        zero_grad(model.parameters());
        auto cubes = random_cubes<double>(3, 8, rng);
        auto out = model.forward(cubes);
        std::vector<int> label{trial % 2};
        auto loss = cross_entropy_logits(out.logits, label);
        loss.backward();
        for (std::size_t i = 0; i < model.parameters().size(); ++i) {
            const auto& p = model.parameters()[i].value;
            if (!p.has_grad()) continue;
            for (double g : p.grad()) norms[i] += std::abs(g);
        }
    }
    for (std::size_t i = 0; i < norms.size(); ++i) {
        INFO("parameter ", model.parameters()[i].name);
        CHECK(norms[i] > 0.0);
    }
}

TEST_CASE("frozen model builds no graph") {
    TMilModel<float> model(small_cfg(), 8);
    model.freeze();
    Rng rng(1);
    auto cubes = random_cubes<float>(2, 8, rng);
    auto out = model.forward(cubes);
    CHECK_FALSE(out.logits.requires_grad());
    CHECK(out.logits.node()->parents.empty());
    model.unfreeze();
    auto out2 = model.forward(cubes);
    CHECK(out2.logits.requires_grad());
}

TEST_CASE("random subsets are uniform and ordered") {
    Rng rng(99);
    const int n = 19, m = 14;
    std::vector<int> hits(n, 0);
    for (int trial = 0; trial < 1000; ++trial) {
        auto subset = draw_subset(n, m, rng);
        REQUIRE(subset.size() == static_cast<std::size_t>(n - m));
        CHECK(std::is_sorted(subset.begin(), subset.end()));
        CHECK(std::adjacent_find(subset.begin(), subset.end()) == subset.end());
        for (int j : subset) {
            REQUIRE(j >= 0);
            REQUIRE(j < n);
            ++hits[static_cast<std::size_t>(j)];
        }
    }
    // each index is kept with p = (n-m)/n; 3 sigma band around 1000p
    const double p = static_cast<double>(n - m) / n;
    const double sigma = std::sqrt(1000.0 * p * (1.0 - p));
    for (int j = 0; j < n; ++j) {
        CHECK(hits[static_cast<std::size_t>(j)] > 1000.0 * p - 3.0 * sigma);
        CHECK(hits[static_cast<std::size_t>(j)] < 1000.0 * p + 3.0 * sigma);
    }

    CHECK_THROWS_AS(draw_subset(5, 5, rng), std::invalid_argument);
    CHECK_THROWS_AS(draw_subset(5, -1, rng), std::invalid_argument);
    auto full = draw_subset(5, 0, rng);
    CHECK(full == std::vector<int>{0, 1, 2, 3, 4});
}

TEST_CASE("pretrain step validates its arguments") {
    TMilModel<float> model(small_cfg(), 2);
    AdamOptimizer<float> opt(model.parameters(), {});
    Rng rng(3);

    SyntheticSpec spec;
    spec.n = 4;
    spec.cube_size = 8;
    spec.num_informative = 4;
    spec.num_bags = 2;
    spec.positive_fraction = 0.5;
    spec.volume_size = 24;
    spec.centerline_points = 8;
    auto data = generate_synthetic_dataset(spec);
    std::vector<const Bag*> batch{&data[0].bag, &data[1].bag};

    CHECK_THROWS_AS(pretrain_step(model, opt, {}, 0, rng), std::invalid_argument);
    CHECK_THROWS_AS(pretrain_step(model, opt, batch, 4, rng), std::invalid_argument);
    CHECK_THROWS_AS(pretrain_step(model, opt, batch, -1, rng), std::invalid_argument);
    const float loss = pretrain_step(model, opt, batch, 1, rng);
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0f);
}

TEST_CASE("pretraining fits a small synthetic set") {
    SyntheticSpec spec;
    spec.n = 7;
    spec.cube_size = 12;
    spec.num_informative = 7;
    spec.num_bags = 24;
    spec.positive_fraction = 0.5;
    spec.volume_size = 40;
    spec.centerline_points = 16;
    spec.seed = 5;
    auto data = generate_synthetic_dataset(spec);

    TransformerConfig cfg;
    cfg.embed_dim = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.mlp_hidden = 24;
    cfg.max_instances = spec.n;
    cfg.extractor_c1 = 4;
    cfg.extractor_c2 = 8;
    TMilModel<float> model(cfg, 21);
    AdamConfig acfg;
    acfg.lr = 1e-3f;
    AdamOptimizer<float> opt(model.parameters(), acfg);
    Rng rng(33);

    auto train_accuracy = [&]() {
        int hits = 0;
        for (const auto& g : data) {
            auto out = model.forward(cubes_of<float>(g.bag.instances));
            if (out.predicted_label == g.bag.label) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(data.size());
    };

    double acc = 0.0;
    for (int epoch = 0; epoch < 40; ++epoch) {
        std::vector<int> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(i))]);
        }
        for (std::size_t b = 0; b + 2 <= order.size(); b += 2) {
            std::vector<const Bag*> batch{&data[static_cast<std::size_t>(order[b])].bag,
                                          &data[static_cast<std::size_t>(order[b + 1])].bag};
            pretrain_step(model, opt, batch, 2, rng);
        }
        if (epoch >= 9 && (epoch + 1) % 5 == 0) {
            acc = train_accuracy();
            if (acc >= 0.95) break;
        }
    }
    CHECK(acc >= 0.95);
}

TEST_CASE("checkpoint and sidecar restore an identical model") {
    TransformerConfig cfg = small_cfg();
    cfg.use_positional = true;
    TMilModel<double> model(cfg, 55);
    // make the positional table matter
    for (auto& p : model.parameters()) {
        if (p.name == "positional") {
            auto d = p.value.mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.01 * static_cast<double>(i);
        }
    }

    const auto ckpt = temp_path("tmil_roundtrip.rtnc");
    const auto side = temp_path("tmil_roundtrip.rtnc.meta");
    save_checkpoint(ckpt, model.parameters());
    save_kv_sidecar(side, transformer_config_kv(model.config()));

    TMilModel<double> restored(transformer_config_from_kv(load_kv_sidecar(side)), 999);
    load_checkpoint(ckpt, restored.parameters());

    Rng rng(12);
    auto cubes = random_cubes<double>(4, 8, rng);
    auto a = model.forward(cubes);
    auto b = restored.forward(cubes);
    CHECK(a.logits.data()[0] == b.logits.data()[0]);
    CHECK(a.logits.data()[1] == b.logits.data()[1]);

    std::filesystem::remove(ckpt);
    std::filesystem::remove(side);
}

TEST_CASE("full model gradients match finite differences") {
    TransformerConfig cfg;
    cfg.embed_dim = 4;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.mlp_hidden = 6;
    cfg.max_instances = 4;
    cfg.extractor_c1 = 2;
    cfg.extractor_c2 = 3;
    TMilModel<double> model(cfg, 71);

    Rng rng(19);
    auto cubes = random_cubes<double>(3, 6, rng);
    std::vector<int> label{1};

    std::vector<TensorD> leaves;
    for (auto& p : model.parameters()) leaves.push_back(p.value);
    const double err = oracle::max_grad_rel_err(
        leaves, [&]() { return cross_entropy_logits(model.forward(cubes).logits, label); }, 1e-5);
    CHECK(err < 1e-3);
}
