#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rtn/ops.hpp"
#include "rtn/optim.hpp"
#include "rtn/pipeline.hpp"
#include "rtn/rng.hpp"
#include "rtn/tensor.hpp"

namespace rtn {

struct TransformerConfig {
    int embed_dim = 32;     // D
    int layers = 2;         // L
    int heads = 4;          // H
    int mlp_hidden = 64;
    bool use_positional = false;
    int max_instances = 19;  // positional table covers max_instances + 1 tokens
    int extractor_c1 = 8;
    int extractor_c2 = 16;
};

inline void validate_config(const TransformerConfig& cfg) {
    if (cfg.embed_dim < 1 || cfg.heads < 1 || cfg.layers < 0 || cfg.mlp_hidden < 1 ||
        cfg.max_instances < 1 || cfg.extractor_c1 < 1 || cfg.extractor_c2 < 1) {
        throw std::invalid_argument("transformer config: all sizes must be positive");
    }
    if (cfg.embed_dim % cfg.heads != 0) {
        throw std::invalid_argument("transformer config: embed_dim " + std::to_string(cfg.embed_dim) +
                                    " not divisible by heads " + std::to_string(cfg.heads));
    }
}

// sidecar form of the config, so a checkpoint can be re-opened with the
// architecture it was trained with
inline std::vector<std::pair<std::string, std::string>> transformer_config_kv(const TransformerConfig& cfg) {
    return {
        {"embed_dim", std::to_string(cfg.embed_dim)},
        {"layers", std::to_string(cfg.layers)},
        {"heads", std::to_string(cfg.heads)},
        {"mlp_hidden", std::to_string(cfg.mlp_hidden)},
        {"use_positional", cfg.use_positional ? "1" : "0"},
        {"max_instances", std::to_string(cfg.max_instances)},
        {"extractor_c1", std::to_string(cfg.extractor_c1)},
        {"extractor_c2", std::to_string(cfg.extractor_c2)},
    };
}

inline TransformerConfig transformer_config_from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
    TransformerConfig cfg;
    for (const auto& [k, v] : kv) {
        int parsed = 0;
        try {
            parsed = std::stoi(v);
        } catch (const std::exception&) {
            throw std::invalid_argument("transformer config: bad value for " + k + ": '" + v + "'");
        }
        if (k == "embed_dim") cfg.embed_dim = parsed;
        else if (k == "layers") cfg.layers = parsed;
        else if (k == "heads") cfg.heads = parsed;
        else if (k == "mlp_hidden") cfg.mlp_hidden = parsed;
        else if (k == "use_positional") cfg.use_positional = parsed != 0;
        else if (k == "max_instances") cfg.max_instances = parsed;
        else if (k == "extractor_c1") cfg.extractor_c1 = parsed;
        else if (k == "extractor_c2") cfg.extractor_c2 = parsed;
        else throw std::invalid_argument("transformer config: unknown key '" + k + "'");
    }
    validate_config(cfg);
    return cfg;
}

// casts instance cubes into the model's element type
template <typename T>
std::vector<Tensor<T>> cubes_of(const std::vector<Instance>& instances) {
    std::vector<Tensor<T>> out;
    out.reserve(instances.size());
    for (const auto& inst : instances) {
        std::vector<T> d(inst.cube.data().begin(), inst.cube.data().end());
        out.push_back(Tensor<T>::from_data(inst.cube.shape(), std::move(d)));
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> cubes_of(const std::vector<Instance>& instances, std::span<const int> subset) {
    std::vector<Tensor<T>> out;
    out.reserve(subset.size());
    for (int j : subset) {
        const auto& inst = instances[static_cast<std::size_t>(j)];
        std::vector<T> d(inst.cube.data().begin(), inst.cube.data().end());
        out.push_back(Tensor<T>::from_data(inst.cube.shape(), std::move(d)));
    }
    return out;
}

template <typename T>
struct TMilOutput {
    Tensor<T> logits;               // [1, 2]
    Tensor<T> probabilities;        // [1, 2]
    Tensor<T> quality_embedding;    // [D]
    Tensor<T> instance_embeddings;  // [k, D]
    int predicted_label = 0;        // argmax, tie broken toward class 0
    T prob_positive = T(0);
};

// Transformer-based MIL backbone: per-instance 3D-conv feature extractor,
// learnable quality token prepended to the instance embeddings, pre-norm
// encoder layers with residuals around both sublayers, linear head on the
// output quality token.
template <typename T>
class TMilModel {
  public:
    TMilModel(TransformerConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        validate_config(cfg_);
        Rng rng(seed);
        const int D = cfg_.embed_dim;
        const int c1 = cfg_.extractor_c1, c2 = cfg_.extractor_c2;

        auto mk = [&](const std::string& name, Shape shape, double stddev) {
            Tensor<T> t = stddev == 0.0 ? Tensor<T>::zeros(shape)
                                        : Tensor<T>::randn(std::move(shape), rng, static_cast<T>(stddev));
            t.set_requires_grad(true);
            params_.push_back({name, t});
            return t;
        };
        auto mk_const = [&](const std::string& name, Shape shape, T value) {
            Tensor<T> t = Tensor<T>::full(std::move(shape), value);
            t.set_requires_grad(true);
            params_.push_back({name, t});
            return t;
        };

        auto mk_block = [&](const std::string& prefix, int cin, int cout) {
            Block blk;
            blk.w1 = mk(prefix + ".conv1.weight", {cout, cin, 3, 3, 3}, std::sqrt(2.0 / (cin * 27.0)));
            blk.b1 = mk(prefix + ".conv1.bias", {cout}, 0.0);
            blk.w2 = mk(prefix + ".conv2.weight", {cout, cout, 3, 3, 3}, std::sqrt(2.0 / (cout * 27.0)));
            blk.b2 = mk(prefix + ".conv2.bias", {cout}, 0.0);
            blk.wskip = mk(prefix + ".skip.weight", {cout, cin, 1, 1, 1}, std::sqrt(2.0 / cin));
            blk.bskip = mk(prefix + ".skip.bias", {cout}, 0.0);
            return blk;
        };
        block1_ = mk_block("extractor.block1", 1, c1);
        block2_ = mk_block("extractor.block2", c1, c2);
        proj_w_ = mk("extractor.proj.weight", {c2, D}, std::sqrt(1.0 / c2));
        proj_b_ = mk("extractor.proj.bias", {D}, 0.0);

        quality_token_ = mk("quality_token", {1, D}, 0.02);

        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "encoder." + std::to_string(l);
            Layer layer;
            layer.ln1_g = mk_const(p + ".ln1.gain", {D}, T(1));
            layer.ln1_b = mk(p + ".ln1.bias", {D}, 0.0);
            layer.wq = mk(p + ".attn.wq", {D, D}, std::sqrt(1.0 / D));
            layer.bq = mk(p + ".attn.bq", {D}, 0.0);
            layer.wk = mk(p + ".attn.wk", {D, D}, std::sqrt(1.0 / D));
            layer.bk = mk(p + ".attn.bk", {D}, 0.0);
            layer.wv = mk(p + ".attn.wv", {D, D}, std::sqrt(1.0 / D));
            layer.bv = mk(p + ".attn.bv", {D}, 0.0);
            layer.wo = mk(p + ".attn.wo", {D, D}, std::sqrt(1.0 / D));
            layer.bo = mk(p + ".attn.bo", {D}, 0.0);
            layer.ln2_g = mk_const(p + ".ln2.gain", {D}, T(1));
            layer.ln2_b = mk(p + ".ln2.bias", {D}, 0.0);
            layer.fc1_w = mk(p + ".mlp.fc1.weight", {D, cfg_.mlp_hidden}, std::sqrt(1.0 / D));
            layer.fc1_b = mk(p + ".mlp.fc1.bias", {cfg_.mlp_hidden}, 0.0);
            layer.fc2_w = mk(p + ".mlp.fc2.weight", {cfg_.mlp_hidden, D}, std::sqrt(1.0 / cfg_.mlp_hidden));
            layer.fc2_b = mk(p + ".mlp.fc2.bias", {D}, 0.0);
            layers_.push_back(std::move(layer));
        }

        if (cfg_.use_positional) {
            positional_ = mk("positional", {cfg_.max_instances + 1, D}, 0.0);  // zero-init
        }

        head_w_ = mk("head.weight", {D, 2}, std::sqrt(1.0 / D));
        head_b_ = mk("head.bias", {2}, 0.0);
        check_unique_names(params_);
    }

    const TransformerConfig& config() const { return cfg_; }
    ParameterList<T>& parameters() { return params_; }
    const ParameterList<T>& parameters() const { return params_; }

    void freeze() { set_requires_grad(params_, false); }
    void unfreeze() { set_requires_grad(params_, true); }

    // row i is the embedding of cube i; rows never mix across instances
    Tensor<T> extract_features(const std::vector<Tensor<T>>& cubes) const {
        if (cubes.empty()) throw std::invalid_argument("extract_features: no instances");
        const Shape& s0 = cubes.front().shape();
        for (const auto& c : cubes) {
            if (c.shape() != s0) {
                throw std::invalid_argument("extract_features: heterogeneous cube shapes " +
                                            shape_str(s0) + " vs " + shape_str(c.shape()));
            }
        }
        if (s0.size() != 4 || s0[0] != 1) {
            throw std::invalid_argument("extract_features: cubes must be [1, d, h, w], got " + shape_str(s0));
        }
        std::vector<Tensor<T>> rows;
        rows.reserve(cubes.size());
        for (const auto& cube : cubes) {
            auto h1 = res_block(cube, block1_);
            auto h2 = res_block(h1, block2_);
            auto pooled = reshape(global_avg_pool(h2), {1, cfg_.extractor_c2});
            rows.push_back(add_rowwise(matmul(pooled, proj_w_), proj_b_));
        }
        return concat_rows(std::span<const Tensor<T>>(rows));
    }

    // Eq-2/3 style encoder pass over [quality token; features]
    TMilOutput<T> aggregate(const Tensor<T>& features) const {
        if (features.rank() != 2 || features.shape()[1] != cfg_.embed_dim) {
            throw std::invalid_argument("aggregate: features must be [k, " +
                                        std::to_string(cfg_.embed_dim) + "], got " +
                                        shape_str(features.shape()));
        }
        const std::int64_t k = features.shape()[0];
        Tensor<T> z = concat_rows<T>({quality_token_, features});
        if (cfg_.use_positional) {
            if (k > cfg_.max_instances) {
                throw std::invalid_argument("aggregate: " + std::to_string(k) +
                                            " instances exceed the positional table (max " +
                                            std::to_string(cfg_.max_instances) + ")");
            }
            z = add(z, slice_rows(positional_, 0, k + 1));
        }
        for (const auto& layer : layers_) {
            z = add(z, self_attention(layernorm(z, layer.ln1_g, layer.ln1_b), layer));
            auto m = add_rowwise(matmul(layernorm(z, layer.ln2_g, layer.ln2_b), layer.fc1_w), layer.fc1_b);
            m = add_rowwise(matmul(gelu(m), layer.fc2_w), layer.fc2_b);
            z = add(z, m);
        }
        TMilOutput<T> out;
        auto c = slice_rows(z, 0, 1);
        out.quality_embedding = reshape(c, {cfg_.embed_dim});
        out.instance_embeddings = slice_rows(z, 1, k + 1);
        out.logits = add_rowwise(matmul(c, head_w_), head_b_);
        out.probabilities = softmax(out.logits, -1);
        out.prob_positive = out.probabilities.data()[1];
        out.predicted_label = out.logits.data()[1] > out.logits.data()[0] ? 1 : 0;
        return out;
    }

    TMilOutput<T> forward(const std::vector<Tensor<T>>& cubes) const {
        if (cubes.empty()) throw std::invalid_argument("tmil_forward: empty instance subset");
        return aggregate(extract_features(cubes));
    }

  private:
    struct Block {
        Tensor<T> w1, b1, w2, b2, wskip, bskip;
    };
    struct Layer {
        Tensor<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };

    Tensor<T> res_block(const Tensor<T>& x, const Block& blk) const {
        auto h = relu(conv3d(x, blk.w1, blk.b1, 2, 1));
        h = conv3d(h, blk.w2, blk.b2, 1, 1);
        auto sk = conv3d(x, blk.wskip, blk.bskip, 2, 0);
        return relu(add(h, sk));
    }

    Tensor<T> self_attention(const Tensor<T>& x, const Layer& layer) const {
        const int D = cfg_.embed_dim, H = cfg_.heads;
        const int dh = D / H;
        auto q = add_rowwise(matmul(x, layer.wq), layer.bq);
        auto kk = add_rowwise(matmul(x, layer.wk), layer.bk);
        auto v = add_rowwise(matmul(x, layer.wv), layer.bv);
        std::vector<Tensor<T>> heads;
        heads.reserve(static_cast<std::size_t>(H));
        const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        for (int h = 0; h < H; ++h) {
            auto qh = slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = slice_cols(kk, h * dh, (h + 1) * dh);
            auto vh = slice_cols(v, h * dh, (h + 1) * dh);
            auto attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), -1);
            heads.push_back(matmul(attn, vh));
        }
        auto merged = concat_cols(std::span<const Tensor<T>>(heads));
        return add_rowwise(matmul(merged, layer.wo), layer.bo);
    }

    TransformerConfig cfg_;
    Block block1_, block2_;
    Tensor<T> proj_w_, proj_b_;
    Tensor<T> quality_token_;
    std::vector<Layer> layers_;
    Tensor<T> positional_;
    Tensor<T> head_w_, head_b_;
    ParameterList<T> params_;
};

template <typename T>
TMilOutput<T> tmil_forward(const TMilModel<T>& model, const std::vector<Tensor<T>>& cubes) {
    return model.forward(cubes);
}

// uniformly random subset of size n - m, in centerline order
inline std::vector<int> draw_subset(int n, int m, Rng& rng) {
    if (m < 0 || m >= n) throw std::invalid_argument("subset draw needs 0 <= m < n");
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    const int keep = n - m;
    for (int i = 0; i < keep; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(keep));
    std::sort(idx.begin(), idx.end());
    return idx;
}

// One optimizer step over a batch of bags: per bag, cross-entropy on a random
// (n - m)-subset; gradients accumulate across the batch. Returns mean loss.
template <typename T>
T pretrain_step(TMilModel<T>& model, AdamOptimizer<T>& opt,
                const std::vector<const Bag*>& batch, int m, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("pretrain_step: empty batch");
    opt.zero_grad();
    T total = 0;
    const T inv = T(1) / static_cast<T>(batch.size());
    for (const Bag* bag : batch) {
        const int n = static_cast<int>(bag->instances.size());
        if (m < 0 || m >= n) throw std::invalid_argument("pretrain_step: need 0 <= m < n");
        const auto subset = draw_subset(n, m, rng);
        auto out = model.forward(cubes_of<T>(bag->instances, subset));
        std::vector<int> label{bag->label};
        auto loss = scale(cross_entropy_logits(out.logits, label), inv);
        loss.backward();
        total += loss.item();
    }
    opt.step();
    return total;  // each term already carries the 1/B factor
}

}  // namespace rtn
