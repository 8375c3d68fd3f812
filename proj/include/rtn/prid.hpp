#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rtn/ops.hpp"
#include "rtn/optim.hpp"
#include "rtn/rng.hpp"
#include "rtn/tensor.hpp"
#include "rtn/tmil.hpp"

namespace rtn {

enum class PoolingMode { pma, avg, max };
enum class SampleMode { train, test };

inline const char* pooling_mode_name(PoolingMode mode) {
    switch (mode) {
        case PoolingMode::pma: return "pma";
        case PoolingMode::avg: return "avg";
        case PoolingMode::max: return "max";
    }
    throw std::invalid_argument("unknown pooling mode");
}

inline PoolingMode pooling_mode_from_name(const std::string& name) {
    if (name == "pma") return PoolingMode::pma;
    if (name == "avg") return PoolingMode::avg;
    if (name == "max") return PoolingMode::max;
    throw std::invalid_argument("unknown pooling mode '" + name + "' (expected pma, avg, or max)");
}

// The discarding agent: a set-pooling over the current instance embeddings
// followed by one two-layer head per iteration. Head t maps the pooled state
// to n - t + 1 logits; its output layer starts at zero so the initial policy
// is uniform.
template <typename T>
class AgentNetwork {
  public:
    AgentNetwork(int n, int m, int embed_dim, int heads, PoolingMode pooling, std::uint64_t seed)
        : n_(n), m_(m), dim_(embed_dim), heads_count_(heads), pooling_(pooling) {
        if (n < 2) throw std::invalid_argument("agent: need at least 2 instances");
        if (m < 0 || m >= n) throw std::invalid_argument("agent: need 0 <= m < n");
        if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
            throw std::invalid_argument("agent: embed_dim must be a positive multiple of heads");
        }
        Rng rng(seed);
        const int D = embed_dim;
        auto mk = [&](const std::string& name, Shape shape, double stddev) {
            Tensor<T> t = stddev == 0.0 ? Tensor<T>::zeros(shape)
                                        : Tensor<T>::randn(std::move(shape), rng, static_cast<T>(stddev));
            t.set_requires_grad(true);
            params_.push_back({name, t});
            return t;
        };
        if (pooling_ == PoolingMode::pma) {
            const double s = std::sqrt(1.0 / D);
            pma_.query = mk("agent.pma.query", {1, D}, s);
            pma_.wq = mk("agent.pma.wq", {D, D}, s);
            pma_.bq = mk("agent.pma.bq", {D}, 0.0);
            pma_.wk = mk("agent.pma.wk", {D, D}, s);
            pma_.bk = mk("agent.pma.bk", {D}, 0.0);
            pma_.wv = mk("agent.pma.wv", {D, D}, s);
            pma_.bv = mk("agent.pma.bv", {D}, 0.0);
            pma_.wo = mk("agent.pma.wo", {D, D}, s);
            pma_.bo = mk("agent.pma.bo", {D}, 0.0);
        }
        for (int t = 1; t <= m; ++t) {
            const std::string p = "agent.head." + std::to_string(t);
            Head h;
            h.fc1_w = mk(p + ".fc1.weight", {D, D}, std::sqrt(1.0 / D));
            h.fc1_b = mk(p + ".fc1.bias", {D}, 0.0);
            h.fc2_w = mk(p + ".fc2.weight", {D, n - t + 1}, 0.0);
            h.fc2_b = mk(p + ".fc2.bias", {n - t + 1}, 0.0);
            heads_.push_back(std::move(h));
        }
        check_unique_names(params_);
    }

    int instance_count() const { return n_; }
    int discard_budget() const { return m_; }
    int embed_dim() const { return dim_; }
    PoolingMode pooling() const { return pooling_; }
    ParameterList<T>& parameters() { return params_; }
    const ParameterList<T>& parameters() const { return params_; }

    // [k, D] -> [1, D]; permutation-invariant for every mode
    Tensor<T> pool(const Tensor<T>& embeddings) const {
        if (embeddings.rank() != 2 || embeddings.shape()[1] != dim_) {
            throw std::invalid_argument("pool: expected [k, " + std::to_string(dim_) + "], got " +
                                        shape_str(embeddings.shape()));
        }
        switch (pooling_) {
            case PoolingMode::avg: return mean_over_rows(embeddings);
            case PoolingMode::max: return max_over_rows(embeddings);
            case PoolingMode::pma: break;
        }
        const int dh = dim_ / heads_count_;
        auto q = add_rowwise(matmul(pma_.query, pma_.wq), pma_.bq);      // [1, D]
        auto k = add_rowwise(matmul(embeddings, pma_.wk), pma_.bk);     // [k, D]
        auto v = add_rowwise(matmul(embeddings, pma_.wv), pma_.bv);
        const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        std::vector<Tensor<T>> outs;
        outs.reserve(static_cast<std::size_t>(heads_count_));
        for (int h = 0; h < heads_count_; ++h) {
            auto qh = slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = slice_cols(v, h * dh, (h + 1) * dh);
            auto attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), -1);  // [1, k]
            outs.push_back(matmul(attn, vh));
        }
        return add_rowwise(matmul(concat_cols(std::span<const Tensor<T>>(outs)), pma_.wo), pma_.bo);
    }

    // P_t over the surviving instances; the state's row count must match
    // head t's output extent exactly
    Tensor<T> policy(const Tensor<T>& state, int t) const {
        if (t < 1 || t > m_) {
            throw std::invalid_argument("policy: no head for iteration " + std::to_string(t) +
                                        " (budget " + std::to_string(m_) + ")");
        }
        const std::int64_t expect = n_ - t + 1;
        if (state.rank() != 2 || state.shape()[0] != expect || state.shape()[1] != dim_) {
            throw std::invalid_argument("policy: iteration " + std::to_string(t) + " expects [" +
                                        std::to_string(expect) + ", " + std::to_string(dim_) +
                                        "] state, got " + shape_str(state.shape()));
        }
        const Head& h = heads_[static_cast<std::size_t>(t - 1)];
        auto hidden = relu(add_rowwise(matmul(pool(state), h.fc1_w), h.fc1_b));
        auto logits = add_rowwise(matmul(hidden, h.fc2_w), h.fc2_b);  // [1, n-t+1]
        return reshape(softmax(logits, -1), {expect});
    }

  private:
    struct Pma {
        Tensor<T> query, wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct Head {
        Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
    };

    int n_, m_, dim_, heads_count_;
    PoolingMode pooling_;
    Pma pma_;
    std::vector<Head> heads_;
    ParameterList<T> params_;
};

template <typename T>
int sample_action(std::span<const T> probabilities, SampleMode mode, Rng& rng) {
    if (probabilities.empty()) throw std::invalid_argument("sample_action: empty distribution");
    if (mode == SampleMode::test) {
        int best = 0;
        for (int i = 1; i < static_cast<int>(probabilities.size()); ++i) {
            if (probabilities[static_cast<std::size_t>(i)] > probabilities[static_cast<std::size_t>(best)]) best = i;
        }
        return best;
    }
    const double u = rng.uniform();
    double cum = 0.0;
    for (int i = 0; i < static_cast<int>(probabilities.size()); ++i) {
        cum += static_cast<double>(probabilities[static_cast<std::size_t>(i)]);
        if (u < cum) return i;
    }
    return static_cast<int>(probabilities.size()) - 1;  // fp slack
}

// t = 1 has no previous prediction: +1 / -1 on the current one. Later
// iterations follow the four-case table over (current, previous) correctness.
inline int compute_reward(int y_t, std::optional<bool> prev_correct, int label) {
    const bool correct = y_t == label;
    if (!prev_correct.has_value()) return correct ? 1 : -1;
    if (correct) return *prev_correct ? 2 : 1;
    return *prev_correct ? -1 : -2;
}

struct EpisodeStep {
    std::vector<double> probabilities;  // P_t snapshot
    int action_position = 0;            // index within the surviving list
    int action_original_index = 0;      // bag-level index discarded
    int reward = 0;
    int prediction = 0;                 // y_t, after the discard
};

struct Episode {
    std::string bag_id;
    int label = 0;
    std::vector<EpisodeStep> steps;
    std::vector<int> surviving;  // original indices, strictly increasing
    int final_prediction = 0;
};

// Training-time companion to an Episode: the picked probabilities P_t[k_t]
// as live graph nodes, so the policy loss can reach the agent.
template <typename T>
struct Rollout {
    Episode episode;
    std::vector<Tensor<T>> picked;
};

// What a rollout needs from the classifier: embeddings (the state) and a hard
// prediction for any surviving subset. Tests substitute hand-rolled oracles.
template <typename T>
class InstanceSetJudge {
  public:
    virtual ~InstanceSetJudge() = default;
    virtual std::pair<Tensor<T>, int> evaluate(std::span<const int> surviving) = 0;
};

// Frozen-backbone judge. Instance features are extracted once; each subset
// evaluation reruns only the aggregator.
template <typename T>
class TMilJudge final : public InstanceSetJudge<T> {
  public:
    TMilJudge(const TMilModel<T>& model, const std::vector<Tensor<T>>& cubes)
        : TMilJudge(model, model.extract_features(cubes).detach()) {}

    TMilJudge(const TMilModel<T>& model, Tensor<T> features)
        : model_(&model), features_(std::move(features)) {
        for (const auto& p : model.parameters()) {
            if (p.value.requires_grad()) {
                throw std::invalid_argument("judge requires a frozen backbone (parameter " + p.name +
                                            " still tracks gradients)");
            }
        }
        if (features_.requires_grad()) features_ = features_.detach();
    }

    std::pair<Tensor<T>, int> evaluate(std::span<const int> surviving) override {
        auto out = model_->aggregate(gather_rows(features_, surviving));
        return {out.instance_embeddings, out.predicted_label};
    }

    const Tensor<T>& features() const { return features_; }

  private:
    const TMilModel<T>* model_;
    Tensor<T> features_;
};

// One MDP episode: m progressive discards against a fixed judge. Each
// iteration pulls the policy from the previous set's embeddings, removes the
// sampled instance, and scores the new set for the reward.
template <typename T>
Rollout<T> episode_rollout(InstanceSetJudge<T>& judge, AgentNetwork<T>& agent,
                           const std::string& bag_id, int label, int m, SampleMode mode, Rng& rng) {
    const int n = agent.instance_count();
    if (m < 0 || m >= n) throw std::invalid_argument("episode_rollout: need 0 <= m < n");
    if (m > agent.discard_budget()) {
        throw std::invalid_argument("episode_rollout: m " + std::to_string(m) +
                                    " exceeds the agent budget " + std::to_string(agent.discard_budget()));
    }
    Rollout<T> rollout;
    rollout.episode.bag_id = bag_id;
    rollout.episode.label = label;

    std::vector<int> active(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = i;

    if (m == 0) {
        rollout.episode.surviving = active;
        rollout.episode.final_prediction = judge.evaluate(active).second;
        return rollout;
    }

    Tensor<T> state = judge.evaluate(active).first;  // Y_L(0)
    std::optional<bool> prev_correct;
    for (int t = 1; t <= m; ++t) {
        Tensor<T> p = agent.policy(state, t);
        const int k = sample_action<T>(p.data(), mode, rng);
        EpisodeStep step;
        step.probabilities.assign(p.data().begin(), p.data().end());
        step.action_position = k;
        step.action_original_index = active[static_cast<std::size_t>(k)];
        active.erase(active.begin() + k);

        auto [next_state, y] = judge.evaluate(active);
        step.prediction = y;
        step.reward = compute_reward(y, prev_correct, label);
        prev_correct = y == label;

        rollout.picked.push_back(pick(p, k));
        rollout.episode.steps.push_back(std::move(step));
        state = next_state;
    }
    rollout.episode.surviving = active;
    rollout.episode.final_prediction = rollout.episode.steps.back().prediction;
    return rollout;
}

// Uniform random discarding, same bookkeeping; the baseline strategy.
template <typename T>
Episode episode_rollout_random(InstanceSetJudge<T>& judge, const std::string& bag_id, int label,
                               int n, int m, Rng& rng) {
    if (n < 1 || m < 0 || m >= n) throw std::invalid_argument("episode_rollout_random: need 0 <= m < n");
    Episode episode;
    episode.bag_id = bag_id;
    episode.label = label;
    std::vector<int> active(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = i;

    std::optional<bool> prev_correct;
    for (int t = 1; t <= m; ++t) {
        const int k = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(active.size())));
        EpisodeStep step;
        step.probabilities.assign(active.size(), 1.0 / static_cast<double>(active.size()));
        step.action_position = k;
        step.action_original_index = active[static_cast<std::size_t>(k)];
        active.erase(active.begin() + k);
        const int y = judge.evaluate(active).second;
        step.prediction = y;
        step.reward = compute_reward(y, prev_correct, label);
        prev_correct = y == label;
        episode.steps.push_back(std::move(step));
    }
    episode.surviving = active;
    episode.final_prediction = m == 0 ? judge.evaluate(active).second : episode.steps.back().prediction;
    return episode;
}

// loss = -sum_t log(P_t[k_t]) * R_t; `baseline` is an optional constant
// subtracted from every reward (defaults to none).
template <typename T>
Tensor<T> reinforce_loss(const Rollout<T>& rollout, double baseline = 0.0) {
    if (rollout.picked.empty()) throw std::invalid_argument("reinforce_loss: episode has no steps");
    if (rollout.picked.size() != rollout.episode.steps.size()) {
        throw std::invalid_argument("reinforce_loss: rollout is desynchronized");
    }
    Tensor<T> total;
    for (std::size_t i = 0; i < rollout.picked.size(); ++i) {
        if (rollout.picked[i].item() == T(0)) {
            throw std::domain_error("reinforce_loss: picked probability is exactly zero");
        }
        const double r = static_cast<double>(rollout.episode.steps[i].reward) - baseline;
        auto term = scale(log(rollout.picked[i]), static_cast<T>(-r));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

// One episode environment: everything a rollout needs to run against a bag.
template <typename T>
struct EpisodeTask {
    InstanceSetJudge<T>* judge = nullptr;
    std::string bag_id;
    int label = 0;
};

// Train-mode rollouts over a batch, one optimizer step on the accumulated
// policy gradients. The judge's backbone is untouched by construction.
template <typename T>
T train_agent_step(AgentNetwork<T>& agent, AdamOptimizer<T>& opt,
                   const std::vector<EpisodeTask<T>>& batch, int m, Rng& rng,
                   bool mean_reward_baseline = false, std::vector<Episode>* episodes_out = nullptr) {
    if (batch.empty()) throw std::invalid_argument("train_agent_step: empty batch");
    if (m < 1) throw std::invalid_argument("train_agent_step: need m >= 1");
    std::vector<Rollout<T>> rollouts;
    rollouts.reserve(batch.size());
    for (const auto& task : batch) {
        rollouts.push_back(episode_rollout(*task.judge, agent, task.bag_id, task.label, m,
                                           SampleMode::train, rng));
    }
    double baseline = 0.0;
    if (mean_reward_baseline) {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& r : rollouts) {
            for (const auto& s : r.episode.steps) sum += static_cast<double>(s.reward);
            count += r.episode.steps.size();
        }
        if (count > 0) baseline = sum / static_cast<double>(count);
    }
    opt.zero_grad();
    T total = 0;
    const T inv = T(1) / static_cast<T>(batch.size());
    for (const auto& r : rollouts) {
        auto loss = scale(reinforce_loss(r, baseline), inv);
        loss.backward();
        total += loss.item();
    }
    opt.step();
    if (episodes_out) {
        for (auto& r : rollouts) episodes_out->push_back(std::move(r.episode));
    }
    return total;
}

inline std::string format_episode_line(const Episode& episode) {
    std::ostringstream os;
    os << "bag=" << episode.bag_id << " label=" << episode.label << " actions=";
    for (std::size_t i = 0; i < episode.steps.size(); ++i) {
        if (i) os << ",";
        os << episode.steps[i].action_original_index;
    }
    os << " rewards=";
    for (std::size_t i = 0; i < episode.steps.size(); ++i) {
        if (i) os << ",";
        os << episode.steps[i].reward;
    }
    os << " pred=" << episode.final_prediction;
    return os.str();
}

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s, const std::string& line) {
    std::vector<int> out;
    if (s.empty()) return out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const std::size_t comma = s.find(',', pos);
        const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw std::invalid_argument("bad episode line (integer list): " + line);
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

}  // namespace detail

// Inverse of format_episode_line. Only the logged fields are recoverable:
// per-step probabilities and positions are not part of the line format.
inline Episode parse_episode_line(const std::string& line) {
    std::istringstream is(line);
    std::string bag_tok, label_tok, actions_tok, rewards_tok, pred_tok, extra;
    if (!(is >> bag_tok >> label_tok >> actions_tok >> rewards_tok >> pred_tok) || (is >> extra)) {
        throw std::invalid_argument("bad episode line (field count): " + line);
    }
    auto strip = [&](std::string& tok, const char* key) {
        const std::string prefix = std::string(key) + "=";
        if (tok.rfind(prefix, 0) != 0) throw std::invalid_argument("bad episode line (missing " + prefix + "): " + line);
        tok.erase(0, prefix.size());
    };
    strip(bag_tok, "bag");
    strip(label_tok, "label");
    strip(actions_tok, "actions");
    strip(rewards_tok, "rewards");
    strip(pred_tok, "pred");

    Episode episode;
    episode.bag_id = bag_tok;
    const auto actions = detail::parse_int_list(actions_tok, line);
    const auto rewards = detail::parse_int_list(rewards_tok, line);
    if (actions.size() != rewards.size()) {
        throw std::invalid_argument("bad episode line (action/reward count mismatch): " + line);
    }
    try {
        episode.label = std::stoi(label_tok);
        episode.final_prediction = std::stoi(pred_tok);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad episode line (label/pred): " + line);
    }
    for (std::size_t i = 0; i < actions.size(); ++i) {
        EpisodeStep step;
        step.action_original_index = actions[i];
        step.reward = rewards[i];
        episode.steps.push_back(std::move(step));
    }
    return episode;
}

}  // namespace rtn
