#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rtn/tensor.hpp"

namespace rtn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Parameters whose gradient buffer is untouched in
// a step are skipped entirely: their moments and step count do not advance.
template <typename T>
class AdamOptimizer {
  public:
    AdamOptimizer(ParameterList<T>& params, AdamConfig cfg = {}) : params_(&params), cfg_(cfg) {
        check_unique_names(params);
        state_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state_[i].m.assign(static_cast<std::size_t>(params[i].value.size()), T(0));
            state_[i].v.assign(static_cast<std::size_t>(params[i].value.size()), T(0));
        }
    }

    void step() {
        for (std::size_t i = 0; i < params_->size(); ++i) {
            auto& p = (*params_)[i];
            if (!p.value.requires_grad() || !p.value.has_grad()) continue;
            auto& st = state_[i];
            st.t += 1;
            const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
            const T corr1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, st.t));
            const T corr2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, st.t));
            const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
            auto g = p.value.grad();
            auto w = p.value.mutable_data();
            for (std::size_t k = 0; k < w.size(); ++k) {
                st.m[k] = b1 * st.m[k] + (T(1) - b1) * g[k];
                st.v[k] = b2 * st.v[k] + (T(1) - b2) * g[k] * g[k];
                const T mhat = st.m[k] / corr1;
                const T vhat = st.v[k] / corr2;
                w[k] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    void zero_grad() { rtn::zero_grad(*params_); }

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

  private:
    struct State {
        std::vector<T> m, v;
        std::int64_t t = 0;
    };
    ParameterList<T>* params_;
    AdamConfig cfg_;
    std::vector<State> state_;
};

}  // namespace rtn
