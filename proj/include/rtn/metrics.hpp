#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtn {

inline double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.empty()) throw std::invalid_argument("accuracy: empty input");
    if (predictions.size() != labels.size()) {
        throw std::invalid_argument("accuracy: " + std::to_string(predictions.size()) +
                                    " predictions vs " + std::to_string(labels.size()) + " labels");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie), computed via
// average ranks. Rank sums are exact in double for any realistic input size,
// so this matches the brute-force pairwise count bit-for-bit after division.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("auc: " + std::to_string(scores.size()) + " scores vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    std::size_t pos = 0, neg = 0;
    for (int l : labels) {
        if (l == 1) ++pos;
        else if (l == 0) ++neg;
        else throw std::invalid_argument("auc: labels must be 0 or 1, got " + std::to_string(l));
    }
    if (pos == 0 || neg == 0) {
        throw std::invalid_argument("auc: needs both classes, got " + std::to_string(pos) +
                                    " positives and " + std::to_string(neg) + " negatives");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average rank over each tied block; 1-based ranks
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
        }
        i = j + 1;
    }
    const double p = static_cast<double>(pos);
    return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

}  // namespace rtn
