#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "s4mil/metrics.hpp"

using namespace s4mil;

TEST(Accuracy, HandValuesAndTieRule) {
    const std::vector<ScoredPrediction> all{{{0.9, 0.1}, 0}, {{0.2, 0.8}, 1}};
    EXPECT_EQ(accuracy(all), 1.0);
    const std::vector<ScoredPrediction> half{{{0.9, 0.1}, 0}, {{0.9, 0.1}, 1}};
    EXPECT_EQ(accuracy(half), 0.5);
    const std::vector<ScoredPrediction> tie{{{0.5, 0.5}, 0}};
    EXPECT_EQ(accuracy(tie), 1.0);
    EXPECT_THROW(accuracy(std::vector<ScoredPrediction>{}), ContractViolation);
}

TEST(Auroc, HandValues) {
    EXPECT_EQ(auroc_binary(std::vector<double>{0.9, 0.8, 0.3}, std::vector<int>{1, 1, 0}), 1.0);
    EXPECT_EQ(auroc_binary(std::vector<double>{0.3, 0.9}, std::vector<int>{1, 0}), 0.0);
    EXPECT_EQ(auroc_binary(std::vector<double>{0.4, 0.4, 0.4, 0.4}, std::vector<int>{1, 0, 1, 0}), 0.5);
}

TEST(Auroc, SingleClassIsUndefined) {
    EXPECT_THROW(auroc_binary(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetric);
    const std::vector<ScoredPrediction> one{{{0.5, 0.5}, 0}, {{0.1, 0.9}, 0}};
    EXPECT_THROW(auroc_ovr(one, 2), UndefinedMetric);
}

TEST(Auroc, MatchesPairwiseCountingExactly) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> coarse(0, 20);  // coarse scores force many ties
    std::uniform_real_distribution<double> fine(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> scores(200);
        std::vector<int> labels(200);
        for (std::size_t i = 0; i < 200; ++i) {
            scores[i] = trial % 2 ? coarse(rng) / 20.0 : fine(rng);
            labels[i] = static_cast<int>(rng() % 2);
        }
        EXPECT_EQ(auroc_binary(scores, labels), oracle::pairwise_auroc(scores, labels));
    }
}

TEST(Auroc, OneVsRestIsMeanOfPairwiseBinary) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ScoredPrediction> preds(150);
    for (auto& p : preds) {
        p.true_label = static_cast<int>(rng() % 3);
        double a = u(rng), b = u(rng), c = u(rng), s = a + b + c;
        p.scores = {a / s, b / s, c / s};
    }
    double sum = 0.0;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& p : preds) {
            scores.push_back(p.scores[static_cast<std::size_t>(c)]);
            labels.push_back(p.true_label == c);
        }
        sum += oracle::pairwise_auroc(scores, labels);
    }
    EXPECT_NEAR(auroc_ovr(preds, 3), sum / 3.0, 1e-15);
}

TEST(Auroc, BinaryReductionAndPerfectSeparation) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ScoredPrediction> preds(60);
    std::vector<double> class1;
    std::vector<int> labels;
    for (auto& p : preds) {
        const double s = u(rng);
        p.scores = {1.0 - s, s};
        p.true_label = static_cast<int>(rng() % 2);
        class1.push_back(s);
        labels.push_back(p.true_label);
    }
    // 1 - s reverses the ranking, so both one-vs-rest terms coincide.
    EXPECT_NEAR(auroc_ovr(preds, 2), auroc_binary(class1, labels), 1e-15);

    std::vector<ScoredPrediction> separated;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i) {
            std::vector<double> s(3, 0.1);
            s[static_cast<std::size_t>(c)] = 0.8;
            separated.push_back({s, c});
        }
    EXPECT_EQ(auroc_ovr(separated, 3), 1.0);
}

TEST(Auroc, AbsentClassesAreExcluded) {
    const std::vector<ScoredPrediction> preds{{{0.7, 0.2, 0.1}, 0}, {{0.2, 0.1, 0.7}, 2}, {{0.6, 0.3, 0.1}, 0}};
    EXPECT_EQ(auroc_ovr(preds, 3), 1.0);
}

TEST(Auroc, InvariantUnderStrictlyIncreasingTransforms) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n;
    std::vector<double> s(120);
    std::vector<int> labels(120);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = n(rng);
        labels[i] = static_cast<int>(rng() % 2);
    }
    std::vector<double> e(s.size()), a(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        e[i] = std::exp(s[i]);
        a[i] = 3.0 * s[i] + 7.0;
    }
    const double base = auroc_binary(s, labels);
    EXPECT_EQ(auroc_binary(e, labels), base);
    EXPECT_EQ(auroc_binary(a, labels), base);
}

TEST(Auroc, FlippedLabelsSumToOne) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u;
    std::vector<double> s(80);
    std::vector<int> labels(80), flipped(80);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = u(rng);
        labels[i] = static_cast<int>(rng() % 2);
        flipped[i] = 1 - labels[i];
    }
    EXPECT_NEAR(auroc_binary(s, labels) + auroc_binary(s, flipped), 1.0, 1e-15);
}

TEST(Metrics, PermutationInvariance) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u;
    std::vector<ScoredPrediction> preds(90);
    for (auto& p : preds) {
        const double s = u(rng);
        p.scores = {1.0 - s, s};
        p.true_label = static_cast<int>(rng() % 2);
    }
    auto shuffled = preds;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_EQ(accuracy(preds), accuracy(shuffled));
    EXPECT_EQ(auroc_ovr(preds, 2), auroc_ovr(shuffled, 2));
}
