#pragma once

#include <algorithm>
#include <cmath>
#include <charconv>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "s4mil/autograd.hpp"
#include "s4mil/data_io.hpp"
#include "s4mil/error.hpp"
#include "s4mil/losses.hpp"
#include "s4mil/metrics.hpp"
#include "s4mil/model.hpp"
#include "s4mil/optimizer.hpp"
#include "s4mil/rng.hpp"

namespace s4mil {

struct TrainConfig {
    OptimizerConfig optimizer;
    std::size_t patience = 10;
    std::size_t max_epochs = 100;
    double lambda = 5.0;
    std::uint64_t seed = 0;
    std::size_t accumulation = 1;  // bags per optimizer step

    void validate() const {
        optimizer.validate();
        if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (patience < 1) throw ConfigError("patience must be at least 1");
        if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
        if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
        if (accumulation < 1) throw ConfigError("accumulation must be at least 1");
    }
};

template <typename M>
concept TrainableModel = requires(M& m, const M& cm, autograd::Tape<typename M::scalar_type>& tape,
                                  const Tensor<typename M::scalar_type>& x) {
    { m.parameters() } -> std::same_as<std::vector<Parameter<typename M::scalar_type>*>>;
    { m.build(tape, x) } -> std::same_as<Graph>;
    { cm.forward(x) } -> std::same_as<MilOutput<typename M::scalar_type>>;
};

template <typename Scalar>
Tensor<Scalar> features_as(const Bag& bag) {
    if constexpr (std::is_same_v<Scalar, float>)
        return bag.features;
    else
        return bag.features.template cast<Scalar>();
}

/// Records the training objective for one bag on `tape`: the slide log loss
/// plus, when the model has a patch head and lambda > 0, (lambda / L) times
/// the summed patch log losses. Every term is scaled by `weight`.
template <TrainableModel M>
autograd::Var record_bag_loss(M& model, autograd::Tape<typename M::scalar_type>& tape, const Bag& bag, double lambda,
                              double weight = 1.0) {
    const auto graph = model.build(tape, features_as<typename M::scalar_type>(bag));
    auto loss = tape.softmax_log_loss(graph.slide_logits, {bag.slide_label}, weight);
    if (graph.patch_logits && lambda > 0.0) {
        if (!bag.patch_labels)
            throw ContractViolation("bag '" + bag.id + "' has no patch labels but the multitask term is enabled");
        const double patch_weight = weight * lambda / static_cast<double>(bag.length());
        loss = tape.add(loss, tape.softmax_log_loss(*graph.patch_logits, *bag.patch_labels, patch_weight));
    }
    return loss;
}

/// Tracks the best validation loss; stops after `patience` epochs without a
/// strict improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {
        if (patience == 0) throw ConfigError("patience must be at least 1");
    }

    /// Returns true when `loss` is a new best.
    bool update(double loss) {
        ++epoch_;
        if (loss < best_) {
            best_ = loss;
            best_epoch_ = epoch_;
            stale_ = 0;
            return true;
        }
        ++stale_;
        return false;
    }

    bool should_stop() const noexcept { return stale_ >= patience_; }
    double best() const noexcept { return best_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }

private:
    std::size_t patience_;
    std::size_t epoch_ = 0;
    std::size_t stale_ = 0;
    std::size_t best_epoch_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
    double auroc = std::numeric_limits<double>::quiet_NaN();  // NaN when only one class is present
    std::size_t floor_events = 0;
    std::vector<ScoredPrediction> predictions;
    std::vector<ProbabilityRows> patch_probabilities;  // empty unless the model has a patch head
};

template <TrainableModel M>
Evaluation evaluate(const M& model, std::span<const Bag> bags, double lambda) {
    if (bags.empty()) throw ContractViolation("evaluation on an empty split");
    Evaluation ev;
    std::vector<std::vector<double>> slide_probs;
    std::vector<int> slide_labels;
    std::vector<std::vector<int>> patch_labels;
    bool have_patches = true;
    for (const auto& bag : bags) {
        const auto out = model.forward(features_as<typename M::scalar_type>(bag));
        ev.predictions.push_back({out.probabilities, bag.slide_label});
        slide_probs.push_back(out.probabilities);
        slide_labels.push_back(bag.slide_label);
        if (out.patch_probabilities.size() > 0) {
            ProbabilityRows rows(static_cast<std::size_t>(out.patch_probabilities.rows()));
            for (Eigen::Index r = 0; r < out.patch_probabilities.rows(); ++r)
                for (Eigen::Index c = 0; c < out.patch_probabilities.cols(); ++c)
                    rows[static_cast<std::size_t>(r)].push_back(static_cast<double>(out.patch_probabilities(r, c)));
            ev.patch_probabilities.push_back(std::move(rows));
        } else {
            have_patches = false;
        }
        if (bag.patch_labels)
            patch_labels.push_back(*bag.patch_labels);
        else
            have_patches = false;
    }
    const auto loss = (have_patches && lambda > 0.0)
                          ? multitask_loss(slide_probs, slide_labels, ev.patch_probabilities, patch_labels, lambda)
                          : mil_loss(slide_probs, slide_labels);
    ev.loss = loss.value;
    ev.floor_events = loss.floor_events;
    ev.accuracy = accuracy(ev.predictions);
    try {
        ev.auroc = auroc_ovr(ev.predictions, ev.predictions.front().scores.size());
    } catch (const UndefinedMetric&) {
    }
    return ev;
}

/// Patch-level AUROC of the positive-class (index 1) patch probabilities.
inline double patch_auroc(const Evaluation& ev, std::span<const Bag> bags) {
    if (ev.patch_probabilities.size() != bags.size())
        throw ContractViolation("patch auroc needs patch predictions for every bag");
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t m = 0; m < bags.size(); ++m) {
        if (!bags[m].patch_labels) throw ContractViolation("bag '" + bags[m].id + "' has no patch labels");
        for (std::size_t l = 0; l < bags[m].length(); ++l) {
            scores.push_back(ev.patch_probabilities[m][l].at(1));
            labels.push_back((*bags[m].patch_labels)[l] == 1 ? 1 : 0);
        }
    }
    return auroc_binary(scores, labels);
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double val_auroc = 0.0;
};

struct FitResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
    std::size_t floor_events = 0;
};

/// One bag per step (or `accumulation` bags), seeded shuffle each epoch,
/// early stopping on validation loss. The model ends up holding the
/// parameters of the best validation epoch.
template <TrainableModel M>
FitResult fit(M& model, std::span<const Bag> train, std::span<const Bag> validation, const TrainConfig& config) {
    using Scalar = typename M::scalar_type;
    config.validate();
    if (train.empty()) throw ContractViolation("fit: empty training split");
    if (validation.empty()) throw ContractViolation("fit: empty validation split");

    auto params = model.parameters();
    AdamLookahead<Scalar> optimizer(params, config.optimizer);
    EarlyStopping stopper(config.patience);
    Rng shuffle_rng = substream(config.seed, "shuffle");
    std::vector<Tensor<Scalar>> best(params.size());
    FitResult result;
    std::vector<std::size_t> order(train.size());
    const double step_weight = 1.0 / static_cast<double>(config.accumulation);

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double train_total = 0.0;
        std::size_t in_group = 0;
        for (auto* p : params) p->zero_grad();
        for (std::size_t i = 0; i < order.size(); ++i) {
            autograd::Tape<Scalar> tape;
            record_bag_loss(model, tape, train[order[i]], config.lambda, step_weight);
            train_total += static_cast<double>(tape.forward()) / step_weight;
            result.floor_events += tape.floor_events();
            tape.backward();
            if (++in_group == config.accumulation || i + 1 == order.size()) {
                optimizer.step();
                for (auto* p : params) p->zero_grad();
                in_group = 0;
            }
        }
        const auto ev = evaluate(model, validation, config.lambda);
        result.history.push_back({epoch, train_total / static_cast<double>(train.size()), ev.loss, ev.accuracy,
                                  ev.auroc});
        if (stopper.update(ev.loss))
            for (std::size_t j = 0; j < params.size(); ++j) best[j] = params[j]->value;
        if (stopper.should_stop()) {
            result.stopped_early = true;
            break;
        }
    }
    for (std::size_t j = 0; j < params.size(); ++j) params[j]->value = best[j];
    result.best_epoch = stopper.best_epoch();
    result.best_val_loss = stopper.best();
    return result;
}

struct FoldSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

struct FoldPlan {
    std::vector<FoldSplit> folds;
    bool stratified = true;
};

/// k-fold partition. Each class is shuffled and dealt round-robin across the
/// folds, continuing the deal from class to class, so fold sizes differ by at
/// most one and each fold holds floor or ceil of its class share. Falls back
/// to an unstratified deal when a class has fewer than k members.
inline FoldPlan kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw ConfigError("k-fold needs k >= 2, got " + std::to_string(k));
    if (k > labels.size())
        throw ConfigError("k-fold with k = " + std::to_string(k) + " exceeds the " + std::to_string(labels.size()) +
                          " available bags");
    Rng rng = substream(seed, "kfold");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    FoldPlan plan;
    for (const auto& [label, members] : by_class)
        if (members.size() < k) plan.stratified = false;
    std::vector<std::vector<std::size_t>> groups;
    if (plan.stratified) {
        for (auto& [label, members] : by_class) groups.push_back(members);
    } else {
        std::clog << "warning: a class has fewer than " << k << " bags; using an unstratified split\n";
        std::vector<std::size_t> all(labels.size());
        std::iota(all.begin(), all.end(), 0);
        groups.push_back(std::move(all));
    }
    std::vector<std::vector<std::size_t>> fold_members(k);
    std::size_t next = 0;
    for (auto& g : groups) {
        std::shuffle(g.begin(), g.end(), rng);
        for (std::size_t idx : g) fold_members[next++ % k].push_back(idx);
    }
    for (std::size_t f = 0; f < k; ++f) {
        FoldSplit split;
        split.validation = fold_members[f];
        std::sort(split.validation.begin(), split.validation.end());
        for (std::size_t g = 0; g < k; ++g)
            if (g != f) split.train.insert(split.train.end(), fold_members[g].begin(), fold_members[g].end());
        std::sort(split.train.begin(), split.train.end());
        plan.folds.push_back(std::move(split));
    }
    return plan;
}

inline FoldPlan kfold(std::span<const Bag> bags, std::size_t k, std::uint64_t seed) {
    std::vector<int> labels;
    for (const auto& b : bags) labels.push_back(b.slide_label);
    return kfold(std::span<const int>(labels), k, seed);
}

inline std::vector<Bag> select(std::span<const Bag> bags, std::span<const std::size_t> indices) {
    std::vector<Bag> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(bags[i]);
    return out;
}

// ---------------------------------------------------------------------------
// History file: comma-separated, one row per epoch.

inline constexpr const char* history_header = "epoch,train_loss,val_loss,val_accuracy,val_auroc";

/// Shortest decimal form that parses back to the same double.
inline std::string format_real(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline void write_history(std::ostream& out, std::span<const EpochRecord> history) {
    out << history_header << '\n';
    for (const auto& r : history)
        out << r.epoch << ',' << format_real(r.train_loss) << ',' << format_real(r.val_loss) << ','
            << format_real(r.val_accuracy) << ',' << format_real(r.val_auroc) << '\n';
}

inline std::vector<EpochRecord> read_history(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || detail::trim(line) != history_header)
        throw ParseError("history file must start with '" + std::string(history_header) + "'", 0);
    std::vector<EpochRecord> out;
    while (std::getline(in, line)) {
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto cells = detail::split_csv(line);
        if (cells.size() != 5) throw ParseError("history row must have 5 cells: '" + line + "'", 0);
        try {
            out.push_back({std::stoul(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]),
                           std::stod(cells[4])});
        } catch (const std::exception&) {
            throw ParseError("malformed history row: '" + line + "'", 0);
        }
    }
    return out;
}

}  // namespace s4mil
