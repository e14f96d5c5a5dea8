// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Usage: acceptance [criterion numbers...]

#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "s4mil/autograd.hpp"
#include "s4mil/losses.hpp"
#include "s4mil/metrics.hpp"
#include "s4mil/model.hpp"
#include "s4mil/ssm.hpp"
#include "s4mil/synthetic.hpp"
#include "s4mil/train.hpp"

using namespace s4mil;

namespace {

// Pinned thresholds.
constexpr std::size_t params_n32 = 1'085'954;
constexpr std::size_t params_n128 = 1'184'258;
constexpr double duality_tolerance = 1e-6;
constexpr double model_duality_tolerance = 1e-5;
constexpr double fd_step = 1e-5;
constexpr double fd_tolerance = 1e-4;
constexpr double fd_denominator_floor = 1e-4;
constexpr double learning_auroc = 0.95;
constexpr double patch_auroc_min = 0.9;
constexpr double slide_auroc_slack = 0.02;
constexpr double memory_ratio_low = 1.8;
constexpr double memory_ratio_high = 2.3;
constexpr double bench_speedup = 5.0;
constexpr std::size_t learning_width = 256;
constexpr std::size_t multitask_width = 128;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(6);
    s << v;
    return s.str();
}

Outcome parameter_counts() {
    ModelConfig c;
    const auto n32 = count_parameters(c);
    const auto inst32 = MilModel<float>::initialize(c, 0).parameter_count();
    c.state_dim = 128;
    const auto n128 = count_parameters(c);
    const auto inst128 = MilModel<float>::initialize(c, 0).parameter_count();
    return {n32 == params_n32 && inst32 == params_n32 && n128 == params_n128 && inst128 == params_n128,
            "N=32: " + std::to_string(n32) + " (instantiated " + std::to_string(inst32) + "), N=128: " +
                std::to_string(n128) + " (instantiated " + std::to_string(inst128) + ")"};
}

Outcome channel_duality() {
    Rng rng = substream(2, "acceptance.duality");
    std::uniform_int_distribution<std::size_t> n_dist(1, 8), l_dist(1, 512);
    std::uniform_real_distribution<double> re(0.05, 2.0), im(-10.0, 10.0), log_dt(std::log(1e-3), std::log(1e-1));
    std::normal_distribution<double> normal, half(0.0, std::sqrt(0.5));
    double worst = 0.0;
    for (auto rule : {Discretization::bilinear, Discretization::zoh}) {
        for (int trial = 0; trial < 100; ++trial) {
            SsmChannelParams p;
            const auto n = n_dist(rng);
            for (std::size_t j = 0; j < n; ++j) {
                p.a.emplace_back(-re(rng), im(rng));
                p.c.emplace_back(half(rng), half(rng));
            }
            p.d = normal(rng);
            p.log_dt = log_dt(rng);
            std::vector<double> u(l_dist(rng));
            for (auto& v : u) v = normal(rng);
            const auto disc = discretize(p, rule);
            const auto y_rec = run_recurrence(disc, p.c, p.d, u);
            const auto y_conv = convolve(compute_kernel(disc, p.c, u.size()), u, p.d);
            double diff = 0.0, scale = 0.0;
            for (std::size_t t = 0; t < u.size(); ++t) {
                diff = std::max(diff, std::fabs(y_conv[t] - y_rec[t]));
                scale = std::max(scale, std::fabs(y_rec[t]));
            }
            worst = std::max(worst, diff / (1.0 + scale));
        }
    }
    return {worst <= duality_tolerance, "200 channels, worst error " + fmt(worst) + " (limit " +
                                            fmt(duality_tolerance) + ")"};
}

Outcome model_duality() {
    ModelConfig c;
    c.input_dim = 32;
    c.hidden_dim = 16;
    c.state_dim = 8;
    c.multitask = true;
    const auto model = MilModel<float>::initialize(c, 3);
    Rng rng = substream(3, "acceptance.model-duality");
    std::uniform_int_distribution<Eigen::Index> l_dist(1, 256);
    std::normal_distribution<float> normal;
    double worst = 0.0;
    for (int b = 0; b < 10; ++b) {
        Tensor<float> bag(l_dist(rng), 32);
        for (Eigen::Index i = 0; i < bag.size(); ++i) bag.data()[i] = normal(rng);
        const auto conv = model.forward(bag, SsmMode::convolution);
        const auto rec = model.forward(bag, SsmMode::recurrence);
        std::vector<std::pair<double, double>> pairs;
        for (std::size_t i = 0; i < conv.probabilities.size(); ++i)
            pairs.emplace_back(conv.probabilities[i], rec.probabilities[i]);
        for (std::size_t i = 0; i < conv.pooled.size(); ++i) pairs.emplace_back(conv.pooled[i], rec.pooled[i]);
        for (Eigen::Index i = 0; i < conv.patch_probabilities.size(); ++i)
            pairs.emplace_back(conv.patch_probabilities.data()[i], rec.patch_probabilities.data()[i]);
        double diff = 0.0, scale = 0.0;
        for (const auto& [a, r] : pairs) {
            diff = std::max(diff, std::fabs(a - r));
            scale = std::max(scale, std::fabs(r));
        }
        worst = std::max(worst, diff / (1.0 + scale));
    }
    return {worst <= model_duality_tolerance, "10 bags, worst error " + fmt(worst) + " (limit " +
                                                  fmt(model_duality_tolerance) + ")"};
}

Outcome gradient_fidelity() {
    Rng rng = substream(4, "acceptance.gradients");
    std::normal_distribution<double> normal;
    Bag bag;
    bag.id = "fd";
    bag.features.resize(16, 8);
    for (Eigen::Index i = 0; i < bag.features.size(); ++i) bag.features.data()[i] = static_cast<float>(normal(rng));
    bag.slide_label = 1;
    bag.patch_labels = std::vector<int>(16);
    for (std::size_t i = 0; i < 16; ++i) (*bag.patch_labels)[i] = static_cast<int>(rng() % 2);

    double worst = 0.0;
    std::size_t checked = 0;
    for (auto rule : {Discretization::bilinear, Discretization::zoh}) {
        for (bool multitask : {false, true}) {
            ModelConfig c;
            c.input_dim = 8;
            c.hidden_dim = 4;
            c.state_dim = 4;
            c.multitask = multitask;
            c.discretization = rule;
            auto model = MilModel<double>::initialize(c, rng());
            const double lambda = multitask ? 5.0 : 0.0;
            auto loss = [&] {
                autograd::Tape<double> tape;
                record_bag_loss(model, tape, bag, lambda);
                return tape.forward();
            };
            for (auto* p : model.parameters()) p->zero_grad();
            {
                autograd::Tape<double> tape;
                record_bag_loss(model, tape, bag, lambda);
                tape.forward();
                tape.backward();
            }
            for (auto* p : model.parameters()) {
                for (Eigen::Index i = 0; i < p->value.size(); ++i) {
                    const double saved = p->value.data()[i];
                    p->value.data()[i] = saved + fd_step;
                    const double up = loss();
                    p->value.data()[i] = saved - fd_step;
                    const double down = loss();
                    p->value.data()[i] = saved;
                    const double fd = (up - down) / (2.0 * fd_step);
                    const double a = p->grad.data()[i];
                    const double rel =
                        std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), fd_denominator_floor});
                    worst = std::max(worst, rel);
                    ++checked;
                }
            }
        }
    }
    return {worst <= fd_tolerance, std::to_string(checked) + " coordinates over 2 rules x {plain, multitask}, worst " +
                                       fmt(worst) + " (limit " + fmt(fd_tolerance) + ")"};
}

struct Split {
    std::vector<Bag> train, val, test;
};

// Stratified 5-way deal: fold 0 is held out, fold 1 drives early stopping.
Split split_bags(const std::vector<Bag>& bags, std::uint64_t seed) {
    const auto plan = kfold(std::span<const Bag>(bags), 5, seed);
    std::vector<std::size_t> train;
    for (std::size_t f = 2; f < 5; ++f)
        train.insert(train.end(), plan.folds[f].validation.begin(), plan.folds[f].validation.end());
    std::sort(train.begin(), train.end());
    return {select(bags, train), select(bags, plan.folds[1].validation), select(bags, plan.folds[0].validation)};
}

ModelConfig synthetic_model(std::size_t width, bool multitask) {
    ModelConfig c;
    c.input_dim = 16;
    c.hidden_dim = width;
    c.state_dim = 32;
    c.multitask = multitask;
    return c;
}

TrainConfig fixed_optimizer(double lambda, std::uint64_t seed) {
    TrainConfig t;
    t.optimizer.learning_rate = 2e-4;
    t.optimizer.weight_decay = 1e-4;
    t.patience = 10;
    t.max_epochs = 100;
    t.lambda = lambda;
    t.seed = seed;
    return t;
}

Outcome synthetic_learning() {
    const auto bags = generate_synthetic(SyntheticTaskSpec{}, 5);
    const auto split = split_bags(bags, 5);
    auto model = MilModel<float>::initialize(synthetic_model(learning_width, false), 5);
    const auto fit_result = fit(model, split.train, split.val, fixed_optimizer(0.0, 5));
    const auto ev = evaluate(model, std::span<const Bag>(split.test), 0.0);
    return {ev.auroc >= learning_auroc,
            "held-out AUROC " + fmt(ev.auroc) + " (min " + fmt(learning_auroc) + "), " +
                std::to_string(split.train.size()) + "/" + std::to_string(split.val.size()) + "/" +
                std::to_string(split.test.size()) + " bags, " + std::to_string(fit_result.history.size()) +
                " epochs, best " + std::to_string(fit_result.best_epoch)};
}

Outcome multitask_benefit() {
    double patch_sum = 0.0, multi_sum = 0.0, plain_sum = 0.0;
    std::string per_seed;
    for (std::uint64_t seed : {11, 12, 13}) {
        const auto bags = generate_synthetic(SyntheticTaskSpec{}, seed);
        const auto split = split_bags(bags, seed);
        auto multi = MilModel<float>::initialize(synthetic_model(multitask_width, true), seed);
        fit(multi, split.train, split.val, fixed_optimizer(5.0, seed));
        const auto ev = evaluate(multi, std::span<const Bag>(split.test), 5.0);
        const double patch = patch_auroc(ev, split.test);
        auto plain = MilModel<float>::initialize(synthetic_model(multitask_width, false), seed);
        fit(plain, split.train, split.val, fixed_optimizer(0.0, seed));
        const double plain_auroc = evaluate(plain, std::span<const Bag>(split.test), 0.0).auroc;
        patch_sum += patch;
        multi_sum += ev.auroc;
        plain_sum += plain_auroc;
        per_seed += " [seed " + std::to_string(seed) + ": patch " + fmt(patch) + ", slide " + fmt(ev.auroc) +
                    " vs " + fmt(plain_auroc) + "]";
    }
    const double patch = patch_sum / 3.0, multi = multi_sum / 3.0, plain = plain_sum / 3.0;
    return {patch >= patch_auroc_min && multi >= plain - slide_auroc_slack,
            "mean patch AUROC " + fmt(patch) + " (min " + fmt(patch_auroc_min) + "), mean slide AUROC " + fmt(multi) +
                " vs lambda=0 " + fmt(plain) + " (slack " + fmt(slide_auroc_slack) + ");" + per_seed};
}

struct MemoryRun {
    long additional_kb = -1;
    bool finite = false;
};

// Forks a child that builds the bag, then runs one forward pass. Peak RSS of
// the child minus its RSS before the forward pass is the additional memory.
MemoryRun measure_forward_memory(Eigen::Index L) {
    int fd[2];
    if (pipe(fd) != 0) return {};
    const pid_t pid = fork();
    if (pid == 0) {
        close(fd[0]);
        ModelConfig c;
        const auto model = MilModel<float>::initialize(c, 7);
        Rng rng = substream(7, "acceptance.memory");
        std::normal_distribution<float> normal;
        Tensor<float> bag(L, 1024);
        for (Eigen::Index i = 0; i < bag.size(); ++i) bag.data()[i] = normal(rng);
        rusage before{};
        getrusage(RUSAGE_SELF, &before);
        const auto out = model.forward(bag);
        bool finite = true;
        for (double p : out.probabilities) finite = finite && std::isfinite(p);
        for (float v : out.pooled) finite = finite && std::isfinite(v);
        long report[2] = {before.ru_maxrss, finite ? 1 : 0};
        [[maybe_unused]] auto written = write(fd[1], report, sizeof(report));
        close(fd[1]);
        _exit(0);
    }
    close(fd[1]);
    long report[2] = {0, 0};
    const auto got = read(fd[0], report, sizeof(report));
    close(fd[0]);
    int status = 0;
    rusage usage{};
    wait4(pid, &status, 0, &usage);
    if (got != static_cast<ssize_t>(sizeof(report)) || !WIFEXITED(status) || WEXITSTATUS(status) != 0) return {};
    return {usage.ru_maxrss - report[0], report[1] == 1};
}

Outcome long_sequences() {
    const auto half = measure_forward_memory(31118);
    const auto full = measure_forward_memory(62235);
    if (half.additional_kb <= 0 || full.additional_kb <= 0)
        return {false, "memory measurement failed (" + std::to_string(half.additional_kb) + " kB, " +
                           std::to_string(full.additional_kb) + " kB)"};
    const double ratio = static_cast<double>(full.additional_kb) / static_cast<double>(half.additional_kb);
    return {full.finite && half.finite && ratio >= memory_ratio_low && ratio <= memory_ratio_high,
            "L=62235 outputs " + std::string(full.finite ? "finite" : "NON-FINITE") + ", additional peak " +
                std::to_string(full.additional_kb) + " kB vs " + std::to_string(half.additional_kb) +
                " kB at L=31118, ratio " + fmt(ratio) + " (range [" + fmt(memory_ratio_low) + ", " +
                fmt(memory_ratio_high) + "])"};
}

Outcome bench_protocol() {
    using clock = std::chrono::steady_clock;
    const auto model = MilModel<float>::initialize(ModelConfig{}, 8);
    Rng rng = substream(8, "acceptance.bench");
    std::normal_distribution<float> normal;
    Tensor<float> bag(30000, 1024);
    for (Eigen::Index i = 0; i < bag.size(); ++i) bag.data()[i] = normal(rng);
    auto time_mode = [&](SsmMode mode) {
        model.forward(bag, mode);  // warmup
        constexpr int repeats = 3;
        double total = 0.0;
        for (int r = 0; r < repeats; ++r) {
            const auto t0 = clock::now();
            model.forward(bag, mode);
            total += std::chrono::duration<double>(clock::now() - t0).count();
        }
        return total / repeats;
    };
    const double conv = time_mode(SsmMode::convolution);
    const double rec = time_mode(SsmMode::recurrence);
    const double speedup = rec / conv;
    return {speedup >= bench_speedup, "convolution " + fmt(conv) + " s, recurrence " + fmt(rec) + " s, speedup " +
                                          fmt(speedup) + "x (min " + fmt(bench_speedup) + "x)"};
}

Outcome metric_oracle() {
    Rng rng = substream(9, "acceptance.metrics");
    std::uniform_real_distribution<double> u;
    std::vector<double> scores(200);
    std::vector<int> labels(200);
    for (std::size_t i = 0; i < 200; ++i) {
        scores[i] = std::round(u(rng) * 50.0) / 50.0;  // coarse grid forces ties
        labels[i] = static_cast<int>(rng() % 2);
    }
    const double fast = auroc_binary(scores, labels);
    const double brute = oracle::pairwise_auroc(scores, labels);

    std::vector<ScoredPrediction> preds(200);
    for (auto& p : preds) {
        p.true_label = static_cast<int>(rng() % 3);
        const double a = u(rng), b = u(rng), c = u(rng), s = a + b + c;
        p.scores = {a / s, b / s, c / s};
    }
    double sum = 0.0;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> s;
        std::vector<int> l;
        for (const auto& p : preds) {
            s.push_back(p.scores[static_cast<std::size_t>(c)]);
            l.push_back(p.true_label == c ? 1 : 0);
        }
        sum += oracle::pairwise_auroc(s, l);
    }
    const double ovr = auroc_ovr(preds, 3);
    const double mean = sum / 3.0;
    return {fast == brute && ovr == mean, "binary " + fmt(fast) + " vs brute force " + fmt(brute) +
                                              ", one-vs-rest " + fmt(ovr) + " vs mean brute force " + fmt(mean) +
                                              " (exact equality)"};
}

Outcome loss_identities() {
    Rng rng = substream(10, "acceptance.losses");
    std::uniform_real_distribution<double> u(0.01, 1.0);
    std::size_t mismatches = 0;
    for (int batch = 0; batch < 50; ++batch) {
        const std::size_t M = 1 + rng() % 8;
        std::vector<std::vector<double>> probs(M);
        std::vector<int> labels(M);
        std::vector<ProbabilityRows> patch(M);
        std::vector<std::vector<int>> patch_labels(M);
        for (std::size_t m = 0; m < M; ++m) {
            const double a = u(rng), b = u(rng);
            probs[m] = {a / (a + b), b / (a + b)};
            labels[m] = static_cast<int>(rng() % 2);
            const std::size_t L = 1 + rng() % 20;
            for (std::size_t l = 0; l < L; ++l) {
                const double x = u(rng);
                patch[m].push_back({x, 1.0 - x});
                patch_labels[m].push_back(static_cast<int>(rng() % 2));
            }
        }
        const double mil = mil_loss(probs, labels).value;
        const double multi = multitask_loss(probs, labels, patch, patch_labels, 0.0).value;
        if (std::bit_cast<std::uint64_t>(mil) != std::bit_cast<std::uint64_t>(multi)) ++mismatches;
    }
    const std::vector<std::vector<double>> perfect{{1.0, 0.0}, {0.0, 1.0}};
    const double zero = mil_loss(perfect, std::vector<int>{0, 1}).value;
    return {mismatches == 0 && zero == 0.0, std::to_string(mismatches) +
                                                " bitwise mismatches over 50 batches, perfect-prediction loss " +
                                                fmt(zero + 0.0)};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {1, "parameter counts", parameter_counts},
        {2, "recurrence/convolution duality", channel_duality},
        {3, "full-model duality", model_duality},
        {4, "gradient fidelity", gradient_fidelity},
        {5, "synthetic MIL learning", synthetic_learning},
        {6, "multitask benefit", multitask_benefit},
        {7, "long-sequence robustness", long_sequences},
        {8, "bench protocol", bench_protocol},
        {9, "metric oracle", metric_oracle},
        {10, "loss identities", loss_identities},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": " << o.detail << " ["
                  << fmt(secs) << " s]" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
