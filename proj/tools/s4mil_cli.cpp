// s4mil command-line tool. Every command resolves its configuration, writes
// resolved_config.txt to the output directory, runs, and re-reads each file
// it produced. Failures print one line "error[<category>]: <message>" to
// stderr and exit nonzero.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "run_config.hpp"
#include "s4mil.hpp"

namespace fs = std::filesystem;
using namespace s4mil;
using cli::RunConfig;

namespace {

class CheckFailure : public Error {
public:
    explicit CheckFailure(const std::string& msg) : Error("check", msg) {}
};

using Row = std::vector<std::string>;
using KeyValues = std::vector<std::pair<std::string, std::string>>;

std::string num(double v) { return format_real(v); }
std::string num(std::size_t v) { return std::to_string(v); }

void write_csv(const fs::path& path, const Row& header, const std::vector<Row>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    auto line = [&](const Row& r) {
        for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
        out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

/// Reads a csv written by write_csv; every row must match the header width
/// and, past the first `text_columns` cells, hold numbers or "nan".
std::vector<Row> read_csv(const fs::path& path, const Row& header, std::size_t text_columns) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || detail::split_csv(line) != header)
        throw ParseError(path.string() + ": unexpected header", 0);
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        auto cells = detail::split_csv(line);
        if (cells.size() != header.size())
            throw ParseError(path.string() + ": row has " + std::to_string(cells.size()) + " cells", 0);
        for (std::size_t i = text_columns; i < cells.size(); ++i) {
            std::size_t used = 0;
            try {
                std::stod(cells[i], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cells[i].size() || cells[i].empty())
                throw ParseError(path.string() + ": non-numeric cell '" + cells[i] + "'", 0);
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

void write_key_values(const fs::path& path, const KeyValues& kv) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

KeyValues read_key_values(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    KeyValues kv;
    std::string line;
    while (std::getline(in, line)) {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(path.string() + ": expected key=value, got '" + line + "'", 0);
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
}

void write_and_verify_key_values(const fs::path& path, const KeyValues& kv) {
    write_key_values(path, kv);
    if (read_key_values(path) != kv) throw IoError(path.string() + " did not read back identically");
}

fs::path output_dir(const RunConfig& cfg) { return fs::path(cfg.str("output")); }

/// Applies --threads, writes resolved_config.txt and checks it reads back.
void finalize(const RunConfig& cfg, const std::string& command) {
    set_max_threads(cfg.size("threads"));
    const auto dir = output_dir(cfg);
    fs::create_directories(dir);
    const auto path = dir / "resolved_config.txt";
    cfg.write(path, command);
    RunConfig back;
    back.load_file(path);
    if (!(back == cfg)) throw IoError(path.string() + " did not read back identically");
}

std::vector<Bag> load_bags(RunConfig& cfg) {
    const bool manifest = !cfg.str("manifest").empty();
    const bool synthetic = !cfg.str("synthetic").empty();
    if (manifest == synthetic) throw ConfigError("give exactly one of --manifest or --synthetic");
    auto bags = manifest ? load_manifest(cfg.str("manifest")) : generate_synthetic(cfg.synthetic(), cfg.u64("seed"));
    if (bags.empty()) throw ConfigError("the dataset has no bags");
    const auto D = bags.front().features.cols();
    for (const auto& b : bags)
        if (b.features.cols() != D)
            throw ContractViolation("bag '" + b.id + "' has feature dimension " + std::to_string(b.features.cols()) +
                                    ", expected " + std::to_string(D));
    return bags;
}

/// Fills model dimensions the user did not set from the data.
void infer_dimensions(RunConfig& cfg, std::span<const Bag> bags) {
    if (!cfg.is_explicit("input_dim")) cfg.set("input_dim", std::to_string(bags.front().features.cols()), false);
    if (!cfg.is_explicit("num_classes")) {
        int top = 1;
        for (const auto& b : bags) top = std::max(top, b.slide_label);
        cfg.set("num_classes", std::to_string(top + 1), false);
    }
    const auto classes = cfg.size("num_classes");
    for (const auto& b : bags)
        if (b.slide_label < 0 || static_cast<std::size_t>(b.slide_label) >= classes)
            throw ConfigError("bag '" + b.id + "' has label " + std::to_string(b.slide_label) + " but num_classes is " +
                              std::to_string(classes));
}

void adopt_model_config(RunConfig& cfg, const ModelConfig& c) {
    cfg.set("input_dim", std::to_string(c.input_dim), false);
    cfg.set("hidden_dim", std::to_string(c.hidden_dim), false);
    cfg.set("state_dim", std::to_string(c.state_dim), false);
    cfg.set("num_classes", std::to_string(c.num_classes), false);
    cfg.set("num_ssm_layers", std::to_string(c.num_ssm_layers), false);
    cfg.set("multitask", c.multitask ? "true" : "false", false);
    cfg.set("patch_classes", std::to_string(c.patch_classes), false);
    cfg.set("discretization", to_string(c.discretization), false);
}

struct SplitMetrics {
    Evaluation ev;
    double patch = std::numeric_limits<double>::quiet_NaN();
    std::size_t long_bags = 0;
    double long_accuracy = std::numeric_limits<double>::quiet_NaN();
};

SplitMetrics measure(const MilModel<float>& model, std::span<const Bag> bags, double lambda, std::size_t threshold) {
    SplitMetrics m;
    m.ev = evaluate(model, bags, lambda);
    if (!m.ev.patch_probabilities.empty()) {
        try {
            m.patch = patch_auroc(m.ev, bags);
        } catch (const Error&) {
        }
    }
    std::vector<ScoredPrediction> long_preds;
    for (std::size_t i = 0; i < bags.size(); ++i)
        if (bags[i].length() >= threshold) long_preds.push_back(m.ev.predictions[i]);
    m.long_bags = long_preds.size();
    if (!long_preds.empty()) m.long_accuracy = accuracy(long_preds);
    return m;
}

double nan_mean(const std::vector<double>& v) {
    double sum = 0.0;
    std::size_t n = 0;
    for (double x : v)
        if (!std::isnan(x)) {
            sum += x;
            ++n;
        }
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------

void cmd_train(RunConfig& cfg) {
    auto bags = load_bags(cfg);
    infer_dimensions(cfg, bags);
    const auto model_cfg = cfg.model();
    const auto train_cfg = cfg.training();
    const auto k = cfg.size("folds");
    if (k < 3) throw ConfigError("train needs folds >= 3 (one fold tests, one drives early stopping)");
    if (model_cfg.multitask)
        for (const auto& b : bags)
            if (!b.patch_labels) throw ConfigError("multitask training needs patch labels; bag '" + b.id + "' has none");
    const auto plan = kfold(bags, k, cfg.u64("seed"));
    finalize(cfg, "train");

    const auto dir = output_dir(cfg);
    const auto threshold = nearest_rank_threshold(bag_lengths(bags), cfg.real("long_percentile"));
    const Row header{"fold",      "train_bags",    "val_bags",      "test_bags",        "best_epoch", "epochs_run",
                     "test_loss", "test_accuracy", "test_auroc",    "test_patch_auroc", "long_bags",  "long_accuracy"};
    std::vector<Row> rows;
    std::vector<std::vector<double>> columns(header.size() - 1);
    std::size_t long_total = 0;
    double long_weighted = 0.0;
    for (std::size_t f = 0; f < k; ++f) {
        try {
            const auto& test_idx = plan.folds[f].validation;
            const auto& val_idx = plan.folds[(f + 1) % k].validation;
            std::vector<std::size_t> train_idx;
            for (std::size_t g = 0; g < k; ++g)
                if (g != f && g != (f + 1) % k)
                    train_idx.insert(train_idx.end(), plan.folds[g].validation.begin(), plan.folds[g].validation.end());
            std::sort(train_idx.begin(), train_idx.end());
            const auto train = select(bags, train_idx), val = select(bags, val_idx), test = select(bags, test_idx);

            auto fold_cfg = train_cfg;
            fold_cfg.seed = substream(cfg.u64("seed"), "fold." + std::to_string(f))();
            auto model = MilModel<float>::initialize(model_cfg, substream(fold_cfg.seed, "model")());
            const auto result = fit(model, train, val, fold_cfg);

            std::ostringstream name;
            name << "fold_" << std::setw(2) << std::setfill('0') << f;
            const auto fold_dir = dir / name.str();
            fs::create_directories(fold_dir);
            write_checkpoint(fold_dir / "checkpoint.s4mc", model);
            const auto reread = read_checkpoint<float>(fold_dir / "checkpoint.s4mc");
            if (encode_checkpoint(reread) != encode_checkpoint(model)) throw IoError("checkpoint did not read back");
            {
                std::ofstream h(fold_dir / "history.csv", std::ios::trunc);
                write_history(h, result.history);
            }
            {
                std::ifstream h(fold_dir / "history.csv");
                if (read_history(h).size() != result.history.size()) throw IoError("history did not read back");
            }

            const auto m = measure(model, test, train_cfg.lambda, threshold);
            const std::vector<double> values{static_cast<double>(train.size()), static_cast<double>(val.size()),
                                             static_cast<double>(test.size()), static_cast<double>(result.best_epoch),
                                             static_cast<double>(result.history.size()), m.ev.loss, m.ev.accuracy,
                                             m.ev.auroc, m.patch, static_cast<double>(m.long_bags), m.long_accuracy};
            Row row{std::to_string(f)};
            for (std::size_t c = 0; c < values.size(); ++c) {
                columns[c].push_back(values[c]);
                row.push_back(c < 5 || c == 9 ? num(static_cast<std::size_t>(values[c])) : num(values[c]));
            }
            rows.push_back(std::move(row));
            if (m.long_bags) {
                long_total += m.long_bags;
                long_weighted += m.long_accuracy * static_cast<double>(m.long_bags);
            }
            std::cout << "fold " << f << ": epochs " << result.history.size() << " (best " << result.best_epoch
                      << "), test accuracy " << num(m.ev.accuracy) << ", auroc " << num(m.ev.auroc);
            if (model_cfg.multitask) std::cout << ", patch auroc " << num(m.patch);
            if (result.floor_events) std::cout << ", probability floor hit " << result.floor_events << " times";
            std::cout << '\n';
        } catch (const Error& e) {
            throw Error(e.category(), "fold " + std::to_string(f) + ": " + e.what());
        }
    }
    Row mean{"mean"}, weighted{"mean_long_weighted"};
    for (std::size_t c = 0; c < columns.size(); ++c) {
        const double m = nan_mean(columns[c]);
        mean.push_back(num(m));
        weighted.push_back(num(m));
    }
    weighted.back() = num(long_total ? long_weighted / static_cast<double>(long_total)
                                     : std::numeric_limits<double>::quiet_NaN());
    rows.push_back(mean);
    rows.push_back(weighted);
    write_csv(dir / "summary.csv", header, rows);
    read_csv(dir / "summary.csv", header, 1);
    std::cout << "mean test accuracy " << mean[7] << ", auroc " << mean[8] << " over " << k << " folds\n";
}

void cmd_evaluate(RunConfig& cfg) {
    if (cfg.str("checkpoint").empty()) throw ConfigError("evaluate needs --checkpoint");
    const auto model = read_checkpoint<float>(cfg.str("checkpoint"));
    adopt_model_config(cfg, model.config());
    const auto bags = load_bags(cfg);
    finalize(cfg, "evaluate");
    bool patches = true;
    for (const auto& b : bags) patches = patches && b.patch_labels.has_value();
    const double lambda = patches ? cfg.real("lambda") : 0.0;
    const auto threshold = nearest_rank_threshold(bag_lengths(bags), cfg.real("long_percentile"));
    const auto m = measure(model, bags, lambda, threshold);

    const auto dir = output_dir(cfg);
    Row header{"id", "label", "length"};
    for (std::size_t c = 0; c < model.config().num_classes; ++c) header.push_back("p_" + std::to_string(c));
    std::vector<Row> rows;
    for (std::size_t i = 0; i < bags.size(); ++i) {
        Row r{bags[i].id, std::to_string(bags[i].slide_label), std::to_string(bags[i].length())};
        for (double p : m.ev.predictions[i].scores) r.push_back(num(p));
        rows.push_back(std::move(r));
    }
    write_csv(dir / "predictions.csv", header, rows);
    read_csv(dir / "predictions.csv", header, 1);

    const Row mheader{"bags", "loss", "accuracy", "auroc", "patch_auroc", "long_threshold", "long_bags", "long_accuracy"};
    write_csv(dir / "metrics.csv", mheader,
              {{num(bags.size()), num(m.ev.loss), num(m.ev.accuracy), num(m.ev.auroc), num(m.patch), num(threshold),
                num(m.long_bags), num(m.long_accuracy)}});
    read_csv(dir / "metrics.csv", mheader, 0);
    std::cout << "accuracy " << num(m.ev.accuracy) << ", auroc " << num(m.ev.auroc) << " on " << bags.size()
              << " bags\n";
}

void cmd_kernel_check(RunConfig& cfg) {
    const auto trials = cfg.size("kernel.trials");
    const auto max_state = cfg.size("kernel.max_state");
    const auto max_length = cfg.size("kernel.max_length");
    const double tolerance = cfg.real("kernel.tolerance");
    const bool fault = cfg.flag("kernel.inject_fault");
    if (max_state < 2) throw ConfigError("kernel.max_state must be at least 2");
    if (max_length < 1) throw ConfigError("kernel.max_length must be at least 1");
    finalize(cfg, "kernel-check");

    Rng rng = substream(cfg.u64("seed"), "kernel-check");
    std::uniform_int_distribution<std::size_t> n_dist(1, max_state / 2), l_dist(1, max_length);
    std::uniform_real_distribution<double> re(0.05, 2.0), im(-10.0, 10.0), log_dt(std::log(1e-3), std::log(1e-1));
    std::normal_distribution<double> normal, half(0.0, std::sqrt(0.5));
    std::vector<Row> rows;
    double worst = 0.0;
    for (auto rule : {Discretization::bilinear, Discretization::zoh}) {
        for (std::size_t t = 0; t < trials; ++t) {
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
            auto kernel = compute_kernel(disc, p.c, u.size());
            if (fault) kernel.values[0] = -kernel.values[0];
            const auto y_conv = convolve(kernel, u, p.d);
            double diff = 0.0, scale = 0.0;
            for (std::size_t i = 0; i < u.size(); ++i) {
                diff = std::max(diff, std::fabs(y_conv[i] - y_rec[i]));
                scale = std::max(scale, std::fabs(y_rec[i]));
            }
            const double rel = scale > 0.0 ? diff / scale : diff;
            worst = std::max(worst, rel);
            rows.push_back({to_string(rule), num(t), num(n), num(u.size()), num(rel)});
        }
    }
    const Row header{"rule", "trial", "n_half", "length", "relative_error"};
    const auto path = output_dir(cfg) / "kernel_check.csv";
    write_csv(path, header, rows);
    read_csv(path, header, 1);
    if (trials == 0) {
        std::cout << "kernel-check: 0 trials, vacuous pass\n";
        return;
    }
    std::cout << "kernel-check: " << rows.size() << " trials, worst relative error " << num(worst) << " (tolerance "
              << num(tolerance) << ")\n";
    if (!(worst <= tolerance))
        throw CheckFailure("kernel-check worst relative error " + num(worst) + " exceeds tolerance " + num(tolerance));
    std::cout << "PASS\n";
}

void cmd_grad_check(RunConfig& cfg) {
    const auto L = cfg.size("grad.length");
    const double step = cfg.real("grad.step");
    const double tolerance = cfg.real("grad.tolerance");
    ModelConfig base;
    base.input_dim = cfg.size("grad.input_dim");
    base.hidden_dim = cfg.size("grad.hidden_dim");
    base.state_dim = cfg.size("grad.state_dim");
    base.num_classes = cfg.size("num_classes");
    base.num_ssm_layers = cfg.size("num_ssm_layers");
    base.patch_classes = cfg.size("patch_classes");
    base.validate();
    if (L == 0) throw ConfigError("grad.length must be positive");
    if (!(step > 0.0)) throw ConfigError("grad.step must be positive");
    finalize(cfg, "grad-check");

    Rng rng = substream(cfg.u64("seed"), "grad-check");
    std::normal_distribution<double> normal;
    Bag bag;
    bag.id = "grad_check";
    bag.features.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(base.input_dim));
    for (Eigen::Index i = 0; i < bag.features.size(); ++i) bag.features.data()[i] = static_cast<float>(normal(rng));
    bag.slide_label = static_cast<int>(base.num_classes - 1);
    bag.patch_labels = std::vector<int>(L);
    for (std::size_t i = 0; i < L; ++i) (*bag.patch_labels)[i] = static_cast<int>(rng() % base.patch_classes);

    std::vector<Row> rows;
    std::size_t failures = 0, checked = 0;
    double worst = 0.0;
    for (auto rule : {Discretization::bilinear, Discretization::zoh}) {
        for (bool multitask : {false, true}) {
            auto c = base;
            c.discretization = rule;
            c.multitask = multitask;
            const double lambda = multitask ? cfg.real("lambda") : 0.0;
            auto model = MilModel<double>::initialize(c, rng());
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
                    p->value.data()[i] = saved + step;
                    const double up = loss();
                    p->value.data()[i] = saved - step;
                    const double down = loss();
                    p->value.data()[i] = saved;
                    const double numeric = (up - down) / (2.0 * step);
                    const double analytic = p->grad.data()[i];
                    // Relative error with a floor so that vanishing gradients compare absolutely.
                    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
                    const double rel = std::fabs(analytic - numeric) / denom;
                    worst = std::max(worst, rel);
                    ++checked;
                    if (!(rel <= tolerance)) ++failures;
                    rows.push_back({to_string(rule), multitask ? "true" : "false", p->name, num(std::size_t(i)),
                                    num(analytic), num(numeric), num(rel)});
                }
            }
        }
    }
    const Row header{"rule", "multitask", "parameter", "index", "analytic", "numeric", "relative_error"};
    const auto path = output_dir(cfg) / "grad_check.csv";
    write_csv(path, header, rows);
    read_csv(path, header, 3);
    std::cout << "grad-check: " << checked << " coordinates, worst relative error " << num(worst) << " (tolerance "
              << num(tolerance) << ")\n";
    if (failures)
        throw CheckFailure("grad-check: " + std::to_string(failures) + " of " + std::to_string(checked) +
                           " coordinates exceed tolerance " + num(tolerance));
    std::cout << "PASS\n";
}

void cmd_param_count(RunConfig& cfg) {
    const auto c = cfg.model();
    finalize(cfg, "param-count");
    const MilModel<float> model(c);
    KeyValues kv{{"closed_form", num(count_parameters(c))}, {"instantiated", num(model.parameter_count())}};
    for (const auto* p : model.parameters()) kv.emplace_back("parameter." + p->name, num(std::size_t(p->size())));
    write_and_verify_key_values(output_dir(cfg) / "param_count.txt", kv);
    std::cout << count_parameters(c) << '\n';
    if (count_parameters(c) != model.parameter_count())
        throw CheckFailure("closed-form count " + num(count_parameters(c)) + " differs from instantiated count " +
                           num(model.parameter_count()));
}

struct Timing {
    double mean = 0.0;
    double stddev = 0.0;
};

template <typename F>
Timing time_repeats(std::size_t repeats, F&& run) {
    run();  // warm-up: FFT plans and allocator
    std::vector<double> t;
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto start = std::chrono::steady_clock::now();
        run();
        t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    Timing out;
    for (double v : t) out.mean += v;
    out.mean /= static_cast<double>(t.size());
    if (t.size() > 1) {
        double ss = 0.0;
        for (double v : t) ss += (v - out.mean) * (v - out.mean);
        out.stddev = std::sqrt(ss / static_cast<double>(t.size() - 1));
    }
    return out;
}

void cmd_bench(RunConfig& cfg) {
    const auto L = cfg.size("bench.length");
    const auto D = cfg.size("bench.dim");
    const auto repeats = cfg.size("bench.repeats");
    if (L == 0 || D == 0 || repeats == 0) throw ConfigError("bench length, dim and repeats must be positive");
    cfg.set("input_dim", std::to_string(D), false);
    const auto c = cfg.model();
    finalize(cfg, "bench");

    const auto seed = cfg.u64("seed");
    const auto model = MilModel<float>::initialize(c, seed);
    const auto mean_pool = PoolingBaseline<float>::initialize(D, c.num_classes, PoolKind::mean, seed);
    const auto max_pool = PoolingBaseline<float>::initialize(D, c.num_classes, PoolKind::max, seed);
    Rng rng = substream(seed, "bench");
    std::normal_distribution<float> normal;
    Tensor<float> bag(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(D));
    for (Eigen::Index i = 0; i < bag.size(); ++i) bag.data()[i] = normal(rng);

    std::vector<double> conv_p, rec_p;
    std::vector<std::pair<std::string, Timing>> results;
    std::cout << "bench: L = " << L << ", D = " << D << ", H = " << c.hidden_dim << ", N = " << c.state_dim << ", "
              << repeats << " repeats\n";
    auto report = [&](const std::string& mode, Timing t) {
        std::cout << "  " << std::left << std::setw(12) << mode << " mean " << num(t.mean) << " s, std "
                  << num(t.stddev) << " s\n";
        results.emplace_back(mode, t);
    };
    report("convolution", time_repeats(repeats, [&] { conv_p = model.forward(bag, SsmMode::convolution).probabilities; }));
    report("recurrence", time_repeats(repeats, [&] { rec_p = model.forward(bag, SsmMode::recurrence).probabilities; }));
    report("mean_pool", time_repeats(repeats, [&] { mean_pool.forward(bag); }));
    report("max_pool", time_repeats(repeats, [&] { max_pool.forward(bag); }));

    double diff = 0.0;
    for (std::size_t k = 0; k < conv_p.size(); ++k) diff = std::max(diff, std::fabs(conv_p[k] - rec_p[k]));
    const double speedup = results[1].second.mean / results[0].second.mean;
    std::cout << "  convolution speedup over recurrence " << num(speedup) << "x, max probability difference "
              << num(diff) << '\n';

    const Row header{"mode", "length", "dim", "repeats", "mean_seconds", "std_seconds"};
    std::vector<Row> rows;
    for (const auto& [mode, t] : results) rows.push_back({mode, num(L), num(D), num(repeats), num(t.mean), num(t.stddev)});
    const auto dir = output_dir(cfg);
    write_csv(dir / "bench.csv", header, rows);
    read_csv(dir / "bench.csv", header, 1);
    write_and_verify_key_values(dir / "bench_summary.txt",
                                {{"speedup_convolution_over_recurrence", num(speedup)},
                                 {"max_probability_difference", num(diff)}});
}

void cmd_synth(RunConfig& cfg) {
    if (cfg.str("synthetic").empty()) cfg.set("synthetic", "needle", false);
    const auto spec = cfg.synthetic();
    finalize(cfg, "synth");
    const auto bags = generate_synthetic(spec, cfg.u64("seed"));
    const auto manifest = save_dataset(output_dir(cfg), bags);
    const auto back = load_manifest(manifest);
    if (back.size() != bags.size()) throw IoError("synthetic dataset did not read back");
    for (std::size_t i = 0; i < bags.size(); ++i)
        if (back[i].id != bags[i].id || !(back[i].features == bags[i].features) ||
            back[i].patch_labels != bags[i].patch_labels || back[i].coords != bags[i].coords)
            throw IoError("bag '" + bags[i].id + "' did not read back identically");
    std::cout << "wrote " << bags.size() << " bags to " << manifest.string() << '\n';
}

void cmd_export_heatmap(RunConfig& cfg) {
    if (cfg.str("checkpoint").empty()) throw ConfigError("export-heatmap needs --checkpoint");
    if (cfg.str("bag_id").empty()) throw ConfigError("export-heatmap needs --bag-id");
    const auto model = read_checkpoint<float>(cfg.str("checkpoint"));
    adopt_model_config(cfg, model.config());
    if (!model.config().multitask)
        throw ConfigError("checkpoint has no patch head; heatmaps need a model trained with --multitask");
    if (model.config().patch_classes < 2) throw ConfigError("heatmaps need at least two patch classes");
    const auto bags = load_bags(cfg);
    finalize(cfg, "export-heatmap");
    const auto it = std::find_if(bags.begin(), bags.end(), [&](const Bag& b) { return b.id == cfg.str("bag_id"); });
    if (it == bags.end()) throw ConfigError("no bag with id '" + cfg.str("bag_id") + "'");
    if (!it->coords) throw ContractViolation("bag '" + it->id + "' has no coordinates");
    const auto out = model.forward(it->features);
    std::vector<double> probs(static_cast<std::size_t>(out.patch_probabilities.rows()));
    for (std::size_t i = 0; i < probs.size(); ++i)
        probs[i] = static_cast<double>(out.patch_probabilities(static_cast<Eigen::Index>(i), 1));
    const auto heatmap = build_heatmap(*it->coords, probs);
    const auto path = output_dir(cfg) / ("heatmap_" + it->id + ".txt");
    {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw IoError("cannot write '" + path.string() + "'");
        write_heatmap(f, heatmap);
    }
    std::ifstream f(path);
    if (!(parse_heatmap(f) == heatmap)) throw IoError(path.string() + " did not read back identically");
    std::cout << "wrote " << heatmap.rows << "x" << heatmap.cols << " heatmap to " << path.string() << '\n';
}

void cmd_stats(RunConfig& cfg) {
    const auto bags = load_bags(cfg);
    finalize(cfg, "stats");
    const auto s = corpus_stats(bags);
    const double p = cfg.real("long_percentile");
    const auto threshold = nearest_rank_threshold(bag_lengths(bags), p);
    const auto long_count = long_sequence_split(bags, p).size();
    std::ostringstream mean;
    mean << std::fixed << std::setprecision(2) << s.mean_length;
    const KeyValues kv{{"count", num(s.count)},           {"mean_length", mean.str()},
                       {"min_length", num(s.min_length)}, {"max_length", num(s.max_length)},
                       {"long_percentile", num(p)},       {"long_threshold", num(threshold)},
                       {"long_count", num(long_count)}};
    write_and_verify_key_values(output_dir(cfg) / "stats.txt", kv);
    for (const auto& [k, v] : kv) std::cout << k << ' ' << v << '\n';
}

std::string one_line(std::string s) {
    for (auto& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"State-space multiple-instance learning on bags of patch features"};
    app.name("s4mil");
    app.require_subcommand(1, 1);
    app.fallthrough();

    std::string config_path;
    std::vector<std::string> overrides;
    std::vector<std::pair<std::string, std::string>> flags;
    auto to_key = [&](CLI::App* a, const std::string& flag, const std::string& key, const std::string& help) {
        a->add_option_function<std::string>(flag, [&flags, key](const std::string& v) { flags.emplace_back(key, v); },
                                            help);
    };
    app.add_option("--config", config_path, "key=value configuration file");
    app.add_option("--set", overrides, "override one key (key=value); repeatable")->allow_extra_args(false);
    to_key(&app, "--seed", "seed", "master seed");
    to_key(&app, "--output", "output", "output directory");
    to_key(&app, "--threads", "threads", "worker cap (0 = all cores)");

    auto* train = app.add_subcommand("train", "k-fold training with early stopping");
    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
    auto* kernel = app.add_subcommand("kernel-check", "recurrence vs convolution on random systems");
    auto* grad = app.add_subcommand("grad-check", "analytic vs finite-difference gradients");
    auto* params = app.add_subcommand("param-count", "trainable parameter count");
    auto* bench = app.add_subcommand("bench", "forward-pass timing");
    auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
    auto* heatmap = app.add_subcommand("export-heatmap", "patch-probability grid for one bag");
    auto* stats = app.add_subcommand("stats", "corpus length statistics");

    for (auto* a : {train, evaluate_cmd, heatmap, stats}) {
        to_key(a, "--manifest", "manifest", "bag manifest");
        to_key(a, "--synthetic", "synthetic", "synthetic task (needle or majority)");
    }
    to_key(synth, "--synthetic", "synthetic", "synthetic task (needle or majority)");
    to_key(train, "--folds", "folds", "cross-validation folds (default 10)");
    to_key(train, "--lambda", "lambda", "patch loss weight (default 5)");
    train->add_flag_callback("--multitask", [&] { flags.emplace_back("multitask", "true"); }, "train the patch head");
    for (auto* a : {evaluate_cmd, heatmap}) to_key(a, "--checkpoint", "checkpoint", "S4MC checkpoint");
    to_key(heatmap, "--bag-id", "bag_id", "bag to export");
    to_key(kernel, "--trials", "kernel.trials", "random systems per rule");
    to_key(kernel, "--tolerance", "kernel.tolerance", "largest accepted relative error");
    kernel->add_flag_callback("--inject-fault", [&] { flags.emplace_back("kernel.inject_fault", "true"); })
        ->group("");
    to_key(bench, "--length", "bench.length", "sequence length (default 30000)");
    to_key(bench, "--dim", "bench.dim", "feature dimension (default 1024)");
    to_key(bench, "--repeats", "bench.repeats", "timed repetitions (default 100)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error[usage]: " << one_line(e.what()) << '\n';
        return 2;
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const auto& o : overrides) cfg.apply_assignment(o, "--set");
        for (const auto& [k, v] : flags) cfg.set(k, v);

        if (train->parsed()) cmd_train(cfg);
        else if (evaluate_cmd->parsed()) cmd_evaluate(cfg);
        else if (kernel->parsed()) cmd_kernel_check(cfg);
        else if (grad->parsed()) cmd_grad_check(cfg);
        else if (params->parsed()) cmd_param_count(cfg);
        else if (bench->parsed()) cmd_bench(cfg);
        else if (synth->parsed()) cmd_synth(cfg);
        else if (heatmap->parsed()) cmd_export_heatmap(cfg);
        else if (stats->parsed()) cmd_stats(cfg);
    } catch (const Error& e) {
        std::cerr << "error[" << e.category() << "]: " << one_line(e.what()) << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << one_line(e.what()) << '\n';
        return 1;
    }
    return 0;
}
