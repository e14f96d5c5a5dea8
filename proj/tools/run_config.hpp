#pragma once

// Flat key=value run configuration. Values are resolved in order: built-in
// defaults, --config file, --set overrides, then per-command flags.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "s4mil/data_io.hpp"
#include "s4mil/error.hpp"
#include "s4mil/model.hpp"
#include "s4mil/synthetic.hpp"
#include "s4mil/train.hpp"

namespace s4mil::cli {

struct KeySpec {
    const char* key;
    const char* fallback;
    const char* help;
};

inline const std::vector<KeySpec>& known_keys() {
    static const std::vector<KeySpec> keys{
        {"seed", "0", "master seed; every random draw derives from it"},
        {"threads", "0", "worker cap (0 = hardware concurrency)"},
        {"output", "s4mil_out", "output directory"},
        {"manifest", "", "bag manifest (csv)"},
        {"synthetic", "", "synthetic task instead of a manifest: needle or majority"},
        {"checkpoint", "", "model checkpoint (S4MC)"},
        {"bag_id", "", "bag to export"},
        {"input_dim", "1024", "feature dimension of the bags"},
        {"hidden_dim", "512", "model width H"},
        {"state_dim", "32", "SSM state size N (even)"},
        {"num_classes", "2", "slide classes"},
        {"num_ssm_layers", "1", "stacked SSM + mixing blocks"},
        {"multitask", "false", "add the per-token patch head"},
        {"patch_classes", "2", "patch classes of the patch head"},
        {"discretization", "bilinear", "bilinear or zoh"},
        {"learning_rate", "2e-4", ""},
        {"weight_decay", "1e-4", "decoupled weight decay"},
        {"adam_beta1", "0.9", ""},
        {"adam_beta2", "0.999", ""},
        {"adam_eps", "1e-8", ""},
        {"lookahead_k", "5", ""},
        {"lookahead_alpha", "0.5", ""},
        {"patience", "10", "early-stopping patience in epochs"},
        {"max_epochs", "100", ""},
        {"lambda", "5", "patch loss weight"},
        {"accumulation", "1", "bags per optimizer step"},
        {"folds", "10", "cross-validation folds"},
        {"long_percentile", "85", "nearest-rank percentile for the long-sequence subset"},
        {"synth.num_bags", "200", ""},
        {"synth.min_length", "128", ""},
        {"synth.max_length", "512", ""},
        {"synth.feature_dim", "16", ""},
        {"synth.signal_rate", "0.02", "fraction of signal tokens in positive bags"},
        {"synth.noise_sigma", "1", ""},
        {"synth.signal_shift", "1", "shift added to every feature of a signal token"},
        {"kernel.trials", "100", "random systems per discretization rule"},
        {"kernel.max_state", "16", "largest state size N"},
        {"kernel.max_length", "512", "longest sequence"},
        {"kernel.tolerance", "1e-6", "largest accepted relative error"},
        {"kernel.inject_fault", "false", "flip the sign of the first kernel tap (self-test)"},
        {"grad.length", "16", ""},
        {"grad.input_dim", "8", ""},
        {"grad.hidden_dim", "4", ""},
        {"grad.state_dim", "4", ""},
        {"grad.step", "1e-5", "central-difference step"},
        {"grad.tolerance", "1e-4", "largest accepted relative error"},
        {"bench.length", "30000", ""},
        {"bench.dim", "1024", ""},
        {"bench.repeats", "100", ""},
    };
    return keys;
}

class RunConfig {
public:
    RunConfig() {
        for (const auto& k : known_keys()) values_[k.key] = k.fallback;
    }

    void set(const std::string& key, const std::string& value, bool explicit_value = true) {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
        it->second = value;
        if (explicit_value) explicit_.insert(key);
    }

    /// "key=value"; whitespace around both parts is ignored.
    void apply_assignment(const std::string& text, const std::string& where) {
        const auto eq = text.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + text + "'");
        const auto key = detail::trim(text.substr(0, eq));
        try {
            set(key, detail::trim(text.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }

    void load_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file '" + path.string() + "'");
        std::string line;
        for (std::size_t n = 1; std::getline(in, line); ++n) {
            line = detail::trim(line);
            if (line.empty() || line[0] == '#') continue;
            apply_assignment(line, path.string() + ":" + std::to_string(n));
        }
    }

    bool is_explicit(const std::string& key) const { return explicit_.count(key) > 0; }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
        return it->second;
    }

    std::uint64_t u64(const std::string& key) const {
        const auto& s = str(key);
        std::uint64_t v = 0;
        const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || end != s.data() + s.size())
            throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + s + "'");
        return v;
    }

    std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

    double real(const std::string& key) const {
        const auto& s = str(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used == s.size()) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError("key '" + key + "': expected a number, got '" + s + "'");
    }

    bool flag(const std::string& key) const {
        const auto& s = str(key);
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw ConfigError("key '" + key + "': expected true or false, got '" + s + "'");
    }

    ModelConfig model() const {
        ModelConfig c;
        c.input_dim = size("input_dim");
        c.hidden_dim = size("hidden_dim");
        c.state_dim = size("state_dim");
        c.num_classes = size("num_classes");
        c.num_ssm_layers = size("num_ssm_layers");
        c.multitask = flag("multitask");
        c.patch_classes = size("patch_classes");
        const auto& rule = str("discretization");
        if (rule == "bilinear")
            c.discretization = Discretization::bilinear;
        else if (rule == "zoh")
            c.discretization = Discretization::zoh;
        else
            throw ConfigError("key 'discretization': expected bilinear or zoh, got '" + rule + "'");
        c.validate();
        return c;
    }

    TrainConfig training() const {
        TrainConfig t;
        t.optimizer.learning_rate = real("learning_rate");
        t.optimizer.weight_decay = real("weight_decay");
        t.optimizer.beta1 = real("adam_beta1");
        t.optimizer.beta2 = real("adam_beta2");
        t.optimizer.eps = real("adam_eps");
        t.optimizer.lookahead_k = size("lookahead_k");
        t.optimizer.lookahead_alpha = real("lookahead_alpha");
        t.patience = size("patience");
        t.max_epochs = size("max_epochs");
        t.lambda = real("lambda");
        t.accumulation = size("accumulation");
        t.seed = u64("seed");
        t.validate();
        return t;
    }

    SyntheticTaskSpec synthetic() const {
        SyntheticTaskSpec s;
        const auto& task = str("synthetic");
        if (task == "needle" || task.empty())
            s.task = SyntheticTask::needle;
        else if (task == "majority")
            s.task = SyntheticTask::majority;
        else
            throw ConfigError("key 'synthetic': expected needle or majority, got '" + task + "'");
        s.num_bags = size("synth.num_bags");
        s.min_length = size("synth.min_length");
        s.max_length = size("synth.max_length");
        s.feature_dim = size("synth.feature_dim");
        s.signal_rate = real("synth.signal_rate");
        s.noise_sigma = real("synth.noise_sigma");
        s.signal_shift = real("synth.signal_shift");
        s.validate();
        return s;
    }

    /// Every key in table order, one "key=value" per line.
    void write(const std::filesystem::path& path, const std::string& command) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write '" + path.string() + "'");
        out << "# s4mil " << command << '\n';
        for (const auto& k : known_keys()) out << k.key << '=' << values_.at(k.key) << '\n';
        if (!out) throw IoError("failed writing '" + path.string() + "'");
    }

    bool operator==(const RunConfig& other) const { return values_ == other.values_; }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> explicit_;
};

}  // namespace s4mil::cli
