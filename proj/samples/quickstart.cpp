// Generates a small needle-in-a-haystack dataset, trains a compact model on
// it, evaluates on held-out bags and writes a checkpoint.

#include <filesystem>
#include <iostream>

#include "s4mil.hpp"

int main() {
    using namespace s4mil;

    SyntheticTaskSpec task;
    task.num_bags = 60;
    task.min_length = 64;
    task.max_length = 128;
    const auto bags = generate_synthetic(task, 1);

    // fold 0 held out, fold 1 for early stopping, the rest for training
    const auto plan = kfold(std::span<const Bag>(bags), 5, 1);
    std::vector<std::size_t> train_idx;
    for (std::size_t f = 2; f < plan.folds.size(); ++f)
        train_idx.insert(train_idx.end(), plan.folds[f].validation.begin(), plan.folds[f].validation.end());
    const auto train = select(bags, train_idx);
    const auto val = select(bags, plan.folds[1].validation);
    const auto test = select(bags, plan.folds[0].validation);

    ModelConfig config;
    config.input_dim = task.feature_dim;
    config.hidden_dim = 16;
    config.state_dim = 8;
    config.multitask = true;
    auto model = MilModel<float>::initialize(config, 1);
    std::cout << "parameters: " << model.parameter_count() << '\n';

    TrainConfig tc;
    tc.optimizer.learning_rate = 2e-3;
    tc.max_epochs = 15;
    tc.patience = 5;
    tc.seed = 1;
    const auto result = fit(model, train, val, tc);
    std::cout << "epochs run: " << result.history.size() << ", best epoch " << result.best_epoch << '\n';

    const auto ev = evaluate(model, std::span<const Bag>(test), tc.lambda);
    std::cout << "test accuracy " << ev.accuracy << ", auroc " << ev.auroc << ", patch auroc "
              << patch_auroc(ev, test) << '\n';

    // streaming evaluation gives the same probabilities as the FFT path
    const auto a = model.forward(test[0].features, SsmMode::convolution);
    const auto b = model.forward(test[0].features, SsmMode::recurrence);
    std::cout << "p(positive) convolution " << a.probabilities[1] << ", recurrence " << b.probabilities[1] << '\n';

    const auto path = std::filesystem::temp_directory_path() / "quickstart.s4mc";
    write_checkpoint(path, model);
    const auto restored = read_checkpoint<float>(path);
    std::cout << "checkpoint " << path.string() << " restores p(positive) "
              << restored.forward(test[0].features).probabilities[1] << '\n';
    return 0;
}
