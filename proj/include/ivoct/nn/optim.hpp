#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "ivoct/nn/tensor.hpp"

namespace ivoct::nn {

struct TrainSchedule {
    double lr0 = 0.001;
    double drop_factor = 0.2;
    // Learning-rate drop period in epochs.
    int drop_period_epochs = 10;
    int max_epochs = 50;
    int patience = 5;
    double min_rel_improve = 1e-4;
    double l2_lambda = 1e-4;
    // Keep the weights of the epoch with the lowest validation loss instead
    // of the weights at the stopping epoch.
    bool restore_best = false;

    void validate() const;
};

nlohmann::json to_json(const TrainSchedule& s);
// Overlays recognised keys onto `base`; unknown keys raise ConfigError.
TrainSchedule schedule_from_json(const nlohmann::json& j, TrainSchedule base = {});

// lr0 * drop_factor^floor(epoch / drop_period_epochs).
double lr_piecewise(int epoch, const TrainSchedule& sched);

// True once max_epochs losses have been recorded, or when the best loss of the
// last `patience` epochs improved on the earlier best by less than
// min_rel_improve of it.
bool early_stop(std::span<const double> val_loss_history, const TrainSchedule& sched);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double l2_lambda = 0.0;  // added as lambda * param to the gradient of decaying params
};

// Bias-corrected Adam over a fixed parameter list. Moments are keyed by position.
class Adam {
public:
    Adam(std::vector<Param*> params, AdamConfig cfg = {});

    // Applies one update with learning rate lr. Throws TrainingError on a
    // non-finite gradient, naming the parameter and step index.
    void step(double lr);
    void zero_grad();
    long long steps() const noexcept { return t_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }

private:
    std::vector<Param*> params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    long long t_ = 0;
};

}  // namespace ivoct::nn
