#include "ivoct/nn/optim.hpp"

#include <cmath>

namespace ivoct::nn {

void TrainSchedule::validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("schedule: lr0 must be positive");
    if (!(drop_factor > 0.0 && drop_factor <= 1.0)) throw ConfigError("schedule: drop_factor must be in (0, 1]");
    if (drop_period_epochs < 1) throw ConfigError("schedule: drop_period_epochs must be >= 1");
    if (max_epochs < 1) throw ConfigError("schedule: max_epochs must be >= 1");
    if (patience < 1) throw ConfigError("schedule: patience must be >= 1");
    if (min_rel_improve < 0.0) throw ConfigError("schedule: min_rel_improve must be >= 0");
    if (l2_lambda < 0.0) throw ConfigError("schedule: l2_lambda must be >= 0");
}

nlohmann::json to_json(const TrainSchedule& s) {
    return {{"lr0", s.lr0},
            {"drop_factor", s.drop_factor},
            {"drop_period_epochs", s.drop_period_epochs},
            {"max_epochs", s.max_epochs},
            {"patience", s.patience},
            {"min_rel_improve", s.min_rel_improve},
            {"l2_lambda", s.l2_lambda},
            {"restore_best", s.restore_best}};
}

TrainSchedule schedule_from_json(const nlohmann::json& j, TrainSchedule s) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k == "lr0") s.lr0 = it->get<double>();
        else if (k == "drop_factor") s.drop_factor = it->get<double>();
        else if (k == "drop_period_epochs") s.drop_period_epochs = it->get<int>();
        else if (k == "max_epochs") s.max_epochs = it->get<int>();
        else if (k == "patience") s.patience = it->get<int>();
        else if (k == "min_rel_improve") s.min_rel_improve = it->get<double>();
        else if (k == "l2_lambda") s.l2_lambda = it->get<double>();
        else if (k == "restore_best") s.restore_best = it->get<bool>();
        else throw ConfigError("schedule: unknown key '" + k + "'");
    }
    s.validate();
    return s;
}

double lr_piecewise(int epoch, const TrainSchedule& sched) {
    if (epoch < 0) throw ContractError("lr_piecewise: negative epoch");
    return sched.lr0 * std::pow(sched.drop_factor, epoch / sched.drop_period_epochs);
}

bool early_stop(std::span<const double> h, const TrainSchedule& sched) {
    if (h.empty()) throw ContractError("early_stop: empty history");
    const auto n = static_cast<int>(h.size());
    if (n >= sched.max_epochs) return true;
    if (n <= sched.patience) return false;
    double before = h[0];
    for (int i = 1; i < n - sched.patience; ++i) before = std::min(before, h[i]);
    double recent = h[n - sched.patience];
    for (int i = n - sched.patience + 1; i < n; ++i) recent = std::min(recent, h[i]);
    return before - recent < sched.min_rel_improve * std::abs(before);
}

Adam::Adam(std::vector<Param*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

void Adam::step(double lr) {
    for (auto* p : params_)
        for (double g : p->grad.values())
            if (!std::isfinite(g))
                throw TrainingError("non-finite gradient in " + p->name + " at step " + std::to_string(t_ + 1));
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Param& p = *params_[k];
        const double l2 = p.decay ? cfg_.l2_lambda : 0.0;
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i] + l2 * p.value[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        }
    }
}

}  // namespace ivoct::nn
