#include "moelab/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace moelab {

GradCheckReport grad_check(const std::function<Tensor()>& make_loss,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double step) {
    for (const auto& [name, t] : params) {
        for (real v : t.values()) {
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError("grad_check: non-finite value in parameter " + name);
        }
    }
    for (auto& [name, t] : params) const_cast<Tensor&>(t).zero_grad();

    // Record the values of detached branches on the baseline pass, then
    // replay them during finite differences: the numeric oracle must
    // differentiate the value-equivalent function with detached branches
    // frozen, exactly as the analytic gradient treats them.
    detach_record_begin();
    Tensor loss = make_loss();
    if (loss.numel() != 1) throw ContractError("grad_check: function must return a scalar");
    backward(loss);
    auto eval_frozen = [&make_loss] {
        detach_replay_begin();
        const double v = static_cast<double>(make_loss().scalar());
        return v;
    };

    GradCheckReport report;

    for (const auto& [name, t] : params) {
        Tensor param = t;
        GradCheckEntry entry{name, 0.0};
        std::vector<real> analytic =
            param.has_grad() ? param.grad() : std::vector<real>(param.numel(), real(0));
        for (std::size_t i = 0; i < param.numel(); ++i) {
            const real saved = param.values()[i];
            param.values()[i] = saved + static_cast<real>(step);
            const double up = eval_frozen();
            param.values()[i] = saved - static_cast<real>(step);
            const double down = eval_frozen();
            param.values()[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            if (!std::isfinite(numeric))
                throw NumericError("grad_check: non-finite finite difference for " + name);
            const double a = static_cast<double>(analytic[i]);
            // Relative error with a unit floor: near-zero gradients are
            // compared absolutely, avoiding blow-up from FD round-off.
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1.0});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    detach_capture_end();
    return report;
}

}  // namespace moelab
