#include "labrl/opeval.hpp"

#include <algorithm>
#include <cmath>

namespace labrl::opeval {

value_estimate ps_wis_from_ratios(const std::vector<std::vector<double>>& step_ratios,
                                  const std::vector<std::vector<vec4>>& rewards, double gamma_wis,
                                  double rho_clip) {
    if (step_ratios.size() != rewards.size())
        throw argument_error("ratio and reward trajectory counts differ");
    const std::size_t n = step_ratios.size();
    if (n == 0) throw argument_error("ps_wis requires at least one trajectory");

    std::size_t horizon = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (step_ratios[i].size() != rewards[i].size())
            throw argument_error("ratio and reward lengths differ within a trajectory");
        horizon = std::max(horizon, step_ratios[i].size());
    }

    value_estimate out;
    out.n_trajectories = n;
    out.ess.resize(horizon, 0.0);

    // rho_t per trajectory: the cumulative product through step t, clipped.
    // Ended trajectories keep their final weight and contribute no reward.
    std::vector<double> rho(n, 1.0);
    double discount = 1.0;
    for (std::size_t t = 0; t < horizon; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            if (t < step_ratios[i].size())
                rho[i] = std::min(rho[i] * step_ratios[i][t], rho_clip);
        }
        double total = 0.0, total_sq = 0.0;
        for (double r : rho) {
            total += r;
            total_sq += r * r;
        }
        out.ess[t] = total_sq > 0.0 ? total * total / total_sq : 0.0;
        if (total <= 0.0) {
            ++out.zero_weight_steps;
            continue;
        }
        vec4 step_sum{};
        for (std::size_t i = 0; i < n; ++i) {
            if (t >= rewards[i].size()) continue;
            for (int d = 0; d < 4; ++d) step_sum[d] += rho[i] * rewards[i][t][d];
        }
        for (int d = 0; d < 4; ++d) out.value[d] += discount * (step_sum[d] / total);
        discount *= gamma_wis;
    }
    return out;
}

value_estimate ps_wis(std::span<const trajectory> trajectories, const stochastic_policy& pi_e,
                      const stochastic_policy& pi_b, double gamma_wis, double rho_clip) {
    std::vector<std::vector<double>> ratios(trajectories.size());
    std::vector<std::vector<vec4>> rewards(trajectories.size());
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        const auto& traj = trajectories[i];
        if (traj.actions.size() != traj.rewards.size())
            throw argument_error("trajectory actions and rewards differ in length");
        ratios[i].resize(traj.actions.size());
        rewards[i] = traj.rewards;
        for (std::size_t t = 0; t < traj.actions.size(); ++t) {
            const double pb = pi_b.prob(i, t, traj.actions[t]);
            if (!(pb > 0.0))
                throw argument_error("behaviour policy gives zero probability to a logged action");
            ratios[i][t] = pi_e.prob(i, t, traj.actions[t]) / pb;
        }
    }
    return ps_wis_from_ratios(ratios, rewards, gamma_wis, rho_clip);
}

trees::ensemble fit_behaviour_policy(std::span<const mdp::transition> train,
                                     const trees::tree_params& params) {
    if (train.empty()) throw argument_error("behaviour policy requires a nonempty training set");
    std::vector<double> x(train.size() * mdp::state_dim);
    std::vector<int> labels(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        std::copy(train[i].state.begin(), train[i].state.end(),
                  x.begin() + static_cast<long>(i * mdp::state_dim));
        labels[i] = train[i].action;
    }
    return trees::ensemble::fit_classifier({x.data(), train.size(), mdp::state_dim}, labels,
                                           mdp::n_actions, params);
}

std::array<double, mdp::n_actions> random_joint_probs(double p) {
    if (!(p > 0.0 && p < 1.0)) throw argument_error("order probability must lie strictly in (0, 1)");
    std::array<double, mdp::n_actions> out{};
    for (int a = 0; a < mdp::n_actions; ++a) {
        double prob = 1.0;
        for (int lab = 0; lab < n_labs; ++lab)
            prob *= mdp::orders_lab(static_cast<uint8_t>(a), lab) ? p : 1.0 - p;
        out[static_cast<std::size_t>(a)] = prob;
    }
    return out;
}

std::array<double, 4> empirical_order_probability(std::span<const mdp::transition> data) {
    std::array<double, 4> out{};
    if (data.empty()) return out;
    for (const auto& tr : data)
        for (int lab = 0; lab < n_labs; ++lab)
            if (mdp::orders_lab(tr.action, lab)) out[static_cast<std::size_t>(lab)] += 1.0;
    for (auto& v : out) v /= static_cast<double>(data.size());
    return out;
}

double softened_bit_prob(bool recommended_bit, int action_bit, double smoothing) {
    const bool match = (action_bit != 0) == recommended_bit;
    return match ? 1.0 - smoothing : smoothing;
}

std::array<double, mdp::n_actions> softened_joint_probs(const std::array<bool, 4>& recommended,
                                                        double smoothing) {
    if (!(smoothing > 0.0 && smoothing < 0.5))
        throw argument_error("smoothing must lie strictly in (0, 0.5)");
    std::array<double, mdp::n_actions> out{};
    for (int a = 0; a < mdp::n_actions; ++a) {
        double prob = 1.0;
        for (int lab = 0; lab < n_labs; ++lab) {
            const int bit = mdp::orders_lab(static_cast<uint8_t>(a), lab) ? 1 : 0;
            prob *= softened_bit_prob(recommended[static_cast<std::size_t>(lab)], bit, smoothing);
        }
        out[static_cast<std::size_t>(a)] = prob;
    }
    return out;
}

std::vector<int> onset_filter(std::span<const uint8_t> clinician,
                              std::span<const fqi::rec> recommended) {
    if (clinician.size() != recommended.size())
        throw argument_error("clinician and recommended series must be aligned");
    std::vector<int> kept;
    bool armed = true;
    for (std::size_t h = 0; h < recommended.size(); ++h) {
        // A recommendation in the hour is assessed before the clinician's
        // own order re-arms the filter.
        if (recommended[h] != fqi::rec::none && armed) {
            kept.push_back(static_cast<int>(h));
            armed = false;
        }
        if (clinician[h] != 0) armed = true;
    }
    return kept;
}

order_reduction metric_order_reduction(std::span<const admission_series> series) {
    order_reduction out;
    for (const auto& adm : series) {
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            for (uint8_t c : adm.clinician[l]) out.clinician[l] += c != 0 ? 1u : 0u;
            for (fqi::rec r : adm.recommended[l]) out.recommended_raw[l] += r != fqi::rec::none ? 1u : 0u;
            out.recommended_filtered[l] += onset_filter(adm.clinician[l], adm.recommended[l]).size();
        }
    }
    for (int lab = 0; lab < n_labs; ++lab) {
        const auto l = static_cast<std::size_t>(lab);
        if (out.clinician[l] == 0) continue;
        out.reduction_pct[l] = 1.0 - static_cast<double>(out.recommended_filtered[l]) /
                                         static_cast<double>(out.clinician[l]);
    }
    return out;
}

std::optional<double> order_info_gain(const forecast::trait_series& series,
                                      const forecast::kernel_params& params, double order_time,
                                      double sigma_floor) {
    if (series.times.empty()) return std::nullopt;

    // Filtered: strictly-past observations only, so the order's own result
    // cannot leak into the forecast it is judged against.
    forecast::trait_series past;
    past.id = series.id;
    for (std::size_t i = 0; i < series.times.size() && series.times[i] < order_time; ++i) {
        past.times.push_back(series.times[i]);
        past.values.push_back(series.values[i]);
    }
    const std::array<double, 1> grid = {order_time};
    const auto filtered = forecast::predict(past, params, grid, forecast::mode::filtering);
    const auto smoothed = forecast::predict(series, params, grid, forecast::mode::smoothing);

    const double sigma = std::max(filtered.stds[0], sigma_floor);
    if (!(sigma > 0.0)) return std::nullopt;
    return std::abs(smoothed.means[0] - filtered.means[0]) / sigma;
}

double info_gain_result::mean() const {
    if (gains.empty()) return 0.0;
    double s = 0.0;
    for (double g : gains) s += g;
    return s / static_cast<double>(gains.size());
}

double tta_result::mean() const {
    if (intervals.empty()) return 0.0;
    double s = 0.0;
    for (double v : intervals) s += v;
    return s / static_cast<double>(intervals.size());
}

tta_result metric_time_to_treatment(std::span<const double> order_times,
                                    std::span<const double> onsets, double window) {
    if (!(window > 0.0)) throw argument_error("time-to-treatment window must be positive");
    tta_result out;
    for (double onset : onsets) {
        double earliest = -1.0;
        for (double t : order_times) {
            if (t < onset - window || t > onset) continue;
            if (earliest < 0.0 || t < earliest) earliest = t;
        }
        if (earliest < 0.0) {
            ++out.excluded;
            continue;
        }
        out.intervals.push_back(onset - earliest);
    }
    return out;
}

}  // namespace labrl::opeval
