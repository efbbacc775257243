#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "labrl/fqi.hpp"
#include "labrl/forecast.hpp"
#include "labrl/mdp.hpp"

namespace labrl::opeval {

/// Floor applied to fitted action probabilities before importance ratios.
inline constexpr double k_probability_floor = 1e-3;

/// A logged trajectory over some discrete action set. States stay with the
/// caller; policies are queried per (trajectory, step).
struct trajectory {
    std::vector<int> actions;
    std::vector<vec4> rewards;
};

/// pi(action | state at (trajectory, step)); must be strictly positive for
/// logged actions.
using policy_fn = std::function<double(std::size_t traj, std::size_t step, int action)>;

struct stochastic_policy {
    std::string provenance;
    policy_fn prob;
};

struct value_estimate {
    vec4 value{};
    std::vector<double> ess;  // effective sample size per time step
    std::size_t n_trajectories = 0;
    std::size_t zero_weight_steps = 0;
};

/// Per-step weighted importance sampling from precomputed per-step ratios
/// pi_e/pi_b. Cumulative ratios are clipped at rho_clip before
/// normalization; trajectories shorter than the longest keep their final
/// weight and contribute zero reward.
value_estimate ps_wis_from_ratios(const std::vector<std::vector<double>>& step_ratios,
                                  const std::vector<std::vector<vec4>>& rewards, double gamma_wis,
                                  double rho_clip);

value_estimate ps_wis(std::span<const trajectory> trajectories, const stochastic_policy& pi_e,
                      const stochastic_policy& pi_b, double gamma_wis = 1.0,
                      double rho_clip = 1e3);

/// Ensemble classifier over the 16 joint actions, fit on observed
/// state-action pairs.
trees::ensemble fit_behaviour_policy(std::span<const mdp::transition> train,
                                     const trees::tree_params& params);

/// Joint action probabilities when each lab is ordered independently with
/// probability p.
std::array<double, mdp::n_actions> random_joint_probs(double p);

/// Empirical per-lab order probability in a transition set.
std::array<double, 4> empirical_order_probability(std::span<const mdp::transition> data);

/// Product-rule softening of deterministic per-lab recommendations: each
/// recommended bit is kept with probability 1 - smoothing.
std::array<double, mdp::n_actions> softened_joint_probs(const std::array<bool, 4>& recommended,
                                                        double smoothing);
double softened_bit_prob(bool recommended_bit, int action_bit, double smoothing);

// ---------------------------------------------------------------------------
// Clinical metrics.
// ---------------------------------------------------------------------------

/// Collapses runs of recommendations with no intervening clinician order to
/// their first hour; returns the kept hours.
std::vector<int> onset_filter(std::span<const uint8_t> clinician,
                              std::span<const fqi::rec> recommended);

struct order_reduction {
    std::array<std::size_t, 4> clinician{};
    std::array<std::size_t, 4> recommended_raw{};
    std::array<std::size_t, 4> recommended_filtered{};
    // Absent when a lab has no clinician orders.
    std::array<std::optional<double>, 4> reduction_pct{};
};

struct admission_series {
    std::array<std::vector<uint8_t>, 4> clinician;
    std::array<std::vector<fqi::rec>, 4> recommended;
};

order_reduction metric_order_reduction(std::span<const admission_series> series);

/// Normalized gap between the smoothed estimate (all observations) and the
/// strictly-past filtered forecast at one order time. nullopt when the
/// series is empty.
std::optional<double> order_info_gain(const forecast::trait_series& series,
                                      const forecast::kernel_params& params, double order_time,
                                      double sigma_floor);

struct info_gain_result {
    std::vector<double> gains;
    std::size_t skipped = 0;
    double mean() const;
};

struct tta_result {
    std::vector<double> intervals;
    std::size_t excluded = 0;
    double mean() const;
};

/// For each intervention onset, the time back to the earliest order within
/// [onset - window, onset]; onsets with no qualifying order are excluded
/// and counted.
tta_result metric_time_to_treatment(std::span<const double> order_times,
                                    std::span<const double> onsets, double window);

}  // namespace labrl::opeval
