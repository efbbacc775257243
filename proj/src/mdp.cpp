#include "labrl/mdp.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <ostream>
#include <sstream>

namespace labrl::mdp {

const std::array<std::string, state_dim>& state_feature_names() {
    static const std::array<std::string, state_dim> names = [] {
        std::array<std::string, state_dim> n;
        n[state_layout::sofa] = "sofa";
        for (int i = 0; i < 4; ++i)
            n[static_cast<std::size_t>(state_layout::vital_mean + i)] =
                trait_name(vital_traits[static_cast<std::size_t>(i)]) + "_mean";
        for (int i = 0; i < 4; ++i) {
            const std::string lab = trait_name(lab_traits[static_cast<std::size_t>(i)]);
            n[static_cast<std::size_t>(state_layout::lab_mean + i)] = lab + "_mean";
            n[static_cast<std::size_t>(state_layout::lab_std + i)] = lab + "_std";
            n[static_cast<std::size_t>(state_layout::last_value + i)] = lab + "_last";
            n[static_cast<std::size_t>(state_layout::elapsed + i)] = lab + "_elapsed";
        }
        return n;
    }();
    return names;
}

// ---------------------------------------------------------------------------
// SOFA.
// ---------------------------------------------------------------------------

sofa_table sofa_table::standard() {
    sofa_table t;
    t.fio2_ratio_below = {400.0, 300.0, 200.0, 100.0};
    t.platelet_below = {150.0, 100.0, 50.0, 20.0};
    t.bilirubin_at_least = {1.2, 2.0, 6.0, 12.0};
    t.mean_bp_below = 70.0;
    t.dopamine_points = 2;
    t.gcs_at_most = {14, 12, 9, 5};
    t.creatinine_at_least = {1.2, 2.0, 3.5, 5.0};
    return t;
}

namespace {

// Index i of each table array holds the cutoff for i+1 points.
int points_below(double value, const std::array<double, 4>& cutoffs) {
    int pts = 0;
    for (int i = 0; i < 4; ++i)
        if (value < cutoffs[static_cast<std::size_t>(i)]) pts = i + 1;
    return pts;
}

int points_at_least(double value, const std::array<double, 4>& cutoffs) {
    int pts = 0;
    for (int i = 0; i < 4; ++i)
        if (value >= cutoffs[static_cast<std::size_t>(i)]) pts = i + 1;
    return pts;
}

}  // namespace

int compute_sofa(const sofa_inputs& in, const sofa_table& table) {
    if (in.gcs < 3 || in.gcs > 15)
        throw argument_error("GCS must lie in [3, 15], got " + std::to_string(in.gcs));
    if (in.platelet < 0.0) throw argument_error("platelet count must be nonnegative");

    int score = 0;
    score += points_below(in.fio2_ratio, table.fio2_ratio_below);
    score += points_below(in.platelet, table.platelet_below);
    score += points_at_least(in.bilirubin, table.bilirubin_at_least);

    int cardio = in.mean_bp < table.mean_bp_below ? 1 : 0;
    if (in.dopamine) cardio = std::max(cardio, table.dopamine_points);
    score += cardio;

    int cns = 0;
    for (int i = 0; i < 4; ++i)
        if (in.gcs <= table.gcs_at_most[static_cast<std::size_t>(i)]) cns = i + 1;
    score += cns;

    score += points_at_least(in.creatinine, table.creatinine_at_least);
    return score;
}

// ---------------------------------------------------------------------------
// Reward components.
// ---------------------------------------------------------------------------

int reward_sofa(uint8_t action, int sofa_t, int sofa_prev) {
    if (sofa_t < 0 || sofa_t > 24 || sofa_prev < 0 || sofa_prev > 24)
        throw argument_error("SOFA scores must lie in [0, 24]");
    if (action == 0) return 0;
    return (sofa_t - sofa_prev) >= 2 ? 1 : 0;
}

int reward_treat(uint8_t action, int categories_initiated) {
    if (action == 0) return 0;
    return categories_initiated;
}

double reward_info(uint8_t action, std::span<const double> lab_means,
                   std::span<const double> last_values, std::span<const double> sigmas,
                   std::span<const double> thresholds, std::span<const double> sigma_floor) {
    double total = 0.0;
    for (int lab = 0; lab < n_labs; ++lab) {
        if (!orders_lab(action, lab)) continue;
        const auto l = static_cast<std::size_t>(lab);
        const double sigma = std::max(sigmas[l], sigma_floor[l]);
        const double g = std::abs((lab_means[l] - last_values[l]) / sigma);
        total += std::max(0.0, g - thresholds[l]);
    }
    return total;
}

double reward_cost(uint8_t action, std::span<const double> elapsed, std::span<const double> decay) {
    double total = 0.0;
    for (int lab = 0; lab < n_labs; ++lab) {
        if (!orders_lab(action, lab)) continue;
        const auto l = static_cast<std::size_t>(lab);
        total += std::exp(-elapsed[l] / decay[l]);
    }
    return total;
}

std::array<double, 4> threshold_from_training(const std::array<std::vector<double>, 4>& order_errors) {
    std::array<double, 4> c{};
    for (int lab = 0; lab < n_labs; ++lab) {
        auto values = order_errors[static_cast<std::size_t>(lab)];
        if (values.empty())
            throw fit_error("cannot set info threshold: lab " +
                            trait_name(lab_traits[static_cast<std::size_t>(lab)]) +
                            " was never ordered in the training data");
        std::sort(values.begin(), values.end());
        const std::size_t n = values.size();
        c[static_cast<std::size_t>(lab)] =
            n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
    }
    return c;
}

// ---------------------------------------------------------------------------
// Forecast plumbing.
// ---------------------------------------------------------------------------

std::vector<double> hourly_grid(const cohort::admission& adm) {
    std::vector<double> grid(static_cast<std::size_t>(adm.length_of_stay));
    for (int h = 0; h < adm.length_of_stay; ++h) grid[static_cast<std::size_t>(h)] = h;
    return grid;
}

forecast::trait_series series_for_trait(const cohort::admission& adm, trait t) {
    forecast::trait_series s;
    s.id = t;
    for (const auto& ob : adm.observations) {
        if (ob.id != t) continue;
        // Duplicated timestamps keep the first value.
        if (!s.times.empty() && !(s.times.back() < ob.time)) continue;
        s.times.push_back(ob.time);
        s.values.push_back(ob.value);
    }
    return s;
}

admission_forecasts forecast_admission(const cohort::admission& adm, const kernel_set& kernels) {
    const auto grid = hourly_grid(adm);
    admission_forecasts fc;
    for (int ti = 0; ti < n_traits; ++ti) {
        const trait t = static_cast<trait>(ti);
        const auto series = series_for_trait(adm, t);
        if (t == trait::gcs || t == trait::dopamine) {
            fc.filtering[static_cast<std::size_t>(ti)] = forecast::impute_locf(series, grid);
        } else {
            fc.filtering[static_cast<std::size_t>(ti)] = forecast::predict(
                series, kernels.params[static_cast<std::size_t>(ti)], grid, forecast::mode::filtering);
        }
    }
    return fc;
}

// ---------------------------------------------------------------------------
// Hourly state assembly.
// ---------------------------------------------------------------------------

hourly_mdp build_hourly(const cohort::admission& adm, const admission_forecasts& fc,
                        const mdp_config& cfg, const std::array<double, 4>& lab_prior_means) {
    const int horizon = adm.length_of_stay;
    for (int ti = 0; ti < n_traits; ++ti) {
        const auto& grid = fc.filtering[static_cast<std::size_t>(ti)];
        if (grid.means.size() != static_cast<std::size_t>(horizon))
            throw invariant_error("forecast for trait " + trait_name(static_cast<trait>(ti)) +
                                  " does not cover the hourly grid of admission " + adm.id);
    }

    hourly_mdp out;
    out.states.resize(static_cast<std::size_t>(horizon));
    out.sofa.resize(static_cast<std::size_t>(horizon));
    out.actions.assign(static_cast<std::size_t>(horizon - 1), 0);
    out.treat_counts.assign(static_cast<std::size_t>(horizon - 1), 0);

    auto mean_of = [&](trait t, int h) {
        return fc.filtering[static_cast<std::size_t>(t)].means[static_cast<std::size_t>(h)];
    };
    auto std_of = [&](trait t, int h) {
        return fc.filtering[static_cast<std::size_t>(t)].stds[static_cast<std::size_t>(h)];
    };

    // Last measured value and last order time per lab, walked along the grid.
    std::array<std::size_t, 4> obs_cursor{};
    std::array<std::size_t, 4> order_cursor{};
    std::array<double, 4> last_value = lab_prior_means;
    std::array<double, 4> last_order_time{};
    std::array<bool, 4> ever_ordered{};

    std::array<std::vector<const cohort::observation_event*>, 4> lab_obs;
    for (const auto& ob : adm.observations) {
        const int lab = lab_index(ob.id);
        if (lab >= 0) lab_obs[static_cast<std::size_t>(lab)].push_back(&ob);
    }
    std::array<std::vector<double>, 4> lab_orders;
    for (const auto& od : adm.orders) lab_orders[static_cast<std::size_t>(od.lab)].push_back(od.time);

    for (int h = 0; h < horizon; ++h) {
        const double t = h;
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            while (obs_cursor[l] < lab_obs[l].size() && lab_obs[l][obs_cursor[l]]->time <= t) {
                last_value[l] = lab_obs[l][obs_cursor[l]]->value;
                ++obs_cursor[l];
            }
            while (order_cursor[l] < lab_orders[l].size() && lab_orders[l][order_cursor[l]] <= t) {
                last_order_time[l] = lab_orders[l][order_cursor[l]];
                ever_ordered[l] = true;
                ++order_cursor[l];
            }
        }

        sofa_inputs si;
        si.mean_bp = mean_of(trait::mean_bp, h);
        si.bilirubin = std::max(0.0, mean_of(trait::bilirubin, h));
        si.platelet = std::max(0.0, mean_of(trait::platelet, h));
        si.creatinine = std::max(0.0, mean_of(trait::creatinine, h));
        si.fio2_ratio = std::max(1.0, mean_of(trait::fio2_ratio, h));
        si.gcs = static_cast<int>(std::clamp(std::round(mean_of(trait::gcs, h)), 3.0, 15.0));
        si.dopamine = mean_of(trait::dopamine, h) >= 0.5;
        const int sofa = compute_sofa(si, cfg.sofa);
        out.sofa[static_cast<std::size_t>(h)] = sofa;

        state_vector& s = out.states[static_cast<std::size_t>(h)];
        s[state_layout::sofa] = sofa;
        for (int i = 0; i < 4; ++i)
            s[static_cast<std::size_t>(state_layout::vital_mean + i)] =
                mean_of(vital_traits[static_cast<std::size_t>(i)], h);
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            const trait lt = lab_traits[l];
            s[static_cast<std::size_t>(state_layout::lab_mean + lab)] = mean_of(lt, h);
            s[static_cast<std::size_t>(state_layout::lab_std + lab)] = std_of(lt, h);
            s[static_cast<std::size_t>(state_layout::last_value + lab)] = last_value[l];
            const double elapsed = ever_ordered[l] ? t - last_order_time[l] : cfg.delta_cap_hours;
            s[static_cast<std::size_t>(state_layout::elapsed + lab)] =
                std::min(elapsed, cfg.delta_cap_hours);
        }
    }

    // Actions and intervention onsets over (t, t+1].
    for (int lab = 0; lab < n_labs; ++lab) {
        for (double time : lab_orders[static_cast<std::size_t>(lab)]) {
            const int h = static_cast<int>(std::ceil(time)) - 1;
            if (h >= 0 && h < horizon - 1)
                out.actions[static_cast<std::size_t>(h)] |= static_cast<uint8_t>(1u << lab);
        }
    }
    for (int h = 0; h + 1 < horizon; ++h) {
        int mask = 0;
        for (const auto& iv : adm.interventions) {
            if (iv.onset > h && iv.onset <= h + 1) mask |= 1 << static_cast<int>(iv.category);
        }
        out.treat_counts[static_cast<std::size_t>(h)] = std::popcount(static_cast<unsigned>(mask));
    }
    return out;
}

void collect_order_errors(const hourly_mdp& h, const std::array<double, 4>& sigma_floor,
                          std::array<std::vector<double>, 4>& out) {
    for (std::size_t t = 0; t < h.actions.size(); ++t) {
        const uint8_t a = h.actions[t];
        if (a == 0) continue;
        const state_vector& s = h.states[t];
        for (int lab = 0; lab < n_labs; ++lab) {
            if (!orders_lab(a, lab)) continue;
            const auto l = static_cast<std::size_t>(lab);
            const double sigma =
                std::max(s[static_cast<std::size_t>(state_layout::lab_std + lab)], sigma_floor[l]);
            const double g = std::abs((s[static_cast<std::size_t>(state_layout::lab_mean + lab)] -
                                       s[static_cast<std::size_t>(state_layout::last_value + lab)]) /
                                      sigma);
            out[l].push_back(g);
        }
    }
}

std::vector<transition> assemble_transitions(const hourly_mdp& h, const reward_params& rp,
                                             int admission_index) {
    std::vector<transition> out;
    out.reserve(h.actions.size());
    for (std::size_t t = 0; t < h.actions.size(); ++t) {
        transition tr;
        tr.state = h.states[t];
        tr.next_state = h.states[t + 1];
        tr.action = h.actions[t];
        tr.admission_index = admission_index;
        tr.time = static_cast<double>(t);

        const state_vector& s = h.states[t];
        const double* means = s.data() + state_layout::lab_mean;
        const double* stds = s.data() + state_layout::lab_std;
        const double* last = s.data() + state_layout::last_value;
        const double* elapsed = s.data() + state_layout::elapsed;

        tr.reward[rc_sofa] = reward_sofa(tr.action, h.sofa[t + 1], h.sofa[t]);
        tr.reward[rc_treat] = reward_treat(tr.action, h.treat_counts[t]);
        tr.reward[rc_info] =
            reward_info(tr.action, {means, 4}, {last, 4}, {stds, 4},
                        {rp.info_thresholds.data(), 4}, {rp.sigma_floor.data(), 4});
        tr.reward[rc_cost] = -reward_cost(tr.action, {elapsed, 4}, {rp.cost_decay.data(), 4});
        out.push_back(tr);
    }
    return out;
}

std::vector<transition> build_transitions(const cohort::admission& adm,
                                          const admission_forecasts& fc, const mdp_config& cfg,
                                          const reward_params& rp,
                                          const std::array<double, 4>& lab_prior_means,
                                          int admission_index) {
    return assemble_transitions(build_hourly(adm, fc, cfg, lab_prior_means), rp, admission_index);
}

}  // namespace labrl::mdp
