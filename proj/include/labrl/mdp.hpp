#pragma once

#include <array>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "labrl/cohort.hpp"
#include "labrl/common.hpp"
#include "labrl/forecast.hpp"

namespace labrl::mdp {

inline constexpr int state_dim = 21;
using state_vector = std::array<double, state_dim>;

// State layout: organ-failure score, four vital means, then per-lab blocks
// of predictive mean, predictive std, last measured value, elapsed hours
// since the last order.
namespace state_layout {
inline constexpr int sofa = 0;
inline constexpr int vital_mean = 1;   // +0..3: HR, RR, Temp, MeanBP
inline constexpr int lab_mean = 5;     // +0..3: creatinine, BUN, WBC, lactate
inline constexpr int lab_std = 9;
inline constexpr int last_value = 13;
inline constexpr int elapsed = 17;
}  // namespace state_layout

const std::array<std::string, state_dim>& state_feature_names();

// Joint action over the four labs, one bit per lab.
inline constexpr int n_actions = 16;
inline bool orders_lab(uint8_t action, int lab) { return (action >> lab) & 1; }

struct transition {
    state_vector state{};
    uint8_t action = 0;
    state_vector next_state{};
    vec4 reward{};
    int admission_index = 0;
    double time = 0.0;
};

// ---------------------------------------------------------------------------
// SOFA scoring.
// ---------------------------------------------------------------------------

struct sofa_inputs {
    double mean_bp = 80.0;
    double bilirubin = 0.8;
    double platelet = 250.0;
    double creatinine = 0.9;
    double fio2_ratio = 450.0;  // PaO2/FiO2
    int gcs = 15;
    bool dopamine = false;
};

/// Six-organ threshold table; index i holds the cutoff awarding i+1 points.
struct sofa_table {
    std::array<double, 4> fio2_ratio_below{};    // respiration
    std::array<double, 4> platelet_below{};      // coagulation
    std::array<double, 4> bilirubin_at_least{};  // liver
    double mean_bp_below = 70.0;                 // cardiovascular, 1 point
    int dopamine_points = 2;                     // any-dose vasopressor support
    std::array<int, 4> gcs_at_most{};            // central nervous system
    std::array<double, 4> creatinine_at_least{}; // renal
    static sofa_table standard();
};

int compute_sofa(const sofa_inputs& in, const sofa_table& table = sofa_table::standard());

// ---------------------------------------------------------------------------
// Reward components. Every component is zero for the all-skip action.
// ---------------------------------------------------------------------------

/// 1 iff any lab was ordered and the score rose by at least 2 across the
/// transition.
int reward_sofa(uint8_t action, int sofa_t, int sofa_prev);

/// Count of intervention categories initiated in the next step, gated by a
/// nonzero action.
int reward_treat(uint8_t action, int categories_initiated);

/// Sum over ordered labs of max(0, |m - y| / sigma - c); sigma is floored,
/// never an error.
double reward_info(uint8_t action, std::span<const double> lab_means,
                   std::span<const double> last_values, std::span<const double> sigmas,
                   std::span<const double> thresholds, std::span<const double> sigma_floor);

/// Sum over ordered labs of exp(-elapsed / decay); returned as a positive
/// magnitude (negated when stored in the reward vector).
double reward_cost(uint8_t action, std::span<const double> elapsed, std::span<const double> decay);

/// Per-lab median of the prediction errors observed at executed orders in
/// the training data; even counts take the midpoint of the central pair.
std::array<double, 4> threshold_from_training(const std::array<std::vector<double>, 4>& order_errors);

// ---------------------------------------------------------------------------
// Transition assembly.
// ---------------------------------------------------------------------------

struct mdp_config {
    double delta_cap_hours = 48.0;
    std::array<double, 4> cost_decay = {6.0, 6.0, 6.0, 6.0};  // Gamma_l
    double sigma_floor_fraction = 0.05;  // of the cohort SD per lab
    sofa_table sofa = sofa_table::standard();
};

/// Filtering-mode grids for every trait over the admission's hourly grid
/// (hours 0 .. length_of_stay - 1). GCS and the dopamine flag are imputed by
/// carry-forward rather than smoothed.
struct admission_forecasts {
    std::array<forecast::forecast_grid, n_traits> filtering{};
};

struct kernel_set {
    std::array<forecast::kernel_params, n_traits> params{};
};

std::vector<double> hourly_grid(const cohort::admission& adm);
forecast::trait_series series_for_trait(const cohort::admission& adm, trait t);
admission_forecasts forecast_admission(const cohort::admission& adm, const kernel_set& kernels);

/// Hourly states, actions and intervention counts for one admission; the
/// shared precursor of reward thresholds and transition tuples.
struct hourly_mdp {
    std::vector<state_vector> states;  // one per grid hour
    std::vector<uint8_t> actions;      // orders in (t, t+1]
    std::vector<int> treat_counts;     // categories initiated in (t, t+1]
    std::vector<int> sofa;
};

hourly_mdp build_hourly(const cohort::admission& adm, const admission_forecasts& fc,
                        const mdp_config& cfg, const std::array<double, 4>& lab_prior_means);

struct reward_params {
    std::array<double, 4> info_thresholds{};  // c_l
    std::array<double, 4> sigma_floor{};      // absolute
    std::array<double, 4> cost_decay = {6.0, 6.0, 6.0, 6.0};
};

/// Prediction errors g at executed order hours, appended per lab.
void collect_order_errors(const hourly_mdp& h, const std::array<double, 4>& sigma_floor,
                          std::array<std::vector<double>, 4>& out);

std::vector<transition> assemble_transitions(const hourly_mdp& h, const reward_params& rp,
                                             int admission_index);

/// build_hourly + assemble_transitions in one call.
std::vector<transition> build_transitions(const cohort::admission& adm,
                                          const admission_forecasts& fc, const mdp_config& cfg,
                                          const reward_params& rp,
                                          const std::array<double, 4>& lab_prior_means,
                                          int admission_index);

// ---------------------------------------------------------------------------
// Transition dataset with its provenance.
// ---------------------------------------------------------------------------

struct dataset {
    std::vector<transition> transitions;
    std::vector<std::string> admission_ids;
    uint64_t config_hash = 0;
    reward_params rewards{};
    std::array<double, 4> lab_prior_means{};
    std::array<double, 4> lab_cohort_sd{};
};

void save_dataset(std::ostream& os, const dataset& ds);
dataset load_dataset(std::istream& is);
std::string dataset_sidecar_json(const dataset& ds);
void export_transitions_csv(std::ostream& os, const dataset& ds);

}  // namespace labrl::mdp
