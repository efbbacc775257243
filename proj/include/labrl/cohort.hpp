#pragma once

#include <array>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "labrl/common.hpp"

namespace labrl::cohort {

enum class intervention : int {
    antibiotics = 0,
    vasopressors,
    dialysis,
    mechanical_ventilation,
};

inline constexpr int n_interventions = 4;

const std::string& intervention_name(intervention c);
intervention intervention_from_name(const std::string& name);

struct observation_event {
    trait id;
    double time;   // hours from admission
    double value;
};

struct order_event {
    int lab;       // index into lab_traits
    double time;
};

struct intervention_event {
    intervention category;
    double onset;
    double duration;
};

struct admission {
    std::string id;
    int length_of_stay = 0;  // hours, in (24, 480)
    std::vector<observation_event> observations;
    std::vector<order_event> orders;
    std::vector<intervention_event> interventions;
};

/// Generative parameters for one trait: a mean-reverting latent around a
/// severity-shifted mean, clamped to plausible bounds on observation.
struct trait_model {
    double mean = 0.0;
    double sd = 1.0;
    double timescale = 12.0;          // mean-reversion time constant, hours
    double lo = -1e30;
    double hi = 1e30;
    double shift_deteriorating = 0.0; // mean shift in SD units
    double shift_septic = 0.0;
};

std::array<trait_model, n_traits> default_trait_models();

struct cohort_config {
    int n_admissions = 0;
    uint64_t seed = 0;

    // Latent severity chain (stable / deteriorating / septic), per hour.
    double sepsis_hazard = 0.02;      // stable -> deteriorating
    double escalation_hazard = 0.12;  // deteriorating -> septic
    double recovery_hazard = 0.05;

    // Sampling rates.
    double lab_orders_per_day = 2.5;  // per lab, stable state
    double order_boost_unstable = 3.0;
    double vital_obs_per_hour = 0.9;
    double aux_obs_per_hour = 0.12;   // bilirubin / platelet / FiO2 ratio
    double gcs_obs_per_hour = 0.25;

    // Interventions initiate only outside the stable state.
    double intervention_hazard_deteriorating = 0.015;
    double intervention_hazard_septic = 0.08;
    double mean_intervention_duration = 12.0;

    // Length of stay: lognormal, clamped to the (24, 480) hour filter.
    double los_log_mean = 4.909;
    double los_log_sd = 0.45;

    std::array<trait_model, n_traits> traits = default_trait_models();

    void validate() const;  // throws config_error
};

/// Draws n_admissions independent admissions. Each admission consumes its
/// own random stream derived from (seed, index), so parallel and serial
/// generation produce identical cohorts.
std::vector<admission> simulate_cohort(const cohort_config& config);

struct ingest_report {
    std::size_t rows = 0;
    std::size_t retained = 0;
    std::size_t dropped_length_of_stay = 0;
    std::size_t dropped_missing_trait = 0;
};

/// Parses the event CSV (header: admission_id,kind,trait_or_category,
/// timestamp_hours,value). Admissions failing the length-of-stay filter or
/// missing a required trait are dropped and counted, not errors.
std::vector<admission> ingest_events(std::istream& in, ingest_report* report = nullptr);
std::vector<admission> ingest_events_file(const std::string& path, ingest_report* report = nullptr);

void export_events(std::ostream& os, std::span<const admission> cohort);

/// Disjoint partition at admission granularity; both halves keep the input
/// order. train gets llround(train_fraction * n) admissions, at least 1 and
/// at most n - 1.
std::pair<std::vector<admission>, std::vector<admission>> split_cohort(
    std::span<const admission> all, double train_fraction, uint64_t seed);

struct trait_stats {
    std::size_t count = 0;
    double mean = 0.0;
    double sd = 0.0;
};

std::array<trait_stats, n_traits> compute_trait_stats(std::span<const admission> cohort);

}  // namespace labrl::cohort
