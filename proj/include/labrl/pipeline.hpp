#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "labrl/cohort.hpp"
#include "labrl/fqi.hpp"
#include "labrl/mdp.hpp"
#include "labrl/opeval.hpp"
#include "labrl/trees.hpp"

namespace labrl::pipeline {

struct run_config {
    uint64_t seed = 7;
    int threads = 1;  // 0 = hardware concurrency

    cohort::cohort_config cohort;
    double train_fraction = 0.6;

    forecast::fit_options forecast_fit = forecast::fit_options::defaults();
    mdp::mdp_config mdp;
    fqi::fqi_config fqi;
    bool tune_epsilon_cost = true;
    double budget_hours = 24.0;
    trees::tree_params policy_trees;
    trees::tree_params behaviour_trees;
    std::size_t max_tuning_states = 50000;
    std::size_t max_policy_states = 300000;

    // Evaluation-only knobs; excluded from the compatibility hash.
    double eval_smoothing = 0.05;
    double rho_clip = 1000.0;
    double wis_gamma = 1.0;
    int random_trials = 10;
    double tta_window = 48.0;

    void validate() const;
};

run_config config_from_json_text(const std::string& text);
run_config config_from_json_file(const std::string& path);
std::string config_to_json(const run_config& cfg);

/// FNV-1a digest of a file's bytes; ties artifacts to their input data.
uint64_t file_digest(const std::string& path);

/// Hash over the canonical training-relevant config plus the event-file
/// digest. Evaluation refuses artifacts whose hash disagrees.
uint64_t chain_hash(const run_config& cfg, uint64_t events_digest);

// ---------------------------------------------------------------------------
// Stages.
// ---------------------------------------------------------------------------

mdp::kernel_set fit_kernels(std::span<const cohort::admission> train,
                            const forecast::fit_options& opts);

struct dataset_params {
    mdp::reward_params rewards;
    std::array<double, 4> lab_prior_means{};
    std::array<double, 4> lab_cohort_sd{};
};

/// Builds transition tuples for a cohort. With fixed == nullptr the reward
/// thresholds and normalizers are derived from this cohort (training);
/// otherwise the given parameters are reused (test).
mdp::dataset build_dataset(std::span<const cohort::admission> adms, const mdp::kernel_set& kernels,
                           const mdp::mdp_config& cfg, const dataset_params* fixed,
                           uint64_t config_hash);

struct artifact {
    uint64_t config_hash = 0;
    mdp::kernel_set kernels;
    dataset_params params;
    trees::ensemble q;
    fqi::policy_set policies;
    trees::ensemble behaviour;
    std::array<double, 4> p_emp{};
    std::array<fqi::epsilon_tuning, 4> tuning{};

    void save(std::ostream& os) const;
    static artifact load(std::istream& is);
};

/// Kernels -> transitions -> MO-FQI -> epsilon_cost tuning -> policy
/// collapse -> behaviour policy. Iteration metrics stream to metrics_log as
/// JSON lines when given.
artifact train(const run_config& cfg, std::span<const cohort::admission> train_adms,
               uint64_t config_hash, std::ostream* metrics_log);

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

inline constexpr int n_eval_policies = 5;
const std::array<std::string, n_eval_policies>& eval_policy_names();  // mo_fqi first

struct policy_lab_value {
    vec4 value{};
    vec4 trial_std{};   // across random trials; zero otherwise
    double min_ess = 0.0;
};

struct lab_metric_pair {
    double clinician_mean = 0.0;
    double policy_mean = 0.0;
    std::size_t clinician_n = 0;
    std::size_t policy_n = 0;
    std::size_t skipped = 0;  // info gain: orders without a usable forecast
    std::vector<double> clinician_values;
    std::vector<double> policy_values;
};

struct evaluation {
    uint64_t config_hash = 0;
    std::array<std::array<policy_lab_value, 4>, n_eval_policies> wis{};
    std::array<std::array<int, 4>, 4> best_policy{};  // [lab][component] -> policy index
    opeval::order_reduction reduction;
    std::array<lab_metric_pair, 4> info_gain{};
    std::array<lab_metric_pair, 4> time_to_treatment{};
};

evaluation evaluate(const artifact& art, const run_config& cfg,
                    std::span<const cohort::admission> test_adms, const mdp::dataset& test_ds);

std::string evaluation_to_json(const evaluation& ev);
void write_distribution_csvs(const std::string& out_dir, const evaluation& ev);

// ---------------------------------------------------------------------------
// Whole-pipeline convenience for tests and the acceptance suite.
// ---------------------------------------------------------------------------

struct end_to_end_result {
    std::vector<cohort::admission> train_adms, test_adms;
    artifact art;
    mdp::dataset train_ds, test_ds;
    evaluation eval;
};

end_to_end_result run_end_to_end(const run_config& cfg, std::ostream* metrics_log = nullptr);

}  // namespace labrl::pipeline
