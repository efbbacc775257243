#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "labrl/mdp.hpp"
#include "labrl/trees.hpp"

namespace labrl::fqi {

using mdp::state_vector;

/// Vector-valued Q over (state, joint action); identically zero until a
/// regressor has been fitted.
class q_function {
  public:
    q_function() = default;
    explicit q_function(const trees::ensemble* model) : model_(model) {}

    bool fitted() const { return model_ != nullptr; }
    vec4 value(const state_vector& s, uint8_t action) const;
    std::array<vec4, mdp::n_actions> values_all(const state_vector& s) const;

    static void features_into(const state_vector& s, uint8_t action, std::span<double> out);

  private:
    const trees::ensemble* model_ = nullptr;
};

/// Indices of actions not strictly dominated (worse in every component) by
/// any other action. Never empty; ties survive.
std::vector<int> pareto_front(std::span<const vec4> q_values);

struct fqi_config {
    double gamma = 0.9;
    int iterations = 200;
    std::size_t batch_size = 100000;
    vec4 epsilon{0.0, 0.0, 0.0, 0.0};
    trees::tree_params q_trees{};
    trees::tree_params consistency_trees{};
    uint64_t seed = 0;
    void validate() const;
};

struct iteration_stats {
    int iteration = 0;
    vec4 mean_abs_dq{};
    std::array<int64_t, mdp::n_actions> action_histogram{};
};

struct training_result {
    trees::ensemble q;
    std::vector<iteration_stats> history;
};

/// Sampling with replacement, weighted inversely to the frequency of each
/// tuple's action in the dataset.
std::vector<std::size_t> sample_batch(std::span<const mdp::transition> data, std::size_t n,
                                      uint64_t seed);

/// Multi-objective fitted Q-iteration with strict Pareto pruning and a
/// per-iteration consistency filter. Backup targets take the componentwise
/// maximum of Q over the pruned, consistency-filtered candidate actions at
/// the next state.
training_result train_mo_fqi(std::span<const mdp::transition> data, const fqi_config& config,
                             const std::function<void(const iteration_stats&)>& on_iteration = {});

/// Order condition for one lab with all other labs at zero: skip must not
/// beat order in any component beyond its slack.
bool order_label(const q_function& q, const state_vector& s, int lab, const vec4& epsilon);

struct policy_set {
    std::array<trees::ensemble, 4> policies;
    std::array<vec4, 4> epsilon{};
    double budget_period = 24.0;

    bool recommend(const state_vector& s, int lab) const;
    void save(std::ostream& os) const;
    static policy_set load(std::istream& is);
};

/// Labels every training state per lab with the order condition and fits
/// one deterministic tree classifier per lab.
policy_set collapse_policy(const q_function& q, std::span<const state_vector> states,
                           const std::array<vec4, 4>& epsilon, const trees::tree_params& params,
                           double budget_period);

/// Largest per-component shortfall of ordering vs skipping over the training
/// states; the upper end of the epsilon_cost search.
double default_epsilon_max(const q_function& q, std::span<const state_vector> states, int lab);

struct epsilon_tuning {
    double epsilon_cost = 0.0;
    std::size_t recommended = 0;
    bool reached = false;  // within tolerance of the target
};

/// Bisection on the (monotone nondecreasing) recommended-order count.
epsilon_tuning tune_epsilon_cost(const q_function& q, std::span<const state_vector> states, int lab,
                                 std::size_t target, const vec4& epsilon_base, double epsilon_max,
                                 double tolerance = 0.05, int max_iterations = 30);

/// One recommendation slot per decision hour.
enum class rec : uint8_t { none = 0, policy = 1, budget = 2 };

/// Inserts a budget order at the last hour of every window of `period`
/// consecutive order-free hours, rolling from the most recent order of any
/// kind.
void apply_budget(std::vector<rec>& series, int period_hours);

}  // namespace labrl::fqi
