#include "labrl/fqi.hpp"

#include <algorithm>
#include <cmath>

#include "labrl/binio.hpp"

namespace labrl::fqi {

namespace {
constexpr int kQInputDim = mdp::state_dim + labrl::n_labs;

// a strictly dominates b: better in every component.
bool strictly_dominates(const vec4& a, const vec4& b) {
    for (int d = 0; d < 4; ++d)
        if (!(b[d] < a[d])) return false;
    return true;
}
}  // namespace

void q_function::features_into(const state_vector& s, uint8_t action, std::span<double> out) {
    std::copy(s.begin(), s.end(), out.begin());
    for (int lab = 0; lab < labrl::n_labs; ++lab)
        out[static_cast<std::size_t>(mdp::state_dim + lab)] = mdp::orders_lab(action, lab) ? 1.0 : 0.0;
}

vec4 q_function::value(const state_vector& s, uint8_t action) const {
    if (!fitted()) return vec4{0.0, 0.0, 0.0, 0.0};
    std::array<double, kQInputDim> x;
    features_into(s, action, x);
    return model_->predict4(x);
}

std::array<vec4, mdp::n_actions> q_function::values_all(const state_vector& s) const {
    std::array<vec4, mdp::n_actions> out{};
    if (!fitted()) return out;
    std::array<double, kQInputDim> x;
    features_into(s, 0, x);
    for (int a = 0; a < mdp::n_actions; ++a) {
        for (int lab = 0; lab < labrl::n_labs; ++lab)
            x[static_cast<std::size_t>(mdp::state_dim + lab)] =
                mdp::orders_lab(static_cast<uint8_t>(a), lab) ? 1.0 : 0.0;
        out[static_cast<std::size_t>(a)] = model_->predict4(x);
    }
    return out;
}

std::vector<int> pareto_front(std::span<const vec4> q_values) {
    if (q_values.empty()) throw argument_error("pareto_front requires at least one action");
    std::vector<int> front;
    front.reserve(q_values.size());
    for (int i = 0; i < static_cast<int>(q_values.size()); ++i) {
        const vec4& qi = q_values[static_cast<std::size_t>(i)];
        bool dominated = false;
        for (int f : front) {
            if (strictly_dominates(q_values[static_cast<std::size_t>(f)], qi)) {
                dominated = true;
                break;
            }
        }
        if (dominated) continue;
        std::erase_if(front, [&](int f) {
            return strictly_dominates(qi, q_values[static_cast<std::size_t>(f)]);
        });
        front.push_back(i);
    }
    return front;
}

void fqi_config::validate() const {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw config_error("gamma must lie in [0, 1)");
    if (iterations < 1) throw config_error("iterations must be at least 1");
    if (batch_size < 1) throw config_error("batch_size must be at least 1");
    for (double e : epsilon)
        if (e < 0.0) throw config_error("epsilon slacks must be nonnegative");
}

std::vector<std::size_t> sample_batch(std::span<const mdp::transition> data, std::size_t n,
                                      uint64_t seed) {
    if (data.empty()) throw argument_error("cannot sample from an empty dataset");
    std::array<std::size_t, mdp::n_actions> counts{};
    for (const auto& tr : data) ++counts[tr.action];

    std::vector<double> cumulative(data.size());
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        total += 1.0 / static_cast<double>(counts[data[i].action]);
        cumulative[i] = total;
    }

    rng gen(derive_seed(seed, 0xba7c4));
    std::vector<std::size_t> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double u = gen.uniform() * total;
        const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        out[k] = std::min(static_cast<std::size_t>(it - cumulative.begin()), data.size() - 1);
    }
    return out;
}

training_result train_mo_fqi(std::span<const mdp::transition> data, const fqi_config& config,
                             const std::function<void(const iteration_stats&)>& on_iteration) {
    config.validate();
    if (data.empty()) throw argument_error("train_mo_fqi requires a nonempty dataset");

    trees::ensemble current;  // Q^(k-1); empty until the first fit
    bool have_q = false;
    training_result result;
    result.history.reserve(static_cast<std::size_t>(config.iterations));

    const std::size_t n = config.batch_size;
    std::vector<double> qx(n * kQInputDim);
    std::vector<double> cx(n * mdp::state_dim);
    std::vector<double> targets(n * 4);
    std::vector<int> labels(n);

    for (int k = 1; k <= config.iterations; ++k) {
        const auto batch = sample_batch(data, n, derive_seed(config.seed, static_cast<uint64_t>(k), 0));

        iteration_stats stats;
        stats.iteration = k;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& tr = data[batch[i]];
            ++stats.action_histogram[tr.action];
            q_function::features_into(tr.state, tr.action, {&qx[i * kQInputDim], kQInputDim});
            std::copy(tr.state.begin(), tr.state.end(), cx.begin() + static_cast<long>(i * mdp::state_dim));
            labels[i] = tr.action;
        }

        // Consistency filter, refit on this iteration's batch.
        trees::tree_params cons_params = config.consistency_trees;
        cons_params.seed = derive_seed(config.seed, static_cast<uint64_t>(k), 2);
        const trees::ensemble consistency = trees::ensemble::fit_classifier(
            {cx.data(), n, mdp::state_dim}, labels, mdp::n_actions, cons_params);

        const q_function q_prev(have_q ? &current : nullptr);
        parallel_for(n, [&](std::size_t i) {
            const auto& tr = data[batch[i]];
            vec4 target = tr.reward;
            if (config.gamma > 0.0) {
                const auto q_next = q_prev.values_all(tr.next_state);
                const auto front = pareto_front(q_next);

                std::array<double, mdp::n_actions> support;
                consistency.predict(std::span<const double>(tr.next_state.data(), mdp::state_dim),
                                    support);

                vec4 best{};
                bool any = false;
                for (int a : front) {
                    if (!(support[static_cast<std::size_t>(a)] > 0.0)) continue;
                    const vec4& qa = q_next[static_cast<std::size_t>(a)];
                    if (!any) {
                        best = qa;
                        any = true;
                    } else {
                        for (int d = 0; d < 4; ++d) best[d] = std::max(best[d], qa[d]);
                    }
                }
                if (!any) {
                    // Pruned set and classifier support are disjoint; fall
                    // back to the classifier's predicted action.
                    int pred = 0;
                    for (int a = 1; a < mdp::n_actions; ++a)
                        if (support[static_cast<std::size_t>(a)] > support[static_cast<std::size_t>(pred)])
                            pred = a;
                    best = q_next[static_cast<std::size_t>(pred)];
                    any = true;
                }
                if (!any) throw invariant_error("empty candidate action set in FQI backup");
                for (int d = 0; d < 4; ++d) target[d] += config.gamma * best[d];
            }
            std::copy(target.begin(), target.end(), targets.begin() + static_cast<long>(i * 4));
        });

        trees::tree_params q_params = config.q_trees;
        q_params.seed = derive_seed(config.seed, static_cast<uint64_t>(k), 1);
        trees::ensemble next = trees::ensemble::fit_regressor({qx.data(), n, kQInputDim},
                                                              {targets.data(), n, 4}, q_params);

        // Mean |Q^k - Q^(k-1)| on the batch's observed pairs.
        std::vector<vec4> deltas(n);
        parallel_for(n, [&](std::size_t i) {
            std::span<const double> x(&qx[i * kQInputDim], kQInputDim);
            const vec4 now = next.predict4(x);
            const vec4 before = have_q ? current.predict4(x) : vec4{0.0, 0.0, 0.0, 0.0};
            for (int d = 0; d < 4; ++d) deltas[i][d] = std::abs(now[d] - before[d]);
        });
        vec4 sum{};
        for (const auto& dv : deltas)
            for (int d = 0; d < 4; ++d) sum[d] += dv[d];
        for (int d = 0; d < 4; ++d) stats.mean_abs_dq[d] = sum[d] / static_cast<double>(n);

        current = std::move(next);
        have_q = true;
        result.history.push_back(stats);
        if (on_iteration) on_iteration(stats);
    }

    result.q = std::move(current);
    return result;
}

bool order_label(const q_function& q, const state_vector& s, int lab, const vec4& epsilon) {
    const vec4 q_skip = q.value(s, 0);
    const vec4 q_order = q.value(s, static_cast<uint8_t>(1u << lab));
    for (int d = 0; d < 4; ++d)
        if (!(q_skip[d] < q_order[d] + epsilon[d])) return false;
    return true;
}

bool policy_set::recommend(const state_vector& s, int lab) const {
    return policies[static_cast<std::size_t>(lab)].predict_class(
               std::span<const double>(s.data(), mdp::state_dim)) == 1;
}

void policy_set::save(std::ostream& os) const {
    os.write("MOPS", 4);
    binio::write_u32(os, 1);
    binio::write_f64(os, budget_period);
    for (int lab = 0; lab < labrl::n_labs; ++lab) {
        for (double e : epsilon[static_cast<std::size_t>(lab)]) binio::write_f64(os, e);
        policies[static_cast<std::size_t>(lab)].save(os);
    }
}

policy_set policy_set::load(std::istream& is) {
    binio::expect_magic(is, "MOPS", "policy set");
    const uint32_t version = binio::read_u32(is);
    if (version != 1) throw io_error("unsupported policy set version " + std::to_string(version));
    policy_set out;
    out.budget_period = binio::read_f64(is);
    for (int lab = 0; lab < labrl::n_labs; ++lab) {
        for (double& e : out.epsilon[static_cast<std::size_t>(lab)]) e = binio::read_f64(is);
        out.policies[static_cast<std::size_t>(lab)] = trees::ensemble::load(is);
    }
    return out;
}

policy_set collapse_policy(const q_function& q, std::span<const state_vector> states,
                           const std::array<vec4, 4>& epsilon, const trees::tree_params& params,
                           double budget_period) {
    if (states.empty()) throw argument_error("collapse_policy requires training states");
    policy_set out;
    out.epsilon = epsilon;
    out.budget_period = budget_period;

    std::vector<double> x(states.size() * mdp::state_dim);
    for (std::size_t i = 0; i < states.size(); ++i)
        std::copy(states[i].begin(), states[i].end(), x.begin() + static_cast<long>(i * mdp::state_dim));

    for (int lab = 0; lab < labrl::n_labs; ++lab) {
        std::vector<int> labels(states.size());
        parallel_for(states.size(), [&](std::size_t i) {
            labels[i] = order_label(q, states[i], lab, epsilon[static_cast<std::size_t>(lab)]) ? 1 : 0;
        });
        trees::tree_params p = params;
        p.seed = derive_seed(params.seed, 0x90110 + static_cast<uint64_t>(lab));
        out.policies[static_cast<std::size_t>(lab)] =
            trees::ensemble::fit_classifier({x.data(), states.size(), mdp::state_dim}, labels, 2, p);
    }
    return out;
}

double default_epsilon_max(const q_function& q, std::span<const state_vector> states, int lab) {
    double worst = 0.0;
    for (const auto& s : states) {
        const vec4 q_skip = q.value(s, 0);
        const vec4 q_order = q.value(s, static_cast<uint8_t>(1u << lab));
        for (int d = 0; d < 4; ++d) worst = std::max(worst, q_skip[d] - q_order[d]);
    }
    return worst;
}

namespace {

std::size_t count_recommended(const q_function& q, std::span<const state_vector> states, int lab,
                              vec4 epsilon, double epsilon_cost) {
    epsilon[rc_cost] = epsilon_cost;
    std::vector<uint8_t> hits(states.size());
    parallel_for(states.size(), [&](std::size_t i) {
        hits[i] = order_label(q, states[i], lab, epsilon) ? 1 : 0;
    });
    std::size_t total = 0;
    for (uint8_t h : hits) total += h;
    return total;
}

}  // namespace

epsilon_tuning tune_epsilon_cost(const q_function& q, std::span<const state_vector> states, int lab,
                                 std::size_t target, const vec4& epsilon_base, double epsilon_max,
                                 double tolerance, int max_iterations) {
    if (target == 0) throw argument_error("epsilon_cost target count must be positive");
    const auto within = [&](std::size_t c) {
        return std::abs(static_cast<double>(c) - static_cast<double>(target)) <=
               tolerance * static_cast<double>(target);
    };

    epsilon_tuning result;
    const std::size_t at_zero = count_recommended(q, states, lab, epsilon_base, 0.0);
    if (within(at_zero) || at_zero >= target) {
        // Already at or above the target; the count only grows with epsilon.
        result.epsilon_cost = 0.0;
        result.recommended = at_zero;
        result.reached = within(at_zero);
        return result;
    }
    const std::size_t at_max = count_recommended(q, states, lab, epsilon_base, epsilon_max);
    if (within(at_max)) {
        return {epsilon_max, at_max, true};
    }
    if (at_max < target) {
        // Target unreachable below epsilon_max.
        return {epsilon_max, at_max, false};
    }

    double lo = 0.0, hi = epsilon_max;
    std::size_t hi_count = at_max;
    for (int it = 0; it < max_iterations; ++it) {
        const double mid = 0.5 * (lo + hi);
        const std::size_t c = count_recommended(q, states, lab, epsilon_base, mid);
        if (within(c)) return {mid, c, true};
        if (c < target) {
            lo = mid;
        } else {
            hi = mid;
            hi_count = c;
        }
    }
    return {hi, hi_count, false};
}

void apply_budget(std::vector<rec>& series, int period_hours) {
    if (period_hours <= 0) throw argument_error("budget period must be positive");
    int gap = 0;
    for (auto& slot : series) {
        if (slot != rec::none) {
            gap = 0;
            continue;
        }
        if (++gap == period_hours) {
            slot = rec::budget;
            gap = 0;
        }
    }
}

}  // namespace labrl::fqi
