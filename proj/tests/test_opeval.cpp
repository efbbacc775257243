#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "labrl/opeval.hpp"
#include "toy_mdp.hpp"

using namespace labrl;
namespace op = labrl::opeval;
namespace md = labrl::mdp;

TEST_CASE("ps_wis hand-evaluated two-trajectory example") {
    // Two one-step trajectories with rewards 1 and 3 whose step ratios are 1
    // and 3: the self-normalized estimate is (1*1 + 3*3) / (1 + 3) = 2.5.
    const std::vector<std::vector<double>> ratios = {{1.0}, {3.0}};
    const std::vector<std::vector<vec4>> rewards = {{{1.0, 0.0, 0.0, 0.0}},
                                                    {{3.0, 0.0, 0.0, 0.0}}};
    const auto est = op::ps_wis_from_ratios(ratios, rewards, 1.0, 1e3);
    CHECK(est.value[0] == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(est.n_trajectories == 2);
}

TEST_CASE("ps_wis under the behaviour policy is the empirical mean return") {
    rng gen(77);
    std::vector<op::trajectory> trajs(40);
    vec4 total{};
    std::size_t n = trajs.size();
    for (auto& t : trajs) {
        const std::size_t len = 3 + gen.uniform_int(9);  // ragged horizons
        for (std::size_t i = 0; i < len; ++i) {
            t.actions.push_back(static_cast<int>(gen.uniform_int(4)));
            vec4 r;
            for (int d = 0; d < 4; ++d) r[d] = gen.uniform(-1.0, 2.0);
            t.rewards.push_back(r);
            for (int d = 0; d < 4; ++d) total[d] += r[d];
        }
    }
    const op::stochastic_policy pb{"behaviour", [](std::size_t, std::size_t, int a) {
                                       return 0.1 + 0.2 * static_cast<double>(a);
                                   }};
    const auto est = op::ps_wis(trajs, pb, pb, 1.0, 1e3);
    for (int d = 0; d < 4; ++d)
        CHECK(est.value[d] == doctest::Approx(total[d] / static_cast<double>(n)).epsilon(1e-12));
    CHECK(est.zero_weight_steps == 0);
}

TEST_CASE("ps_wis estimate matches an on-policy Monte-Carlo oracle") {
    const auto mdp = toy::stochastic_mdp::standard();
    const toy::binary_policy pi_b = {0.5, 0.5, 0.5};
    const toy::binary_policy pi_e = {0.25, 0.6, 0.8};
    const auto episodes = toy::log_stochastic_episodes(mdp, pi_b, 10000, 314);

    std::vector<op::trajectory> trajs(episodes.size());
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        for (const auto& step : episodes[i]) {
            trajs[i].actions.push_back(step.action);
            trajs[i].rewards.push_back(step.reward);
        }
    }
    const op::stochastic_policy pe{"target", [&](std::size_t i, std::size_t t, int a) {
                                       return toy::policy_prob(pi_e, episodes[i][t].state, a);
                                   }};
    const op::stochastic_policy pb{"behaviour", [&](std::size_t i, std::size_t t, int a) {
                                       return toy::policy_prob(pi_b, episodes[i][t].state, a);
                                   }};
    const auto est = op::ps_wis(trajs, pe, pb, mdp.gamma_wis, 1e3);
    const vec4 mc = toy::monte_carlo_value(mdp, pi_e, 100000, 2718);
    for (int d : {0, 3}) {
        CHECK(std::abs(est.value[d] - mc[d]) <= 0.05 * std::abs(mc[d]));
    }
    CHECK(est.value[1] == 0.0);
    CHECK(est.value[2] == 0.0);
}

TEST_CASE("ps_wis normalization properties") {
    rng gen(15);
    std::vector<std::vector<double>> ratios(25);
    std::vector<std::vector<vec4>> rewards(25);
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const std::size_t len = 2 + gen.uniform_int(6);
        for (std::size_t t = 0; t < len; ++t) {
            ratios[i].push_back(gen.uniform(0.2, 3.0));
            vec4 r;
            for (int d = 0; d < 4; ++d) r[d] = gen.uniform(-1.0, 1.0);
            rewards[i].push_back(r);
        }
    }
    const auto base = op::ps_wis_from_ratios(ratios, rewards, 1.0, 1e6);

    SUBCASE("scaling every ratio at one step leaves the estimate unchanged") {
        // A common factor at step t multiplies every rho_j for j >= t and
        // cancels in the per-step normalization.
        auto scaled = ratios;
        for (auto& row : scaled)
            if (!row.empty()) row[0] *= 7.5;
        const auto est = op::ps_wis_from_ratios(scaled, rewards, 1.0, 1e6);
        for (int d = 0; d < 4; ++d) CHECK(est.value[d] == doctest::Approx(base.value[d]).epsilon(1e-9));
    }
    SUBCASE("effective sample size is bounded by the trajectory count") {
        for (double e : base.ess) {
            CHECK(e > 0.0);
            CHECK(e <= static_cast<double>(ratios.size()) + 1e-9);
        }
    }
    SUBCASE("discounting only reweights steps") {
        const auto disc = op::ps_wis_from_ratios(ratios, rewards, 0.5, 1e6);
        CHECK(disc.value != base.value);
    }
}

TEST_CASE("ps_wis rejects invalid inputs") {
    std::vector<op::trajectory> trajs(1);
    trajs[0].actions = {0};
    trajs[0].rewards = {{1.0, 0.0, 0.0, 0.0}};
    const op::stochastic_policy zero{"broken", [](std::size_t, std::size_t, int) { return 0.0; }};
    CHECK_THROWS_AS(op::ps_wis(trajs, zero, zero, 1.0, 1e3), argument_error);
}

TEST_CASE("behaviour policy fitting") {
    // States scatter in two clusters; cluster 0 always takes action 3,
    // cluster 1 mixes actions 0 and 5.
    rng gen(42);
    std::vector<md::transition> data(1200);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const bool cluster = gen.bernoulli(0.5);
        data[i].state = md::state_vector{};
        data[i].state[0] = gen.normal(cluster ? 3.0 : -3.0, 0.4);
        data[i].state[1] = gen.uniform();
        data[i].action = cluster ? (gen.bernoulli(0.7) ? 0 : 5) : 3;
    }
    const auto model = op::fit_behaviour_policy(data, {.n_trees = 40, .min_samples_leaf = 10, .seed = 5});

    SUBCASE("probabilities are floored and sum to one") {
        std::array<double, md::n_actions> probs;
        for (int rep = 0; rep < 1000; ++rep) {
            md::state_vector s{};
            s[0] = gen.uniform(-5.0, 5.0);
            s[1] = gen.uniform();
            model.predict_proba(std::span<const double>(s.data(), md::state_dim), probs,
                                op::k_probability_floor);
            double total = 0.0;
            for (double p : probs) {
                CHECK(p >= op::k_probability_floor);
                total += p;
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
    SUBCASE("mean predicted probabilities match empirical action frequencies") {
        std::array<double, md::n_actions> empirical{};
        for (const auto& tr : data) empirical[tr.action] += 1.0;
        for (auto& c : empirical) c /= static_cast<double>(data.size());

        std::array<double, md::n_actions> marginal{};
        std::array<double, md::n_actions> probs;
        for (const auto& tr : data) {
            model.predict_proba(std::span<const double>(tr.state.data(), md::state_dim), probs,
                                op::k_probability_floor);
            for (int a = 0; a < md::n_actions; ++a) marginal[static_cast<std::size_t>(a)] += probs[static_cast<std::size_t>(a)];
        }
        for (auto& m : marginal) m /= static_cast<double>(data.size());
        for (int a = 0; a < md::n_actions; ++a) {
            const double e = empirical[static_cast<std::size_t>(a)];
            const double m = marginal[static_cast<std::size_t>(a)];
            if (e >= 0.05)
                CHECK(std::abs(m - e) <= 0.05 * e);
            else
                CHECK(std::abs(m - e) <= 0.01);
        }
    }
    SUBCASE("single-action data gives the floored degenerate policy") {
        std::vector<md::transition> mono(50);
        for (auto& tr : mono) {
            tr.state = md::state_vector{};
            tr.state[0] = gen.uniform();
            tr.action = 0;
        }
        const auto degenerate = op::fit_behaviour_policy(mono, {.n_trees = 9, .seed = 1});
        std::array<double, md::n_actions> probs;
        md::state_vector s{};
        degenerate.predict_proba(std::span<const double>(s.data(), md::state_dim), probs,
                                 op::k_probability_floor);
        CHECK(probs[0] == doctest::Approx(1.0 - 15.0 * op::k_probability_floor).epsilon(1e-12));
        for (int a = 1; a < md::n_actions; ++a)
            CHECK(probs[static_cast<std::size_t>(a)] ==
                  doctest::Approx(op::k_probability_floor).epsilon(1e-12));
    }
}

TEST_CASE("random policies") {
    SUBCASE("p = 0.5 is uniform over the sixteen joint actions") {
        const auto probs = op::random_joint_probs(0.5);
        for (double p : probs) CHECK(p == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
    }
    SUBCASE("p = 0.01 concentrates on the zero action") {
        const auto probs = op::random_joint_probs(0.01);
        CHECK(probs[0] == doctest::Approx(0.96059601).epsilon(1e-12));
        double total = 0.0;
        for (double p : probs) total += p;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("empirical order probabilities feed the p_emp baseline") {
        std::vector<md::transition> data(1000);
        rng gen(3);
        for (auto& tr : data) {
            tr.action = 0;
            if (gen.bernoulli(0.25)) tr.action |= 1;  // creatinine
            if (gen.bernoulli(0.10)) tr.action |= 4;  // wbc
        }
        const auto p_emp = op::empirical_order_probability(data);
        CHECK(p_emp[0] == doctest::Approx(0.25).epsilon(0.2));
        CHECK(p_emp[1] == 0.0);
        CHECK(p_emp[2] == doctest::Approx(0.10).epsilon(0.3));
        const auto probs = op::random_joint_probs(p_emp[0]);
        CHECK(probs[1] ==
              doctest::Approx(p_emp[0] * std::pow(1.0 - p_emp[0], 3)).epsilon(1e-12));
    }
    SUBCASE("out-of-range p is rejected") {
        CHECK_THROWS_AS(op::random_joint_probs(0.0), argument_error);
        CHECK_THROWS_AS(op::random_joint_probs(1.0), argument_error);
    }
}

TEST_CASE("softening deterministic recommendations") {
    SUBCASE("product rule for a single recommended lab") {
        const auto probs = op::softened_joint_probs({true, false, false, false}, 0.05);
        CHECK(probs[0b0001] == doctest::Approx(std::pow(0.95, 4)).epsilon(1e-12));
        CHECK(probs[0b0001] == doctest::Approx(0.81450625).epsilon(1e-12));
        double total = 0.0;
        for (double p : probs) total += p;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("minimum joint probability is smoothing^4") {
        const auto probs = op::softened_joint_probs({true, true, false, true}, 0.05);
        double lo = 1.0;
        for (double p : probs) lo = std::min(lo, p);
        CHECK(lo == doctest::Approx(std::pow(0.05, 4)).epsilon(1e-12));
    }
    SUBCASE("the recommended action stays the mode") {
        rng gen(4);
        for (int rep = 0; rep < 50; ++rep) {
            std::array<bool, 4> bits;
            uint8_t code = 0;
            for (int lab = 0; lab < 4; ++lab) {
                bits[static_cast<std::size_t>(lab)] = gen.bernoulli(0.5);
                if (bits[static_cast<std::size_t>(lab)]) code |= static_cast<uint8_t>(1u << lab);
            }
            const auto probs = op::softened_joint_probs(bits, 0.3);
            int argmax = 0;
            for (int a = 1; a < md::n_actions; ++a)
                if (probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(argmax)])
                    argmax = a;
            CHECK(argmax == code);
        }
    }
    SUBCASE("smoothing bounds are enforced") {
        CHECK_THROWS_AS(op::softened_joint_probs({false, false, false, false}, 0.0), argument_error);
        CHECK_THROWS_AS(op::softened_joint_probs({false, false, false, false}, 0.5), argument_error);
    }
}

TEST_CASE("onset filter walk-through") {
    using fqi::rec;
    // Recommendations at hours 3, 4, 5 with a clinician order at hour 4:
    // onsets kept at 3 and 5.
    std::vector<uint8_t> clinician(8, 0);
    clinician[4] = 1;
    std::vector<rec> recommended(8, rec::none);
    recommended[3] = recommended[4] = recommended[5] = rec::policy;
    CHECK(op::onset_filter(clinician, recommended) == std::vector<int>{3, 5});

    // Without the clinician order only the first onset survives.
    std::fill(clinician.begin(), clinician.end(), 0);
    CHECK(op::onset_filter(clinician, recommended) == std::vector<int>{3});
}

TEST_CASE("order reduction metric") {
    using fqi::rec;
    SUBCASE("recommendations identical to clinician orders reduce nothing") {
        op::admission_series s;
        for (int lab = 0; lab < 4; ++lab) {
            s.clinician[static_cast<std::size_t>(lab)].assign(50, 0);
            s.recommended[static_cast<std::size_t>(lab)].assign(50, rec::none);
            for (int h = 5; h < 50; h += 9) {
                s.clinician[static_cast<std::size_t>(lab)][static_cast<std::size_t>(h)] = 1;
                s.recommended[static_cast<std::size_t>(lab)][static_cast<std::size_t>(h)] = rec::policy;
            }
        }
        const auto red = op::metric_order_reduction(std::span<const op::admission_series>(&s, 1));
        for (int lab = 0; lab < 4; ++lab) {
            CHECK(*red.reduction_pct[static_cast<std::size_t>(lab)] == doctest::Approx(0.0));
            CHECK(red.recommended_filtered[static_cast<std::size_t>(lab)] ==
                  red.clinician[static_cast<std::size_t>(lab)]);
        }
    }
    SUBCASE("the filter never increases the recommended count and handles zero clinician orders") {
        rng gen(31);
        op::admission_series s;
        for (int lab = 0; lab < 4; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            s.clinician[l].assign(120, 0);
            s.recommended[l].assign(120, rec::none);
            for (std::size_t h = 0; h < 120; ++h) {
                if (lab != 2 && gen.bernoulli(0.15)) s.clinician[l][h] = 1;
                if (gen.bernoulli(0.25)) s.recommended[l][h] = rec::policy;
            }
        }
        const auto red = op::metric_order_reduction(std::span<const op::admission_series>(&s, 1));
        for (int lab = 0; lab < 4; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            CHECK(red.recommended_filtered[l] <= red.recommended_raw[l]);
            if (lab == 2)
                CHECK(!red.reduction_pct[l].has_value());
            else
                CHECK(red.reduction_pct[l].has_value());
        }
    }
    SUBCASE("reduction arithmetic at the reported scale") {
        // 22,172 clinician orders against 12,358 filtered recommendations is
        // a 44.27% reduction.
        op::order_reduction red;
        red.clinician[2] = 22172;
        red.recommended_filtered[2] = 12358;
        const double pct = 1.0 - 12358.0 / 22172.0;
        CHECK(pct * 100.0 == doctest::Approx(44.27).epsilon(1e-3));
    }
}

TEST_CASE("per-order information gain") {
    const forecast::kernel_params kp{1.0, 6.0, 0.01, 10.0};
    SUBCASE("no observations after the order time makes the gain zero") {
        forecast::trait_series s;
        s.id = trait::wbc;
        s.times = {1.0, 5.0};
        s.values = {10.0, 11.0};
        const auto g = op::order_info_gain(s, kp, 9.0, 0.05);
        REQUIRE(g.has_value());
        CHECK(*g == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("an unseen spike after the order shows up as gain") {
        forecast::trait_series s;
        s.id = trait::wbc;
        s.times = {1.0, 5.0, 6.0};
        s.values = {10.0, 10.0, 16.0};
        const auto g = op::order_info_gain(s, kp, 5.5, 0.05);
        REQUIRE(g.has_value());
        // Oracle: strictly-past filtering vs all-data smoothing at t = 5.5,
        // computed with the dense-GP formulas in the forecast tests; here the
        // implementation's own primitives feed a consistency check.
        forecast::trait_series past;
        past.id = s.id;
        past.times = {1.0, 5.0};
        past.values = {10.0, 10.0};
        const std::vector<double> at{5.5};
        const auto filt = forecast::predict(past, kp, at, forecast::mode::filtering);
        const auto smooth = forecast::predict(s, kp, at, forecast::mode::smoothing);
        const double expect = std::abs(smooth.means[0] - filt.means[0]) /
                              std::max(filt.stds[0], 0.05);
        CHECK(*g == doctest::Approx(expect).epsilon(1e-12));
        CHECK(*g > 1.0);  // the spike is far outside the forecast band
    }
    SUBCASE("empty series is skipped") {
        forecast::trait_series s;
        s.id = trait::wbc;
        CHECK(!op::order_info_gain(s, kp, 5.0, 0.05).has_value());
    }
}

TEST_CASE("time to treatment") {
    SUBCASE("earliest qualifying order in the window") {
        const std::vector<double> orders = {10.0, 25.0};
        const std::vector<double> onsets = {30.0};
        const auto res = op::metric_time_to_treatment(orders, onsets, 48.0);
        REQUIRE(res.intervals.size() == 1);
        CHECK(res.intervals[0] == doctest::Approx(20.0).epsilon(1e-12));
        CHECK(res.excluded == 0);
    }
    SUBCASE("an order exactly at onset counts with zero delay") {
        const std::vector<double> orders = {30.0};
        const std::vector<double> onsets = {30.0};
        const auto res = op::metric_time_to_treatment(orders, onsets, 48.0);
        REQUIRE(res.intervals.size() == 1);
        CHECK(res.intervals[0] == 0.0);
    }
    SUBCASE("onsets without a qualifying order are excluded and counted") {
        const std::vector<double> orders = {100.0};
        const std::vector<double> onsets = {30.0, 160.0};
        const auto res = op::metric_time_to_treatment(orders, onsets, 48.0);
        CHECK(res.intervals.empty());
        CHECK(res.excluded == 2);
    }
    SUBCASE("intervals always lie within the window") {
        rng gen(8);
        std::vector<double> orders, onsets;
        for (int i = 0; i < 200; ++i) orders.push_back(gen.uniform(0.0, 400.0));
        for (int i = 0; i < 50; ++i) onsets.push_back(gen.uniform(0.0, 400.0));
        const auto res = op::metric_time_to_treatment(orders, onsets, 48.0);
        for (double v : res.intervals) {
            CHECK(v >= 0.0);
            CHECK(v <= 48.0);
        }
        CHECK(res.intervals.size() + res.excluded == onsets.size());
    }
}
