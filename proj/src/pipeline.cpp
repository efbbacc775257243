#include "labrl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "labrl/binio.hpp"

namespace labrl::pipeline {

using nlohmann::json;

namespace {

json tree_params_to_json(const trees::tree_params& p) {
    return json{{"n_trees", p.n_trees},
                {"k_features", p.k_features},
                {"min_samples_leaf", p.min_samples_leaf},
                {"max_depth", p.max_depth}};
}

void tree_params_from_json(const json& j, trees::tree_params& p) {
    p.n_trees = j.value("n_trees", p.n_trees);
    p.k_features = j.value("k_features", p.k_features);
    p.min_samples_leaf = j.value("min_samples_leaf", p.min_samples_leaf);
    p.max_depth = j.value("max_depth", p.max_depth);
}

template <std::size_t N>
std::array<double, N> array_from_json(const json& j, const std::array<double, N>& fallback) {
    if (!j.is_array() || j.size() != N) throw config_error("expected an array of " + std::to_string(N));
    std::array<double, N> out = fallback;
    for (std::size_t i = 0; i < N; ++i) out[i] = j[i].get<double>();
    return out;
}

}  // namespace

void run_config::validate() const {
    cohort.validate();
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw config_error("split.train_fraction must lie strictly between 0 and 1");
    fqi.validate();
    if (!(eval_smoothing > 0.0 && eval_smoothing < 0.5))
        throw config_error("eval.smoothing must lie strictly in (0, 0.5)");
    if (rho_clip <= 0.0) throw config_error("eval.rho_clip must be positive");
    if (random_trials < 1) throw config_error("eval.random_trials must be at least 1");
    if (tta_window <= 0.0) throw config_error("eval.tta_window must be positive");
    if (budget_hours <= 0.0) throw config_error("fqi.budget_hours must be positive");
    if (mdp.delta_cap_hours <= 0.0) throw config_error("mdp.delta_cap_hours must be positive");
    for (double g : mdp.cost_decay)
        if (g <= 0.0) throw config_error("mdp.cost_decay entries must be positive");
}

run_config config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw config_error(std::string("invalid config JSON: ") + e.what());
    }

    run_config cfg;
    cfg.fqi.q_trees.min_samples_leaf = 20;
    cfg.fqi.consistency_trees.min_samples_leaf = 20;
    try {
        cfg.seed = j.value("seed", cfg.seed);
        cfg.threads = j.value("threads", cfg.threads);
        if (j.contains("cohort")) {
            const auto& c = j["cohort"];
            auto& cc = cfg.cohort;
            cc.n_admissions = c.value("n_admissions", cc.n_admissions);
            cc.sepsis_hazard = c.value("sepsis_hazard", cc.sepsis_hazard);
            cc.escalation_hazard = c.value("escalation_hazard", cc.escalation_hazard);
            cc.recovery_hazard = c.value("recovery_hazard", cc.recovery_hazard);
            cc.lab_orders_per_day = c.value("lab_orders_per_day", cc.lab_orders_per_day);
            cc.order_boost_unstable = c.value("order_boost_unstable", cc.order_boost_unstable);
            cc.vital_obs_per_hour = c.value("vital_obs_per_hour", cc.vital_obs_per_hour);
            cc.aux_obs_per_hour = c.value("aux_obs_per_hour", cc.aux_obs_per_hour);
            cc.gcs_obs_per_hour = c.value("gcs_obs_per_hour", cc.gcs_obs_per_hour);
            cc.intervention_hazard_deteriorating =
                c.value("intervention_hazard_deteriorating", cc.intervention_hazard_deteriorating);
            cc.intervention_hazard_septic =
                c.value("intervention_hazard_septic", cc.intervention_hazard_septic);
            cc.mean_intervention_duration =
                c.value("mean_intervention_duration", cc.mean_intervention_duration);
            cc.los_log_mean = c.value("los_log_mean", cc.los_log_mean);
            cc.los_log_sd = c.value("los_log_sd", cc.los_log_sd);
            if (c.contains("traits")) {
                for (const auto& [name, tj] : c["traits"].items()) {
                    auto& tm = cc.traits[static_cast<std::size_t>(trait_from_name(name))];
                    tm.mean = tj.value("mean", tm.mean);
                    tm.sd = tj.value("sd", tm.sd);
                    tm.timescale = tj.value("timescale", tm.timescale);
                    tm.lo = tj.value("lo", tm.lo);
                    tm.hi = tj.value("hi", tm.hi);
                    tm.shift_deteriorating = tj.value("shift_deteriorating", tm.shift_deteriorating);
                    tm.shift_septic = tj.value("shift_septic", tm.shift_septic);
                }
            }
        }
        if (j.contains("split")) cfg.train_fraction = j["split"].value("train_fraction", cfg.train_fraction);
        if (j.contains("forecast")) {
            const auto& f = j["forecast"];
            cfg.forecast_fit.max_observations =
                f.value("max_observations", cfg.forecast_fit.max_observations);
        }
        if (j.contains("mdp")) {
            const auto& m = j["mdp"];
            cfg.mdp.delta_cap_hours = m.value("delta_cap_hours", cfg.mdp.delta_cap_hours);
            cfg.mdp.sigma_floor_fraction = m.value("sigma_floor_fraction", cfg.mdp.sigma_floor_fraction);
            if (m.contains("cost_decay")) cfg.mdp.cost_decay = array_from_json<4>(m["cost_decay"], cfg.mdp.cost_decay);
        }
        if (j.contains("fqi")) {
            const auto& f = j["fqi"];
            cfg.fqi.gamma = f.value("gamma", cfg.fqi.gamma);
            cfg.fqi.iterations = f.value("iterations", cfg.fqi.iterations);
            cfg.fqi.batch_size = f.value("batch_size", cfg.fqi.batch_size);
            if (f.contains("epsilon")) cfg.fqi.epsilon = array_from_json<4>(f["epsilon"], cfg.fqi.epsilon);
            if (f.contains("q_trees")) tree_params_from_json(f["q_trees"], cfg.fqi.q_trees);
            if (f.contains("consistency_trees"))
                tree_params_from_json(f["consistency_trees"], cfg.fqi.consistency_trees);
            cfg.tune_epsilon_cost = f.value("tune_epsilon_cost", cfg.tune_epsilon_cost);
            cfg.budget_hours = f.value("budget_hours", cfg.budget_hours);
        }
        if (j.contains("policy_trees")) tree_params_from_json(j["policy_trees"], cfg.policy_trees);
        if (j.contains("behaviour_trees")) tree_params_from_json(j["behaviour_trees"], cfg.behaviour_trees);
        cfg.max_tuning_states = j.value("max_tuning_states", cfg.max_tuning_states);
        cfg.max_policy_states = j.value("max_policy_states", cfg.max_policy_states);
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            cfg.eval_smoothing = e.value("smoothing", cfg.eval_smoothing);
            cfg.rho_clip = e.value("rho_clip", cfg.rho_clip);
            cfg.wis_gamma = e.value("wis_gamma", cfg.wis_gamma);
            cfg.random_trials = e.value("random_trials", cfg.random_trials);
            cfg.tta_window = e.value("tta_window", cfg.tta_window);
        }
    } catch (const json::exception& e) {
        throw config_error(std::string("invalid config value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

run_config config_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return config_from_json_text(buf.str());
}

std::string config_to_json(const run_config& cfg) {
    json traits = json::object();
    const auto defaults = cohort::default_trait_models();
    for (int t = 0; t < n_traits; ++t) {
        const auto& tm = cfg.cohort.traits[static_cast<std::size_t>(t)];
        traits[trait_name(static_cast<trait>(t))] = {
            {"mean", tm.mean},
            {"sd", tm.sd},
            {"timescale", tm.timescale},
            {"lo", tm.lo},
            {"hi", tm.hi},
            {"shift_deteriorating", tm.shift_deteriorating},
            {"shift_septic", tm.shift_septic}};
    }
    (void)defaults;
    json j{
        {"seed", cfg.seed},
        {"threads", cfg.threads},
        {"cohort",
         {{"n_admissions", cfg.cohort.n_admissions},
          {"sepsis_hazard", cfg.cohort.sepsis_hazard},
          {"escalation_hazard", cfg.cohort.escalation_hazard},
          {"recovery_hazard", cfg.cohort.recovery_hazard},
          {"lab_orders_per_day", cfg.cohort.lab_orders_per_day},
          {"order_boost_unstable", cfg.cohort.order_boost_unstable},
          {"vital_obs_per_hour", cfg.cohort.vital_obs_per_hour},
          {"aux_obs_per_hour", cfg.cohort.aux_obs_per_hour},
          {"gcs_obs_per_hour", cfg.cohort.gcs_obs_per_hour},
          {"intervention_hazard_deteriorating", cfg.cohort.intervention_hazard_deteriorating},
          {"intervention_hazard_septic", cfg.cohort.intervention_hazard_septic},
          {"mean_intervention_duration", cfg.cohort.mean_intervention_duration},
          {"los_log_mean", cfg.cohort.los_log_mean},
          {"los_log_sd", cfg.cohort.los_log_sd},
          {"traits", traits}}},
        {"split", {{"train_fraction", cfg.train_fraction}}},
        {"forecast", {{"max_observations", cfg.forecast_fit.max_observations}}},
        {"mdp",
         {{"delta_cap_hours", cfg.mdp.delta_cap_hours},
          {"sigma_floor_fraction", cfg.mdp.sigma_floor_fraction},
          {"cost_decay", cfg.mdp.cost_decay}}},
        {"fqi",
         {{"gamma", cfg.fqi.gamma},
          {"iterations", cfg.fqi.iterations},
          {"batch_size", cfg.fqi.batch_size},
          {"epsilon", cfg.fqi.epsilon},
          {"q_trees", tree_params_to_json(cfg.fqi.q_trees)},
          {"consistency_trees", tree_params_to_json(cfg.fqi.consistency_trees)},
          {"tune_epsilon_cost", cfg.tune_epsilon_cost},
          {"budget_hours", cfg.budget_hours}}},
        {"policy_trees", tree_params_to_json(cfg.policy_trees)},
        {"behaviour_trees", tree_params_to_json(cfg.behaviour_trees)},
        {"max_tuning_states", cfg.max_tuning_states},
        {"max_policy_states", cfg.max_policy_states},
        {"eval",
         {{"smoothing", cfg.eval_smoothing},
          {"rho_clip", cfg.rho_clip},
          {"wis_gamma", cfg.wis_gamma},
          {"random_trials", cfg.random_trials},
          {"tta_window", cfg.tta_window}}}};
    return j.dump(2);
}

uint64_t file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open file for digest: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        const auto got = static_cast<std::size_t>(in.gcount());
        for (std::size_t i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!in) break;
    }
    return h;
}

uint64_t chain_hash(const run_config& cfg, uint64_t events_digest) {
    json j = json::parse(config_to_json(cfg));
    j.erase("eval");
    j.erase("threads");
    j["events_digest"] = hash_hex(events_digest);
    return fnv1a64(j.dump());
}

// ---------------------------------------------------------------------------
// Stages.
// ---------------------------------------------------------------------------

mdp::kernel_set fit_kernels(std::span<const cohort::admission> train,
                            const forecast::fit_options& opts) {
    mdp::kernel_set out;
    std::vector<int> gp_traits;
    for (int t = 0; t < n_traits; ++t) {
        const trait tr = static_cast<trait>(t);
        if (tr == trait::gcs || tr == trait::dopamine) continue;  // carried forward, not smoothed
        gp_traits.push_back(t);
    }
    parallel_for(gp_traits.size(), [&](std::size_t gi) {
        const int t = gp_traits[gi];
        std::vector<forecast::trait_series> series;
        series.reserve(train.size());
        for (const auto& adm : train) {
            auto s = mdp::series_for_trait(adm, static_cast<trait>(t));
            if (!s.times.empty()) series.push_back(std::move(s));
        }
        out.params[static_cast<std::size_t>(t)] = forecast::fit_kernel(series, opts);
    });
    return out;
}

mdp::dataset build_dataset(std::span<const cohort::admission> adms, const mdp::kernel_set& kernels,
                           const mdp::mdp_config& cfg, const dataset_params* fixed,
                           uint64_t config_hash) {
    if (adms.empty()) throw argument_error("cannot build transitions for an empty cohort");

    dataset_params params;
    if (fixed) {
        params = *fixed;
    } else {
        const auto stats = cohort::compute_trait_stats(adms);
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            const auto t = static_cast<std::size_t>(lab_traits[l]);
            params.lab_prior_means[l] = kernels.params[t].prior_mean;
            params.lab_cohort_sd[l] = stats[t].sd;
            params.rewards.sigma_floor[l] = cfg.sigma_floor_fraction * stats[t].sd;
        }
        params.rewards.cost_decay = cfg.cost_decay;
    }

    std::vector<mdp::hourly_mdp> hourly(adms.size());
    parallel_for(adms.size(), [&](std::size_t i) {
        const auto fc = mdp::forecast_admission(adms[i], kernels);
        hourly[i] = mdp::build_hourly(adms[i], fc, cfg, params.lab_prior_means);
    });

    if (!fixed) {
        std::array<std::vector<double>, 4> errors;
        for (const auto& h : hourly) mdp::collect_order_errors(h, params.rewards.sigma_floor, errors);
        params.rewards.info_thresholds = mdp::threshold_from_training(errors);
    }

    mdp::dataset ds;
    ds.config_hash = config_hash;
    ds.rewards = params.rewards;
    ds.lab_prior_means = params.lab_prior_means;
    ds.lab_cohort_sd = params.lab_cohort_sd;
    ds.admission_ids.reserve(adms.size());
    for (const auto& adm : adms) ds.admission_ids.push_back(adm.id);

    std::vector<std::vector<mdp::transition>> per_adm(adms.size());
    parallel_for(adms.size(), [&](std::size_t i) {
        per_adm[i] = mdp::assemble_transitions(hourly[i], params.rewards, static_cast<int>(i));
    });
    std::size_t total = 0;
    for (const auto& v : per_adm) total += v.size();
    ds.transitions.reserve(total);
    for (auto& v : per_adm)
        ds.transitions.insert(ds.transitions.end(), v.begin(), v.end());
    return ds;
}

void artifact::save(std::ostream& os) const {
    os.write("MOPA", 4);
    binio::write_u32(os, 1);
    binio::write_u64(os, config_hash);
    for (int t = 0; t < n_traits; ++t) {
        const auto& k = kernels.params[static_cast<std::size_t>(t)];
        binio::write_f64(os, k.output_variance);
        binio::write_f64(os, k.lengthscale);
        binio::write_f64(os, k.noise_variance);
        binio::write_f64(os, k.prior_mean);
    }
    auto arr4 = [&](const std::array<double, 4>& a) {
        for (double v : a) binio::write_f64(os, v);
    };
    arr4(params.rewards.info_thresholds);
    arr4(params.rewards.sigma_floor);
    arr4(params.rewards.cost_decay);
    arr4(params.lab_prior_means);
    arr4(params.lab_cohort_sd);
    arr4(p_emp);
    for (const auto& t : tuning) {
        binio::write_f64(os, t.epsilon_cost);
        binio::write_u64(os, t.recommended);
        binio::write_u8(os, t.reached ? 1 : 0);
    }
    q.save(os);
    policies.save(os);
    behaviour.save(os);
}

artifact artifact::load(std::istream& is) {
    binio::expect_magic(is, "MOPA", "policy artifact");
    const uint32_t version = binio::read_u32(is);
    if (version != 1) throw io_error("unsupported policy artifact version " + std::to_string(version));
    artifact out;
    out.config_hash = binio::read_u64(is);
    for (int t = 0; t < n_traits; ++t) {
        auto& k = out.kernels.params[static_cast<std::size_t>(t)];
        k.output_variance = binio::read_f64(is);
        k.lengthscale = binio::read_f64(is);
        k.noise_variance = binio::read_f64(is);
        k.prior_mean = binio::read_f64(is);
    }
    auto arr4 = [&](std::array<double, 4>& a) {
        for (double& v : a) v = binio::read_f64(is);
    };
    arr4(out.params.rewards.info_thresholds);
    arr4(out.params.rewards.sigma_floor);
    arr4(out.params.rewards.cost_decay);
    arr4(out.params.lab_prior_means);
    arr4(out.params.lab_cohort_sd);
    arr4(out.p_emp);
    for (auto& t : out.tuning) {
        t.epsilon_cost = binio::read_f64(is);
        t.recommended = binio::read_u64(is);
        t.reached = binio::read_u8(is) != 0;
    }
    out.q = trees::ensemble::load(is);
    out.policies = fqi::policy_set::load(is);
    out.behaviour = trees::ensemble::load(is);
    return out;
}

artifact train(const run_config& cfg, std::span<const cohort::admission> train_adms,
               uint64_t config_hash, std::ostream* metrics_log) {
    artifact art;
    art.config_hash = config_hash;
    art.kernels = fit_kernels(train_adms, cfg.forecast_fit);

    mdp::dataset train_ds = build_dataset(train_adms, art.kernels, cfg.mdp, nullptr, config_hash);
    art.params.rewards = train_ds.rewards;
    art.params.lab_prior_means = train_ds.lab_prior_means;
    art.params.lab_cohort_sd = train_ds.lab_cohort_sd;

    if (metrics_log) {
        json header{{"event", "start"},
                    {"config_hash", hash_hex(config_hash)},
                    {"gamma", cfg.fqi.gamma},
                    {"iterations", cfg.fqi.iterations},
                    {"batch_size", cfg.fqi.batch_size},
                    {"n_transitions", train_ds.transitions.size()}};
        *metrics_log << header.dump() << '\n';
    }

    fqi::fqi_config fcfg = cfg.fqi;
    fcfg.seed = derive_seed(cfg.seed, 0xf41);
    auto result = fqi::train_mo_fqi(
        train_ds.transitions, fcfg, [&](const fqi::iteration_stats& st) {
            if (!metrics_log) return;
            json row{{"event", "iteration"},
                     {"iteration", st.iteration},
                     {"mean_abs_dq", st.mean_abs_dq},
                     {"action_histogram", st.action_histogram}};
            *metrics_log << row.dump() << '\n';
        });
    art.q = std::move(result.q);
    const fqi::q_function qf(&art.q);

    // Deterministic leading subsample of training states for calibration.
    const std::size_t n_states = std::min(cfg.max_tuning_states, train_ds.transitions.size());
    std::vector<mdp::state_vector> tuning_states(n_states);
    for (std::size_t i = 0; i < n_states; ++i) tuning_states[i] = train_ds.transitions[i].state;

    std::array<vec4, 4> epsilon{};
    for (int lab = 0; lab < n_labs; ++lab) {
        epsilon[static_cast<std::size_t>(lab)] = cfg.fqi.epsilon;
    }
    if (cfg.tune_epsilon_cost) {
        std::array<std::size_t, 4> actual_orders{};
        for (const auto& tr : train_ds.transitions)
            for (int lab = 0; lab < n_labs; ++lab)
                if (mdp::orders_lab(tr.action, lab)) ++actual_orders[static_cast<std::size_t>(lab)];
        const double scale =
            static_cast<double>(n_states) / static_cast<double>(train_ds.transitions.size());
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            const auto target = static_cast<std::size_t>(
                std::max(1.0, std::round(static_cast<double>(actual_orders[l]) * scale)));
            const double eps_max = fqi::default_epsilon_max(qf, tuning_states, lab);
            art.tuning[l] =
                fqi::tune_epsilon_cost(qf, tuning_states, lab, target, cfg.fqi.epsilon, eps_max);
            epsilon[l][rc_cost] = art.tuning[l].epsilon_cost;
            if (metrics_log) {
                json row{{"event", "epsilon_cost"},
                         {"lab", trait_name(lab_traits[l])},
                         {"epsilon_cost", art.tuning[l].epsilon_cost},
                         {"target", target},
                         {"recommended", art.tuning[l].recommended},
                         {"reached", art.tuning[l].reached}};
                *metrics_log << row.dump() << '\n';
            }
        }
    }

    const std::size_t n_policy = std::min(cfg.max_policy_states, train_ds.transitions.size());
    std::vector<mdp::state_vector> policy_states(n_policy);
    for (std::size_t i = 0; i < n_policy; ++i) policy_states[i] = train_ds.transitions[i].state;
    trees::tree_params pol_params = cfg.policy_trees;
    pol_params.seed = derive_seed(cfg.seed, 0x901);
    art.policies = fqi::collapse_policy(qf, policy_states, epsilon, pol_params, cfg.budget_hours);

    trees::tree_params beh_params = cfg.behaviour_trees;
    beh_params.seed = derive_seed(cfg.seed, 0xbe4);
    art.behaviour = opeval::fit_behaviour_policy(train_ds.transitions, beh_params);
    art.p_emp = opeval::empirical_order_probability(train_ds.transitions);
    return art;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

const std::array<std::string, n_eval_policies>& eval_policy_names() {
    static const std::array<std::string, n_eval_policies> names = {
        "mo_fqi", "behaviour", "random_0.01", "random_p_emp", "random_0.5"};
    return names;
}

namespace {

// Deterministic Bernoulli draw for realized random baseline policies.
bool hashed_bernoulli(uint64_t seed, uint64_t trial, uint64_t lab, uint64_t traj, uint64_t step,
                      double p) {
    uint64_t key = derive_seed(seed, (trial << 8) ^ lab, (traj << 16) ^ step);
    const double u = static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53;
    return u < p;
}

struct lab_eval_data {
    // Per admission, per decision hour.
    std::vector<std::vector<int>> actions;          // logged bit for this lab
    std::vector<std::vector<vec4>> rewards;         // per-lab reward decomposition
    std::vector<std::vector<double>> behaviour_p1;  // marginal P(order | s)
    std::vector<std::vector<uint8_t>> fqi_rec;      // deterministic recommendation
};

vec4 per_lab_reward(const mdp::transition& tr, int lab, const dataset_params& params) {
    vec4 r{};
    if (!mdp::orders_lab(tr.action, lab)) return r;
    const auto l = static_cast<std::size_t>(lab);
    const double sofa_now = tr.next_state[mdp::state_layout::sofa];
    const double sofa_prev = tr.state[mdp::state_layout::sofa];
    r[rc_sofa] = sofa_now - sofa_prev >= 2.0 ? 1.0 : 0.0;
    r[rc_treat] = tr.reward[rc_treat];  // category count, already gated on a nonzero action
    const double sigma = std::max(tr.state[static_cast<std::size_t>(mdp::state_layout::lab_std + lab)],
                                  params.rewards.sigma_floor[l]);
    const double g = std::abs((tr.state[static_cast<std::size_t>(mdp::state_layout::lab_mean + lab)] -
                               tr.state[static_cast<std::size_t>(mdp::state_layout::last_value + lab)]) /
                              sigma);
    r[rc_info] = std::max(0.0, g - params.rewards.info_thresholds[l]);
    r[rc_cost] = -std::exp(-tr.state[static_cast<std::size_t>(mdp::state_layout::elapsed + lab)] /
                           params.rewards.cost_decay[l]);
    return r;
}

}  // namespace

evaluation evaluate(const artifact& art, const run_config& cfg,
                    std::span<const cohort::admission> test_adms, const mdp::dataset& test_ds) {
    if (test_ds.config_hash != art.config_hash)
        throw compatibility_error("policy artifact and transition dataset carry different config hashes");

    evaluation ev;
    ev.config_hash = art.config_hash;

    // Contiguous per-admission ranges in the transition table.
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (std::size_t i = 0; i < test_ds.transitions.size();) {
        std::size_t j = i;
        while (j < test_ds.transitions.size() &&
               test_ds.transitions[j].admission_index == test_ds.transitions[i].admission_index)
            ++j;
        ranges.emplace_back(i, j);
        i = j;
    }
    const std::size_t n_traj = ranges.size();

    // Shared per-step caches.
    std::array<lab_eval_data, 4> labs;
    for (auto& ld : labs) {
        ld.actions.resize(n_traj);
        ld.rewards.resize(n_traj);
        ld.behaviour_p1.resize(n_traj);
        ld.fqi_rec.resize(n_traj);
    }
    parallel_for(n_traj, [&](std::size_t i) {
        const auto [begin, end] = ranges[i];
        const std::size_t steps = end - begin;
        std::array<double, mdp::n_actions> probs;
        for (auto& ld : labs) {
            ld.actions[i].resize(steps);
            ld.rewards[i].resize(steps);
            ld.behaviour_p1[i].resize(steps);
            ld.fqi_rec[i].resize(steps);
        }
        for (std::size_t t = 0; t < steps; ++t) {
            const auto& tr = test_ds.transitions[begin + t];
            art.behaviour.predict_proba(std::span<const double>(tr.state.data(), mdp::state_dim),
                                        probs, opeval::k_probability_floor);
            for (int lab = 0; lab < n_labs; ++lab) {
                const auto l = static_cast<std::size_t>(lab);
                double p1 = 0.0;
                for (int a = 0; a < mdp::n_actions; ++a)
                    if (mdp::orders_lab(static_cast<uint8_t>(a), lab)) p1 += probs[static_cast<std::size_t>(a)];
                labs[l].behaviour_p1[i][t] = p1;
                labs[l].actions[i][t] = mdp::orders_lab(tr.action, lab) ? 1 : 0;
                labs[l].rewards[i][t] = per_lab_reward(tr, lab, art.params);
                labs[l].fqi_rec[i][t] = art.policies.recommend(tr.state, lab) ? 1 : 0;
            }
        }
    });

    const double smoothing = cfg.eval_smoothing;
    auto behaviour_prob = [&](const lab_eval_data& ld) {
        return [&ld](std::size_t i, std::size_t t, int a) {
            const double p1 = ld.behaviour_p1[i][t];
            return a == 1 ? p1 : 1.0 - p1;
        };
    };

    for (int lab = 0; lab < n_labs; ++lab) {
        const auto l = static_cast<std::size_t>(lab);
        const auto& ld = labs[l];

        std::vector<opeval::trajectory> trajs(n_traj);
        for (std::size_t i = 0; i < n_traj; ++i) {
            trajs[i].actions = ld.actions[i];
            trajs[i].rewards = ld.rewards[i];
        }
        const opeval::stochastic_policy pi_b{"behaviour", behaviour_prob(ld)};

        // MO-FQI: deterministic recommendation, softened.
        {
            opeval::stochastic_policy pi_e{
                "mo_fqi", [&](std::size_t i, std::size_t t, int a) {
                    return opeval::softened_bit_prob(ld.fqi_rec[i][t] != 0, a, smoothing);
                }};
            const auto est = opeval::ps_wis(trajs, pi_e, pi_b, cfg.wis_gamma, cfg.rho_clip);
            ev.wis[0][l].value = est.value;
            ev.wis[0][l].min_ess =
                est.ess.empty() ? 0.0 : *std::min_element(est.ess.begin(), est.ess.end());
        }
        // Behaviour on its own data.
        {
            const auto est = opeval::ps_wis(trajs, pi_b, pi_b, cfg.wis_gamma, cfg.rho_clip);
            ev.wis[1][l].value = est.value;
            ev.wis[1][l].min_ess =
                est.ess.empty() ? 0.0 : *std::min_element(est.ess.begin(), est.ess.end());
        }
        // Realized random baselines, averaged over trials.
        const std::array<double, 3> rand_p = {0.01, art.p_emp[l], 0.5};
        for (int rp = 0; rp < 3; ++rp) {
            const double p = std::clamp(rand_p[static_cast<std::size_t>(rp)], 1e-4, 1.0 - 1e-4);
            vec4 mean{}, m2{};
            double ess_min_mean = 0.0;
            for (int trial = 0; trial < cfg.random_trials; ++trial) {
                opeval::stochastic_policy pi_e{
                    "random", [&, trial](std::size_t i, std::size_t t, int a) {
                        const bool bit = hashed_bernoulli(cfg.seed, static_cast<uint64_t>(trial),
                                                          l, i, t, p);
                        return opeval::softened_bit_prob(bit, a, smoothing);
                    }};
                const auto est = opeval::ps_wis(trajs, pi_e, pi_b, cfg.wis_gamma, cfg.rho_clip);
                ess_min_mean +=
                    est.ess.empty() ? 0.0 : *std::min_element(est.ess.begin(), est.ess.end());
                for (int d = 0; d < 4; ++d) {
                    const double delta = est.value[d] - mean[d];
                    mean[d] += delta / static_cast<double>(trial + 1);
                    m2[d] += delta * (est.value[d] - mean[d]);
                }
            }
            auto& slot = ev.wis[static_cast<std::size_t>(2 + rp)][l];
            slot.value = mean;
            for (int d = 0; d < 4; ++d)
                slot.trial_std[d] = cfg.random_trials > 1
                                        ? std::sqrt(m2[d] / static_cast<double>(cfg.random_trials - 1))
                                        : 0.0;
            slot.min_ess = ess_min_mean / static_cast<double>(cfg.random_trials);
        }
    }

    for (int lab = 0; lab < n_labs; ++lab) {
        for (int d = 0; d < 4; ++d) {
            int best = 0;
            for (int p = 1; p < n_eval_policies; ++p) {
                if (ev.wis[static_cast<std::size_t>(p)][static_cast<std::size_t>(lab)].value[d] >
                    ev.wis[static_cast<std::size_t>(best)][static_cast<std::size_t>(lab)].value[d])
                    best = p;
            }
            ev.best_policy[static_cast<std::size_t>(lab)][static_cast<std::size_t>(d)] = best;
        }
    }

    // Recommendation series (policy + budget) against clinician actions.
    std::vector<opeval::admission_series> series(n_traj);
    parallel_for(n_traj, [&](std::size_t i) {
        const std::size_t steps = ranges[i].second - ranges[i].first;
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            auto& s = series[i];
            s.clinician[l].resize(steps);
            s.recommended[l].resize(steps);
            for (std::size_t t = 0; t < steps; ++t) {
                s.clinician[l][t] = static_cast<uint8_t>(labs[l].actions[i][t]);
                s.recommended[l][t] =
                    labs[l].fqi_rec[i][t] != 0 ? fqi::rec::policy : fqi::rec::none;
            }
            std::vector<fqi::rec> budgeted(s.recommended[l]);
            fqi::apply_budget(budgeted, static_cast<int>(art.policies.budget_period));
            s.recommended[l] = std::move(budgeted);
        }
    });
    ev.reduction = opeval::metric_order_reduction(series);

    // Info gain and time-to-treatment, clinician vs recommended orders.
    std::array<std::vector<double>, 4> ig_clin, ig_fqi;
    std::array<std::size_t, 4> ig_skipped{};
    std::array<std::vector<double>, 4> tta_clin, tta_fqi;
    std::array<std::size_t, 4> tta_excluded{};
    for (std::size_t i = 0; i < n_traj; ++i) {
        const auto& adm = test_adms[static_cast<std::size_t>(
            test_ds.transitions[ranges[i].first].admission_index)];
        std::vector<double> onsets;
        for (const auto& iv : adm.interventions) onsets.push_back(iv.onset);

        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            const auto series_l = mdp::series_for_trait(adm, lab_traits[l]);
            const auto& kp = art.kernels.params[static_cast<std::size_t>(lab_traits[l])];
            const double floor = art.params.rewards.sigma_floor[l];

            std::vector<double> clin_times;
            for (const auto& od : adm.orders)
                if (od.lab == lab) clin_times.push_back(od.time);
            std::vector<double> fqi_times;
            for (std::size_t t = 0; t < series[i].recommended[l].size(); ++t)
                if (series[i].recommended[l][t] != fqi::rec::none)
                    fqi_times.push_back(static_cast<double>(t) + 1.0);

            for (double t : clin_times) {
                const auto g = opeval::order_info_gain(series_l, kp, t, floor);
                if (g)
                    ig_clin[l].push_back(*g);
                else
                    ++ig_skipped[l];
            }
            for (double t : fqi_times) {
                const auto g = opeval::order_info_gain(series_l, kp, t, floor);
                if (g)
                    ig_fqi[l].push_back(*g);
                else
                    ++ig_skipped[l];
            }

            const auto tta_c = opeval::metric_time_to_treatment(clin_times, onsets, cfg.tta_window);
            const auto tta_f = opeval::metric_time_to_treatment(fqi_times, onsets, cfg.tta_window);
            tta_clin[l].insert(tta_clin[l].end(), tta_c.intervals.begin(), tta_c.intervals.end());
            tta_fqi[l].insert(tta_fqi[l].end(), tta_f.intervals.begin(), tta_f.intervals.end());
            tta_excluded[l] += tta_c.excluded + tta_f.excluded;
        }
    }
    auto mean_of = [](const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    for (int lab = 0; lab < n_labs; ++lab) {
        const auto l = static_cast<std::size_t>(lab);
        ev.info_gain[l].clinician_values = std::move(ig_clin[l]);
        ev.info_gain[l].policy_values = std::move(ig_fqi[l]);
        ev.info_gain[l].clinician_mean = mean_of(ev.info_gain[l].clinician_values);
        ev.info_gain[l].policy_mean = mean_of(ev.info_gain[l].policy_values);
        ev.info_gain[l].clinician_n = ev.info_gain[l].clinician_values.size();
        ev.info_gain[l].policy_n = ev.info_gain[l].policy_values.size();
        ev.info_gain[l].skipped = ig_skipped[l];

        ev.time_to_treatment[l].clinician_values = std::move(tta_clin[l]);
        ev.time_to_treatment[l].policy_values = std::move(tta_fqi[l]);
        ev.time_to_treatment[l].clinician_mean = mean_of(ev.time_to_treatment[l].clinician_values);
        ev.time_to_treatment[l].policy_mean = mean_of(ev.time_to_treatment[l].policy_values);
        ev.time_to_treatment[l].clinician_n = ev.time_to_treatment[l].clinician_values.size();
        ev.time_to_treatment[l].policy_n = ev.time_to_treatment[l].policy_values.size();
        ev.time_to_treatment[l].skipped = tta_excluded[l];
    }
    return ev;
}

std::string evaluation_to_json(const evaluation& ev) {
    json wis = json::object();
    for (int p = 0; p < n_eval_policies; ++p) {
        json per_lab = json::object();
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto& v = ev.wis[static_cast<std::size_t>(p)][static_cast<std::size_t>(lab)];
            per_lab[trait_name(lab_traits[static_cast<std::size_t>(lab)])] = {
                {"value", v.value}, {"trial_std", v.trial_std}, {"min_ess", v.min_ess}};
        }
        wis[eval_policy_names()[static_cast<std::size_t>(p)]] = per_lab;
    }

    json best = json::object();
    const std::array<std::string, 4> comp_names = {"sofa", "treat", "info", "neg_cost"};
    for (int lab = 0; lab < n_labs; ++lab) {
        json per_comp = json::object();
        for (int d = 0; d < 4; ++d)
            per_comp[comp_names[static_cast<std::size_t>(d)]] = eval_policy_names()[static_cast<std::size_t>(
                ev.best_policy[static_cast<std::size_t>(lab)][static_cast<std::size_t>(d)])];
        best[trait_name(lab_traits[static_cast<std::size_t>(lab)])] = per_comp;
    }

    json reduction = json::object();
    json info = json::object();
    json tta = json::object();
    for (int lab = 0; lab < n_labs; ++lab) {
        const auto l = static_cast<std::size_t>(lab);
        const std::string name = trait_name(lab_traits[l]);
        json r{{"clinician_orders", ev.reduction.clinician[l]},
               {"recommended_raw", ev.reduction.recommended_raw[l]},
               {"recommended_filtered", ev.reduction.recommended_filtered[l]}};
        if (ev.reduction.reduction_pct[l])
            r["reduction_pct"] = *ev.reduction.reduction_pct[l] * 100.0;
        else
            r["reduction_pct"] = nullptr;
        reduction[name] = r;
        info[name] = {{"clinician_mean", ev.info_gain[l].clinician_mean},
                      {"mo_fqi_mean", ev.info_gain[l].policy_mean},
                      {"clinician_n", ev.info_gain[l].clinician_n},
                      {"mo_fqi_n", ev.info_gain[l].policy_n},
                      {"skipped", ev.info_gain[l].skipped}};
        tta[name] = {{"clinician_mean_hours", ev.time_to_treatment[l].clinician_mean},
                     {"mo_fqi_mean_hours", ev.time_to_treatment[l].policy_mean},
                     {"clinician_n", ev.time_to_treatment[l].clinician_n},
                     {"mo_fqi_n", ev.time_to_treatment[l].policy_n},
                     {"excluded_onsets", ev.time_to_treatment[l].skipped}};
    }

    json j{{"config_hash", hash_hex(ev.config_hash)},
           {"policies", eval_policy_names()},
           {"reward_components", comp_names},
           {"ps_wis", wis},
           {"best_policy", best},
           {"order_reduction", reduction},
           {"info_gain", info},
           {"time_to_treatment", tta}};
    return j.dump(2);
}

void write_distribution_csvs(const std::string& out_dir, const evaluation& ev) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream os(fs::path(out_dir) / "info_gain_distribution.csv");
        os << "lab,source,gain\n";
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            const std::string name = trait_name(lab_traits[l]);
            for (double g : ev.info_gain[l].clinician_values)
                os << name << ",clinician," << format_double(g) << '\n';
            for (double g : ev.info_gain[l].policy_values)
                os << name << ",mo_fqi," << format_double(g) << '\n';
        }
    }
    {
        std::ofstream os(fs::path(out_dir) / "time_to_treatment_distribution.csv");
        os << "lab,source,hours\n";
        for (int lab = 0; lab < n_labs; ++lab) {
            const auto l = static_cast<std::size_t>(lab);
            const std::string name = trait_name(lab_traits[l]);
            for (double v : ev.time_to_treatment[l].clinician_values)
                os << name << ",clinician," << format_double(v) << '\n';
            for (double v : ev.time_to_treatment[l].policy_values)
                os << name << ",mo_fqi," << format_double(v) << '\n';
        }
    }
    {
        std::ofstream os(fs::path(out_dir) / "ps_wis_values.csv");
        os << "policy,lab,component,value,trial_std,min_ess\n";
        const std::array<std::string, 4> comp_names = {"sofa", "treat", "info", "neg_cost"};
        for (int p = 0; p < n_eval_policies; ++p) {
            for (int lab = 0; lab < n_labs; ++lab) {
                const auto& v = ev.wis[static_cast<std::size_t>(p)][static_cast<std::size_t>(lab)];
                for (int d = 0; d < 4; ++d) {
                    os << eval_policy_names()[static_cast<std::size_t>(p)] << ','
                       << trait_name(lab_traits[static_cast<std::size_t>(lab)]) << ','
                       << comp_names[static_cast<std::size_t>(d)] << ',' << format_double(v.value[d])
                       << ',' << format_double(v.trial_std[d]) << ',' << format_double(v.min_ess)
                       << '\n';
                }
            }
        }
    }
}

end_to_end_result run_end_to_end(const run_config& cfg, std::ostream* metrics_log) {
    cfg.validate();
    set_max_threads(cfg.threads);

    cohort::cohort_config cc = cfg.cohort;
    cc.seed = derive_seed(cfg.seed, 0xc0409);
    const auto cohort_all = cohort::simulate_cohort(cc);

    end_to_end_result out;
    auto [train_adms, test_adms] = cohort::split_cohort(cohort_all, cfg.train_fraction, cfg.seed);
    out.train_adms = std::move(train_adms);
    out.test_adms = std::move(test_adms);

    const uint64_t hash = chain_hash(cfg, 0 /* in-memory cohort */);
    out.art = train(cfg, out.train_adms, hash, metrics_log);
    out.train_ds = build_dataset(out.train_adms, out.art.kernels, cfg.mdp, &out.art.params, hash);
    out.test_ds = build_dataset(out.test_adms, out.art.kernels, cfg.mdp, &out.art.params, hash);
    out.eval = evaluate(out.art, cfg, out.test_adms, out.test_ds);
    return out;
}

}  // namespace labrl::pipeline
