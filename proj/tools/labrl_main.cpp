#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "labrl/cohort.hpp"
#include "labrl/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitInvariant = 3;
constexpr int kExitCompatibility = 4;

struct global_options {
    std::string config_path;
    std::string out_dir = ".";
    std::string events_path;
    int64_t seed = -1;  // -1: keep the config's seed
    int threads = 0;    // 0: keep the config's thread count
};

labrl::pipeline::run_config load_config(const global_options& opt) {
    labrl::pipeline::run_config cfg;
    if (!opt.config_path.empty()) {
        cfg = labrl::pipeline::config_from_json_file(opt.config_path);
    } else {
        cfg.cohort.n_admissions = 100;
    }
    if (opt.seed >= 0) cfg.seed = static_cast<uint64_t>(opt.seed);
    if (opt.threads > 0) cfg.threads = opt.threads;
    labrl::set_max_threads(cfg.threads);
    return cfg;
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw labrl::io_error("cannot write " + path.string());
    os << content;
}

json cohort_summary(std::span<const labrl::cohort::admission> cohort,
                    const labrl::cohort::ingest_report* rep, uint64_t config_hash) {
    const auto stats = labrl::cohort::compute_trait_stats(cohort);
    json traits = json::object();
    for (int t = 0; t < labrl::n_traits; ++t) {
        const auto& s = stats[static_cast<std::size_t>(t)];
        traits[labrl::trait_name(static_cast<labrl::trait>(t))] = {
            {"count", s.count}, {"mean", s.mean}, {"sd", s.sd}};
    }
    std::size_t orders = 0, interventions = 0, hours = 0;
    for (const auto& adm : cohort) {
        orders += adm.orders.size();
        interventions += adm.interventions.size();
        hours += static_cast<std::size_t>(adm.length_of_stay);
    }
    json j{{"n_admissions", cohort.size()},
           {"total_orders", orders},
           {"total_interventions", interventions},
           {"total_hours", hours},
           {"config_hash", labrl::hash_hex(config_hash)},
           {"traits", traits}};
    if (rep) {
        j["ingest"] = {{"rows", rep->rows},
                       {"retained", rep->retained},
                       {"dropped_length_of_stay", rep->dropped_length_of_stay},
                       {"dropped_missing_trait", rep->dropped_missing_trait}};
    }
    return j;
}

std::vector<labrl::cohort::admission> load_cohort(const global_options& opt,
                                                  labrl::cohort::ingest_report* rep) {
    if (opt.events_path.empty()) throw labrl::config_error("--events is required for this command");
    return labrl::cohort::ingest_events_file(opt.events_path, rep);
}

int cmd_simulate(const global_options& opt) {
    auto cfg = load_config(opt);
    labrl::cohort::cohort_config cc = cfg.cohort;
    cc.seed = labrl::derive_seed(cfg.seed, 0xc0409);
    const auto cohort = labrl::cohort::simulate_cohort(cc);

    fs::create_directories(opt.out_dir);
    {
        std::ofstream os(fs::path(opt.out_dir) / "events.csv", std::ios::binary);
        labrl::cohort::export_events(os, cohort);
    }
    const uint64_t digest = labrl::pipeline::file_digest((fs::path(opt.out_dir) / "events.csv").string());
    write_text_file(fs::path(opt.out_dir) / "cohort_summary.json",
                    cohort_summary(cohort, nullptr, labrl::pipeline::chain_hash(cfg, digest)).dump(2) + "\n");
    std::cout << "simulated " << cohort.size() << " admissions -> " << opt.out_dir << "\n";
    return kExitOk;
}

int cmd_ingest(const global_options& opt) {
    auto cfg = load_config(opt);
    labrl::cohort::ingest_report rep;
    const auto cohort = load_cohort(opt, &rep);
    fs::create_directories(opt.out_dir);
    {
        std::ofstream os(fs::path(opt.out_dir) / "events.csv", std::ios::binary);
        labrl::cohort::export_events(os, cohort);
    }
    const uint64_t digest = labrl::pipeline::file_digest((fs::path(opt.out_dir) / "events.csv").string());
    write_text_file(fs::path(opt.out_dir) / "cohort_summary.json",
                    cohort_summary(cohort, &rep, labrl::pipeline::chain_hash(cfg, digest)).dump(2) + "\n");
    std::cout << "retained " << rep.retained << " admissions (dropped " << rep.dropped_length_of_stay
              << " on length of stay, " << rep.dropped_missing_trait << " on missing traits)\n";
    return kExitOk;
}

int cmd_forecast(const global_options& opt, int grid_admissions) {
    auto cfg = load_config(opt);
    const auto cohort = load_cohort(opt, nullptr);
    auto [train, test] = labrl::cohort::split_cohort(cohort, cfg.train_fraction, cfg.seed);
    const auto kernels = labrl::pipeline::fit_kernels(train, cfg.forecast_fit);

    fs::create_directories(opt.out_dir);
    json per_trait = json::object();
    for (int t = 0; t < labrl::n_traits; ++t) {
        const auto tr = static_cast<labrl::trait>(t);
        if (tr == labrl::trait::gcs || tr == labrl::trait::dopamine) continue;
        const auto& k = kernels.params[static_cast<std::size_t>(t)];
        per_trait[labrl::trait_name(tr)] = {{"output_variance", k.output_variance},
                                            {"lengthscale", k.lengthscale},
                                            {"noise_variance", k.noise_variance},
                                            {"prior_mean", k.prior_mean}};
    }
    write_text_file(fs::path(opt.out_dir) / "kernels.json",
                    json{{"kernels", per_trait}}.dump(2) + "\n");

    if (grid_admissions > 0) {
        std::ofstream os(fs::path(opt.out_dir) / "forecast_grids.csv", std::ios::binary);
        bool header = true;
        const int limit = std::min<int>(grid_admissions, static_cast<int>(test.size()));
        for (int i = 0; i < limit; ++i) {
            const auto grid_times = labrl::mdp::hourly_grid(test[static_cast<std::size_t>(i)]);
            for (labrl::trait lt : labrl::lab_traits) {
                const auto series = labrl::mdp::series_for_trait(test[static_cast<std::size_t>(i)], lt);
                const auto& kp = kernels.params[static_cast<std::size_t>(lt)];
                for (auto mode : {labrl::forecast::mode::filtering, labrl::forecast::mode::smoothing}) {
                    const auto g = labrl::forecast::predict(series, kp, grid_times, mode);
                    labrl::forecast::export_grid_csv(os, test[static_cast<std::size_t>(i)].id, g, mode,
                                                     header);
                    header = false;
                }
            }
        }
    }
    std::cout << "fitted kernels on " << train.size() << " training admissions -> " << opt.out_dir
              << "\n";
    return kExitOk;
}

int cmd_build_transitions(const global_options& opt, bool csv) {
    auto cfg = load_config(opt);
    const auto cohort = load_cohort(opt, nullptr);
    auto [train, test] = labrl::cohort::split_cohort(cohort, cfg.train_fraction, cfg.seed);
    const uint64_t hash = labrl::pipeline::chain_hash(cfg, labrl::pipeline::file_digest(opt.events_path));

    const auto kernels = labrl::pipeline::fit_kernels(train, cfg.forecast_fit);
    const auto train_ds = labrl::pipeline::build_dataset(train, kernels, cfg.mdp, nullptr, hash);
    labrl::pipeline::dataset_params params;
    params.rewards = train_ds.rewards;
    params.lab_prior_means = train_ds.lab_prior_means;
    params.lab_cohort_sd = train_ds.lab_cohort_sd;
    const auto test_ds = labrl::pipeline::build_dataset(test, kernels, cfg.mdp, &params, hash);

    fs::create_directories(opt.out_dir);
    auto dump = [&](const labrl::mdp::dataset& ds, const std::string& stem) {
        std::ofstream os(fs::path(opt.out_dir) / (stem + ".bin"), std::ios::binary);
        labrl::mdp::save_dataset(os, ds);
        write_text_file(fs::path(opt.out_dir) / (stem + ".json"), labrl::mdp::dataset_sidecar_json(ds));
        if (csv) {
            std::ofstream cs(fs::path(opt.out_dir) / (stem + ".csv"), std::ios::binary);
            labrl::mdp::export_transitions_csv(cs, ds);
        }
    };
    dump(train_ds, "transitions_train");
    dump(test_ds, "transitions_test");
    std::cout << "built " << train_ds.transitions.size() << " train / " << test_ds.transitions.size()
              << " test transitions -> " << opt.out_dir << "\n";
    return kExitOk;
}

int cmd_train(const global_options& opt) {
    auto cfg = load_config(opt);
    const auto cohort = load_cohort(opt, nullptr);
    auto [train, test] = labrl::cohort::split_cohort(cohort, cfg.train_fraction, cfg.seed);
    const uint64_t hash = labrl::pipeline::chain_hash(cfg, labrl::pipeline::file_digest(opt.events_path));

    fs::create_directories(opt.out_dir);
    std::ofstream metrics(fs::path(opt.out_dir) / "metrics.jsonl", std::ios::binary);
    const auto art = labrl::pipeline::train(cfg, train, hash, &metrics);
    {
        std::ofstream os(fs::path(opt.out_dir) / "policy.bin", std::ios::binary);
        art.save(os);
    }
    write_text_file(fs::path(opt.out_dir) / "feature_importances.json",
                    std::string("{\"features\": ") + [&] {
                        json names = json::array();
                        for (const auto& n : labrl::mdp::state_feature_names()) names.push_back(n);
                        return names.dump();
                    }() + ",\n \"per_lab_policy\": {" + [&] {
                        std::string out;
                        for (int lab = 0; lab < labrl::n_labs; ++lab) {
                            if (lab) out += ", ";
                            out += "\"" +
                                   labrl::trait_name(labrl::lab_traits[static_cast<std::size_t>(lab)]) +
                                   "\": " +
                                   art.policies.policies[static_cast<std::size_t>(lab)].importances_json();
                        }
                        return out;
                    }() + "}}\n");
    std::cout << "trained policy on " << train.size() << " admissions -> " << opt.out_dir << "\n";
    return kExitOk;
}

int cmd_evaluate(const global_options& opt, const std::string& policy_path) {
    auto cfg = load_config(opt);
    const auto cohort = load_cohort(opt, nullptr);
    auto [train, test] = labrl::cohort::split_cohort(cohort, cfg.train_fraction, cfg.seed);
    const uint64_t hash = labrl::pipeline::chain_hash(cfg, labrl::pipeline::file_digest(opt.events_path));

    std::ifstream is(policy_path, std::ios::binary);
    if (!is) throw labrl::io_error("cannot open policy artifact: " + policy_path);
    const auto art = labrl::pipeline::artifact::load(is);
    if (art.config_hash != hash)
        throw labrl::compatibility_error(
            "policy artifact was trained under a different config/events chain (artifact " +
            labrl::hash_hex(art.config_hash) + ", expected " + labrl::hash_hex(hash) + ")");

    const auto test_ds = labrl::pipeline::build_dataset(test, art.kernels, cfg.mdp, &art.params, hash);
    const auto ev = labrl::pipeline::evaluate(art, cfg, test, test_ds);

    fs::create_directories(opt.out_dir);
    write_text_file(fs::path(opt.out_dir) / "evaluation.json", labrl::pipeline::evaluation_to_json(ev) + "\n");
    labrl::pipeline::write_distribution_csvs(opt.out_dir, ev);
    std::cout << "evaluated policies on " << test.size() << " test admissions -> " << opt.out_dir
              << "\n";
    return kExitOk;
}

int cmd_report(const std::string& evaluation_path) {
    std::ifstream is(evaluation_path);
    if (!is) throw labrl::io_error("cannot open evaluation file: " + evaluation_path);
    json ev;
    try {
        is >> ev;
    } catch (const json::parse_error& e) {
        throw labrl::parse_error(std::string("invalid evaluation JSON: ") + e.what(), 0);
    }

    std::cout << "PS-WIS value per reward component (config " << ev.value("config_hash", "?")
              << ")\n";
    const auto comp = ev["reward_components"];
    for (const auto& [lab, per_comp] : ev["best_policy"].items()) {
        std::cout << "\n== " << lab << " ==\n";
        for (const auto& policy : ev["policies"]) {
            const auto& v = ev["ps_wis"][policy.get<std::string>()][lab]["value"];
            std::cout << "  " << policy.get<std::string>();
            for (std::size_t i = policy.get<std::string>().size(); i < 14; ++i) std::cout << ' ';
            for (std::size_t d = 0; d < comp.size(); ++d) {
                const bool star = per_comp[comp[d].get<std::string>()] == policy;
                std::cout << "  " << comp[d].get<std::string>() << "=" << v[d].get<double>()
                          << (star ? "*" : "");
            }
            std::cout << "\n";
        }
        const auto& red = ev["order_reduction"][lab];
        std::cout << "  orders: clinician " << red["clinician_orders"] << ", recommended (filtered) "
                  << red["recommended_filtered"];
        if (!red["reduction_pct"].is_null())
            std::cout << ", reduction " << red["reduction_pct"].get<double>() << "%";
        std::cout << "\n  info gain: clinician " << ev["info_gain"][lab]["clinician_mean"].get<double>()
                  << " vs mo_fqi " << ev["info_gain"][lab]["mo_fqi_mean"].get<double>() << "\n";
        std::cout << "  time to treatment: clinician "
                  << ev["time_to_treatment"][lab]["clinician_mean_hours"].get<double>() << "h vs mo_fqi "
                  << ev["time_to_treatment"][lab]["mo_fqi_mean_hours"].get<double>() << "h\n";
    }
    std::cout << "\n(* = best policy for that component)\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Batch multi-objective RL pipeline for ICU lab-test ordering policies"};
    app.require_subcommand(1);
    app.fallthrough();

    global_options opt;
    app.add_option("--config", opt.config_path, "JSON run configuration");
    app.add_option("--out", opt.out_dir, "output directory");
    app.add_option("--seed", opt.seed, "override the config seed");
    app.add_option("--threads", opt.threads, "worker thread cap (0 = hardware)");

    auto* simulate = app.add_subcommand("simulate", "generate a synthetic cohort event file");
    auto* ingest = app.add_subcommand("ingest", "validate and filter an event file");
    ingest->add_option("--events", opt.events_path, "event CSV to ingest");
    auto* forecast_cmd = app.add_subcommand("forecast", "fit per-trait forecasting kernels");
    forecast_cmd->add_option("--events", opt.events_path, "event CSV");
    int grid_admissions = 0;
    forecast_cmd->add_option("--grid-admissions", grid_admissions,
                             "dump hourly forecast grids for the first N test admissions");
    auto* build = app.add_subcommand("build-transitions", "assemble one-step transition datasets");
    build->add_option("--events", opt.events_path, "event CSV");
    bool build_csv = false;
    build->add_flag("--csv", build_csv, "also export transitions as CSV");
    auto* train_cmd = app.add_subcommand("train", "run MO-FQI and extract deterministic policies");
    train_cmd->add_option("--events", opt.events_path, "event CSV");
    auto* evaluate_cmd = app.add_subcommand("evaluate", "off-policy evaluation of a trained policy");
    evaluate_cmd->add_option("--events", opt.events_path, "event CSV");
    std::string policy_path = "policy.bin";
    evaluate_cmd->add_option("--policy", policy_path, "trained policy artifact");
    auto* report_cmd = app.add_subcommand("report", "human-readable summary of an evaluation");
    std::string evaluation_path = "evaluation.json";
    report_cmd->add_option("--evaluation", evaluation_path, "evaluation JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (simulate->parsed()) return cmd_simulate(opt);
        if (ingest->parsed()) return cmd_ingest(opt);
        if (forecast_cmd->parsed()) return cmd_forecast(opt, grid_admissions);
        if (build->parsed()) return cmd_build_transitions(opt, build_csv);
        if (train_cmd->parsed()) return cmd_train(opt);
        if (evaluate_cmd->parsed()) return cmd_evaluate(opt, policy_path);
        if (report_cmd->parsed()) return cmd_report(evaluation_path);
    } catch (const labrl::compatibility_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCompatibility;
    } catch (const labrl::invariant_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInvariant;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
