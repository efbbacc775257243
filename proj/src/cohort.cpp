#include "labrl/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace labrl::cohort {

namespace {

const std::array<std::string, n_interventions> kInterventionNames = {
    "antibiotics", "vasopressors", "dialysis", "mechanical_ventilation"};

// Relative initiation propensity per category in unstable states.
constexpr std::array<double, n_interventions> kCategoryWeight = {1.4, 1.0, 0.3, 0.6};

enum severity : int { stable = 0, deteriorating = 1, septic = 2 };

double severity_shift(const trait_model& m, int sev) {
    if (sev == deteriorating) return m.shift_deteriorating * m.sd;
    if (sev == septic) return m.shift_septic * m.sd;
    return 0.0;
}

int kind_rank_obs() { return 0; }
int kind_rank_order() { return 1; }
int kind_rank_intervention() { return 2; }

void sort_admission_events(admission& adm) {
    std::stable_sort(adm.observations.begin(), adm.observations.end(),
                     [](const observation_event& a, const observation_event& b) {
                         if (a.time != b.time) return a.time < b.time;
                         return static_cast<int>(a.id) < static_cast<int>(b.id);
                     });
    std::stable_sort(adm.orders.begin(), adm.orders.end(), [](const order_event& a, const order_event& b) {
        if (a.time != b.time) return a.time < b.time;
        return a.lab < b.lab;
    });
    std::stable_sort(adm.interventions.begin(), adm.interventions.end(),
                     [](const intervention_event& a, const intervention_event& b) {
                         if (a.onset != b.onset) return a.onset < b.onset;
                         return static_cast<int>(a.category) < static_cast<int>(b.category);
                     });
}

}  // namespace

const std::string& intervention_name(intervention c) {
    return kInterventionNames[static_cast<std::size_t>(c)];
}

intervention intervention_from_name(const std::string& name) {
    for (int i = 0; i < n_interventions; ++i) {
        if (kInterventionNames[static_cast<std::size_t>(i)] == name)
            return static_cast<intervention>(i);
    }
    throw argument_error("unknown intervention category: " + name);
}

std::array<trait_model, n_traits> default_trait_models() {
    std::array<trait_model, n_traits> m{};
    auto set = [&](trait t, double mean, double sd, double tau, double lo, double hi, double sd_det,
                   double sd_sep) {
        m[static_cast<std::size_t>(t)] = {mean, sd, tau, lo, hi, sd_det, sd_sep};
    };
    // Means and SDs for the eight tracked covariates follow the cohort-level
    // statistics; the rest are plausible ICU defaults.
    set(trait::hr, 87.5, 18.2, 10.0, 20.0, 220.0, 0.6, 1.2);
    set(trait::rr, 20.1, 5.7, 10.0, 4.0, 60.0, 0.5, 1.1);
    set(trait::temp, 98.5, 1.4, 16.0, 90.0, 108.0, 0.5, 1.2);
    set(trait::mean_bp, 77.9, 15.3, 10.0, 20.0, 180.0, -0.5, -1.1);
    set(trait::creatinine, 1.5, 1.2, 30.0, 0.1, 20.0, 0.5, 1.4);
    set(trait::bun, 31.0, 21.1, 36.0, 1.0, 180.0, 0.4, 1.0);
    set(trait::wbc, 11.6, 6.2, 24.0, 0.1, 80.0, 0.5, 1.2);
    set(trait::lactate, 2.4, 1.8, 16.0, 0.2, 25.0, 0.6, 1.5);
    set(trait::bilirubin, 0.9, 0.7, 36.0, 0.1, 30.0, 0.4, 1.2);
    set(trait::platelet, 240.0, 95.0, 48.0, 5.0, 900.0, -0.4, -1.1);
    set(trait::fio2_ratio, 380.0, 90.0, 16.0, 40.0, 600.0, -0.6, -1.4);
    set(trait::gcs, 14.2, 1.1, 20.0, 3.0, 15.0, -1.0, -3.5);
    set(trait::dopamine, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0);  // derived from vasopressor activity
    return m;
}

void cohort_config::validate() const {
    if (n_admissions <= 0) throw config_error("n_admissions must be positive");
    auto unit = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!unit(sepsis_hazard) || !unit(escalation_hazard) || !unit(recovery_hazard))
        throw config_error("hazards must lie in [0, 1]");
    if (lab_orders_per_day <= 0.0 || vital_obs_per_hour <= 0.0 || aux_obs_per_hour <= 0.0 ||
        gcs_obs_per_hour <= 0.0)
        throw config_error("sampling rates must be positive");
    if (order_boost_unstable < 1.0) throw config_error("order_boost_unstable must be >= 1");
    if (!unit(intervention_hazard_deteriorating) || !unit(intervention_hazard_septic))
        throw config_error("intervention hazards must lie in [0, 1]");
    if (mean_intervention_duration <= 0.0) throw config_error("intervention duration must be positive");
    if (los_log_sd <= 0.0) throw config_error("los_log_sd must be positive");
    for (int i = 0; i < n_traits; ++i) {
        const auto& t = traits[static_cast<std::size_t>(i)];
        if (t.sd <= 0.0)
            throw config_error("trait SD must be positive (" + trait_name(static_cast<trait>(i)) + ")");
        if (t.timescale <= 0.0)
            throw config_error("trait timescale must be positive (" + trait_name(static_cast<trait>(i)) + ")");
        if (!(t.lo < t.hi))
            throw config_error("trait bounds must satisfy lo < hi (" + trait_name(static_cast<trait>(i)) + ")");
    }
}

namespace {

admission simulate_admission(const cohort_config& cfg, int index) {
    rng gen(derive_seed(cfg.seed, static_cast<uint64_t>(index)));

    admission adm;
    {
        std::ostringstream id;
        id << "sim-";
        std::string num = std::to_string(index + 1);
        id << std::string(6 - std::min<std::size_t>(6, num.size()), '0') << num;
        adm.id = id.str();
    }

    const double raw_los = std::exp(gen.normal(cfg.los_log_mean, cfg.los_log_sd));
    adm.length_of_stay = static_cast<int>(std::lround(std::clamp(raw_los, 25.0, 479.0)));
    const int los = adm.length_of_stay;

    // Latent severity chain, one state per hour.
    std::vector<int> sev(static_cast<std::size_t>(los) + 1, stable);
    for (int h = 1; h <= los; ++h) {
        const int prev = sev[static_cast<std::size_t>(h - 1)];
        int next = prev;
        const double u = gen.uniform();
        if (prev == stable) {
            if (u < cfg.sepsis_hazard) next = deteriorating;
        } else if (prev == deteriorating) {
            if (u < cfg.escalation_hazard)
                next = septic;
            else if (u < cfg.escalation_hazard + cfg.recovery_hazard)
                next = stable;
        } else {
            if (u < cfg.recovery_hazard) next = deteriorating;
        }
        sev[static_cast<std::size_t>(h)] = next;
    }

    // Hourly latent per trait, reverting toward the severity-shifted mean.
    std::array<std::vector<double>, n_traits> latent;
    for (int ti = 0; ti < n_traits; ++ti) {
        if (static_cast<trait>(ti) == trait::dopamine) continue;
        const auto& m = cfg.traits[static_cast<std::size_t>(ti)];
        auto& x = latent[static_cast<std::size_t>(ti)];
        x.resize(static_cast<std::size_t>(los) + 1);
        const double phi = std::exp(-1.0 / m.timescale);
        const double step_sd = m.sd * std::sqrt(1.0 - phi * phi);
        x[0] = gen.normal(m.mean + severity_shift(m, sev[0]), m.sd);
        for (int h = 1; h <= los; ++h) {
            const double target = m.mean + severity_shift(m, sev[static_cast<std::size_t>(h)]);
            x[static_cast<std::size_t>(h)] =
                x[static_cast<std::size_t>(h - 1)] +
                (1.0 - phi) * (target - x[static_cast<std::size_t>(h - 1)]) + gen.normal(0.0, step_sd);
        }
    }

    auto latent_at = [&](trait t, double time) {
        const auto& x = latent[static_cast<std::size_t>(t)];
        const int h = std::min(static_cast<int>(time), los - 1);
        const double frac = time - h;
        return x[static_cast<std::size_t>(h)] +
               frac * (x[static_cast<std::size_t>(h + 1)] - x[static_cast<std::size_t>(h)]);
    };

    auto observe = [&](trait t, double time) {
        const auto& m = cfg.traits[static_cast<std::size_t>(t)];
        double v = latent_at(t, time) + gen.normal(0.0, 0.05 * m.sd);
        v = std::clamp(v, m.lo, m.hi);
        if (t == trait::gcs) v = std::clamp(std::round(v), 3.0, 15.0);
        adm.observations.push_back({t, time, v});
    };

    // Interventions initiate only in unstable hours and only while the
    // category is not already running.
    std::array<double, n_interventions> active_until{};
    for (int h = 0; h < los; ++h) {
        const int s = sev[static_cast<std::size_t>(h)];
        const double hazard = s == septic          ? cfg.intervention_hazard_septic
                              : s == deteriorating ? cfg.intervention_hazard_deteriorating
                                                   : 0.0;
        for (int c = 0; c < n_interventions; ++c) {
            const double p = std::min(1.0, hazard * kCategoryWeight[static_cast<std::size_t>(c)]);
            if (!gen.bernoulli(p)) continue;
            const double onset = h + gen.uniform() * 0.999;
            if (onset <= active_until[static_cast<std::size_t>(c)]) continue;
            double duration = std::max(0.5, gen.exponential(cfg.mean_intervention_duration));
            duration = std::min(duration, static_cast<double>(los) - onset);
            adm.interventions.push_back({static_cast<intervention>(c), onset, duration});
            active_until[static_cast<std::size_t>(c)] = onset + duration;
        }
    }

    auto vasopressor_active = [&](double time) {
        for (const auto& iv : adm.interventions) {
            if (iv.category != intervention::vasopressors) continue;
            if (time >= iv.onset && time <= iv.onset + iv.duration) return true;
        }
        return false;
    };

    // Vitals roughly hourly; dopamine is charted alongside them as an
    // infusion status flag.
    for (int h = 0; h < los; ++h) {
        for (trait t : vital_traits) {
            if (!gen.bernoulli(cfg.vital_obs_per_hour)) continue;
            observe(t, h + gen.uniform() * 0.999);
        }
        if (gen.bernoulli(cfg.vital_obs_per_hour)) {
            const double time = h + gen.uniform() * 0.999;
            adm.observations.push_back({trait::dopamine, time, vasopressor_active(time) ? 1.0 : 0.0});
        }
    }

    // Sparser auxiliary traits needed by the organ-failure score.
    for (int h = 0; h < los; ++h) {
        for (trait t : {trait::bilirubin, trait::platelet, trait::fio2_ratio}) {
            if (!gen.bernoulli(cfg.aux_obs_per_hour)) continue;
            observe(t, h + gen.uniform() * 0.999);
        }
        if (gen.bernoulli(cfg.gcs_obs_per_hour)) observe(trait::gcs, h + gen.uniform() * 0.999);
    }

    // Lab orders 2-3 times a day per lab, more often when unstable; every
    // lab observation shares its order's timestamp.
    const double base_rate = cfg.lab_orders_per_day / 24.0;
    for (int h = 0; h < los; ++h) {
        const int s = sev[static_cast<std::size_t>(h)];
        const double boost = s == stable ? 1.0 : (s == deteriorating ? cfg.order_boost_unstable
                                                                     : cfg.order_boost_unstable * 1.3);
        const double p = std::min(1.0, base_rate * boost);
        for (int lab = 0; lab < n_labs; ++lab) {
            if (!gen.bernoulli(p)) continue;
            const double time = h + gen.uniform() * 0.999;
            adm.orders.push_back({lab, time});
            observe(lab_traits[static_cast<std::size_t>(lab)], time);
        }
    }

    // Guarantee at least one recording per required trait so simulated
    // admissions always pass their own ingest filter.
    std::array<bool, n_traits> seen{};
    for (const auto& ob : adm.observations) seen[static_cast<std::size_t>(ob.id)] = true;
    for (int ti = 0; ti < n_traits; ++ti) {
        if (seen[static_cast<std::size_t>(ti)]) continue;
        const trait t = static_cast<trait>(ti);
        const double time = gen.uniform() * 0.999;
        if (t == trait::dopamine) {
            adm.observations.push_back({t, time, vasopressor_active(time) ? 1.0 : 0.0});
        } else {
            const int lab = lab_index(t);
            if (lab >= 0) adm.orders.push_back({lab, time});
            observe(t, time);
        }
    }

    sort_admission_events(adm);
    return adm;
}

}  // namespace

std::vector<admission> simulate_cohort(const cohort_config& config) {
    config.validate();
    std::vector<admission> cohort(static_cast<std::size_t>(config.n_admissions));
    parallel_for(cohort.size(), [&](std::size_t i) {
        cohort[i] = simulate_admission(config, static_cast<int>(i));
    });
    return cohort;
}

// ---------------------------------------------------------------------------
// Event CSV.
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kHeader = "admission_id,kind,trait_or_category,timestamp_hours,value";

struct raw_admission {
    admission adm;
    double max_time = 0.0;
    std::array<bool, n_traits> has_trait{};
};

std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

}  // namespace

std::vector<admission> ingest_events(std::istream& in, ingest_report* report) {
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw io_error("empty cohort: event file has no content");
    ++line_no;
    if (line != kHeader)
        throw parse_error("unexpected event file header: \"" + line + "\"", line_no);

    std::vector<raw_admission> parsed;
    std::map<std::string, std::size_t> index_of;
    ingest_report rep;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cols = split_csv_row(line);
        if (cols.size() != 5) throw parse_error("expected 5 columns, got " + std::to_string(cols.size()), line_no);
        bool ok_t = false, ok_v = false;
        const double time = parse_double(cols[3], ok_t);
        const double value = parse_double(cols[4], ok_v);
        if (!ok_t || !ok_v || !std::isfinite(time) || !std::isfinite(value))
            throw parse_error("malformed numeric field", line_no);
        if (time < 0.0) throw parse_error("negative timestamp", line_no);

        auto it = index_of.find(cols[0]);
        if (it == index_of.end()) {
            it = index_of.emplace(cols[0], parsed.size()).first;
            parsed.emplace_back();
            parsed.back().adm.id = cols[0];
        }
        raw_admission& ra = parsed[it->second];

        try {
            if (cols[1] == "obs") {
                const trait t = trait_from_name(cols[2]);
                ra.adm.observations.push_back({t, time, value});
                ra.has_trait[static_cast<std::size_t>(t)] = true;
                ra.max_time = std::max(ra.max_time, time);
            } else if (cols[1] == "order") {
                const trait t = trait_from_name(cols[2]);
                const int lab = lab_index(t);
                if (lab < 0) throw argument_error("order for non-lab trait " + cols[2]);
                ra.adm.orders.push_back({lab, time});
                ra.max_time = std::max(ra.max_time, time);
            } else if (cols[1] == "intervention") {
                const intervention c = intervention_from_name(cols[2]);
                if (value <= 0.0) throw argument_error("intervention duration must be positive");
                ra.adm.interventions.push_back({c, time, value});
                ra.max_time = std::max(ra.max_time, time);
            } else {
                throw argument_error("unknown event kind: " + cols[1]);
            }
        } catch (const argument_error& e) {
            throw parse_error(e.what(), line_no);
        }
        ++rep.rows;
    }
    if (rep.rows == 0) throw io_error("empty cohort: event file has no event rows");

    std::vector<admission> cohort;
    for (auto& ra : parsed) {
        const int los = static_cast<int>(std::ceil(ra.max_time));
        if (los <= 24 || los >= 480) {
            ++rep.dropped_length_of_stay;
            continue;
        }
        bool complete = true;
        for (int ti = 0; ti < n_traits; ++ti) complete = complete && ra.has_trait[static_cast<std::size_t>(ti)];
        if (!complete) {
            ++rep.dropped_missing_trait;
            continue;
        }
        ra.adm.length_of_stay = los;
        sort_admission_events(ra.adm);
        cohort.push_back(std::move(ra.adm));
        ++rep.retained;
    }
    if (report) *report = rep;
    return cohort;
}

std::vector<admission> ingest_events_file(const std::string& path, ingest_report* report) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open event file: " + path);
    return ingest_events(in, report);
}

void export_events(std::ostream& os, std::span<const admission> cohort) {
    os << kHeader << '\n';
    struct row {
        double time;
        int kind;
        int sub;
        std::string text;
    };
    for (const auto& adm : cohort) {
        std::vector<row> rows;
        rows.reserve(adm.observations.size() + adm.orders.size() + adm.interventions.size());
        for (const auto& ob : adm.observations) {
            rows.push_back({ob.time, kind_rank_obs(), static_cast<int>(ob.id),
                            adm.id + ",obs," + trait_name(ob.id) + "," + format_double(ob.time) + "," +
                                format_double(ob.value)});
        }
        for (const auto& od : adm.orders) {
            rows.push_back({od.time, kind_rank_order(), od.lab,
                            adm.id + ",order," + trait_name(lab_traits[static_cast<std::size_t>(od.lab)]) +
                                "," + format_double(od.time) + ",1"});
        }
        for (const auto& iv : adm.interventions) {
            rows.push_back({iv.onset, kind_rank_intervention(), static_cast<int>(iv.category),
                            adm.id + ",intervention," + intervention_name(iv.category) + "," +
                                format_double(iv.onset) + "," + format_double(iv.duration)});
        }
        std::stable_sort(rows.begin(), rows.end(), [](const row& a, const row& b) {
            if (a.time != b.time) return a.time < b.time;
            if (a.kind != b.kind) return a.kind < b.kind;
            return a.sub < b.sub;
        });
        for (const auto& r : rows) os << r.text << '\n';
    }
}

std::pair<std::vector<admission>, std::vector<admission>> split_cohort(
    std::span<const admission> all, double train_fraction, uint64_t seed) {
    if (all.size() < 2) throw argument_error("split requires at least 2 admissions");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw argument_error("train_fraction must lie strictly between 0 and 1");

    const std::size_t n = all.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    rng gen(derive_seed(seed, 0x5b17u));
    for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = gen.uniform_int(i + 1);
        std::swap(idx[i], idx[j]);
    }
    std::size_t n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

    std::vector<bool> in_train(n, false);
    for (std::size_t i = 0; i < n_train; ++i) in_train[idx[i]] = true;
    std::pair<std::vector<admission>, std::vector<admission>> out;
    for (std::size_t i = 0; i < n; ++i) {
        (in_train[i] ? out.first : out.second).push_back(all[i]);
    }
    return out;
}

std::array<trait_stats, n_traits> compute_trait_stats(std::span<const admission> cohort) {
    std::array<double, n_traits> sum{}, sumsq{};
    std::array<std::size_t, n_traits> count{};
    for (const auto& adm : cohort) {
        for (const auto& ob : adm.observations) {
            const auto t = static_cast<std::size_t>(ob.id);
            sum[t] += ob.value;
            sumsq[t] += ob.value * ob.value;
            ++count[t];
        }
    }
    std::array<trait_stats, n_traits> out{};
    for (int t = 0; t < n_traits; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        out[ti].count = count[ti];
        if (count[ti] == 0) continue;
        const double n = static_cast<double>(count[ti]);
        out[ti].mean = sum[ti] / n;
        out[ti].sd = std::sqrt(std::max(0.0, sumsq[ti] / n - out[ti].mean * out[ti].mean));
    }
    return out;
}

}  // namespace labrl::cohort
