#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "labrl/cohort.hpp"

using namespace labrl;
namespace ch = labrl::cohort;

namespace {

std::string export_to_string(std::span<const ch::admission> cohort) {
    std::ostringstream os;
    ch::export_events(os, cohort);
    return os.str();
}

ch::cohort_config small_config(int n, uint64_t seed) {
    ch::cohort_config cfg;
    cfg.n_admissions = n;
    cfg.seed = seed;
    return cfg;
}

// A minimal single-admission event file covering every tracked trait.
std::string minimal_admission_csv(double last_hour) {
    std::ostringstream os;
    os << "admission_id,kind,trait_or_category,timestamp_hours,value\n";
    for (int t = 0; t < n_traits; ++t) {
        const auto tr = static_cast<trait>(t);
        os << "adm-1,obs," << trait_name(tr) << "," << 1.0 + t << "," << (tr == trait::gcs ? 14 : 5)
           << "\n";
    }
    os << "adm-1,order,WBC,2.5,1\n";
    os << "adm-1,obs,WBC," << last_hour << ",9.4\n";
    os << "adm-1,order,WBC," << last_hour << ",1\n";
    return os.str();
}

}  // namespace

TEST_CASE("fixed seed reproduces byte-identical cohorts") {
    const auto a = ch::simulate_cohort(small_config(10, 7));
    const auto b = ch::simulate_cohort(small_config(10, 7));
    CHECK(export_to_string(a) == export_to_string(b));
    const auto c = ch::simulate_cohort(small_config(10, 8));
    CHECK(export_to_string(a) != export_to_string(c));
}

TEST_CASE("serial and parallel simulation agree") {
    set_max_threads(1);
    const auto serial = ch::simulate_cohort(small_config(12, 3));
    set_max_threads(4);
    const auto parallel = ch::simulate_cohort(small_config(12, 3));
    set_max_threads(1);
    CHECK(export_to_string(serial) == export_to_string(parallel));
}

TEST_CASE("admission structure invariants") {
    const auto cohort = ch::simulate_cohort(small_config(40, 11));
    CHECK(cohort.size() == 40);
    for (const auto& adm : cohort) {
        CHECK(adm.length_of_stay > 24);
        CHECK(adm.length_of_stay < 480);
        for (const auto& ob : adm.observations) {
            CHECK(ob.time >= 0.0);
            CHECK(ob.time <= adm.length_of_stay);
            const auto& m = ch::default_trait_models()[static_cast<std::size_t>(ob.id)];
            CHECK(ob.value >= m.lo);
            CHECK(ob.value <= m.hi);
        }
        for (const auto& iv : adm.interventions) {
            CHECK(iv.onset >= 0.0);
            CHECK(iv.duration > 0.0);
            CHECK(iv.onset <= adm.length_of_stay);
        }
        // Every lab observation time appears among that lab's orders.
        for (int lab = 0; lab < n_labs; ++lab) {
            std::set<double> order_times;
            for (const auto& od : adm.orders)
                if (od.lab == lab) order_times.insert(od.time);
            for (const auto& ob : adm.observations) {
                if (lab_index(ob.id) != lab) continue;
                CHECK(order_times.count(ob.time) == 1);
            }
        }
        // Every required trait has at least one recording.
        std::array<bool, n_traits> seen{};
        for (const auto& ob : adm.observations) seen[static_cast<std::size_t>(ob.id)] = true;
        for (bool s : seen) CHECK(s);
    }
}

TEST_CASE("configured creatinine statistics are reproduced") {
    auto cfg = small_config(150, 51);
    cfg.sepsis_hazard = 0.0;  // no severity shift biasing the mean
    const auto cohort = ch::simulate_cohort(cfg);
    const auto stats = ch::compute_trait_stats(cohort);
    const auto& cr = stats[static_cast<std::size_t>(trait::creatinine)];

    // Standard error from per-admission means; observations within an
    // admission are strongly autocorrelated.
    std::vector<double> adm_means;
    for (const auto& adm : cohort) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& ob : adm.observations) {
            if (ob.id != trait::creatinine) continue;
            sum += ob.value;
            ++n;
        }
        if (n > 0) adm_means.push_back(sum / static_cast<double>(n));
    }
    double mean = 0.0;
    for (double m : adm_means) mean += m;
    mean /= static_cast<double>(adm_means.size());
    double var = 0.0;
    for (double m : adm_means) var += (m - mean) * (m - mean);
    var /= static_cast<double>(adm_means.size());
    const double se = std::sqrt(var / static_cast<double>(adm_means.size()));
    CHECK(std::abs(cr.mean - 1.5) <= 3.0 * se);
    CHECK(cr.sd == doctest::Approx(1.2).epsilon(0.2));
}

TEST_CASE("zero sepsis hazard produces no interventions") {
    auto cfg = small_config(25, 4);
    cfg.sepsis_hazard = 0.0;
    const auto cohort = ch::simulate_cohort(cfg);
    std::size_t interventions = 0;
    for (const auto& adm : cohort) interventions += adm.interventions.size();
    CHECK(interventions == 0);
}

TEST_CASE("invalid configs are rejected") {
    CHECK_THROWS_AS(ch::simulate_cohort(small_config(0, 1)), config_error);
    auto cfg = small_config(5, 1);
    cfg.traits[0].sd = -1.0;
    CHECK_THROWS_AS(ch::simulate_cohort(cfg), config_error);
    cfg = small_config(5, 1);
    cfg.sepsis_hazard = 1.5;
    CHECK_THROWS_AS(ch::simulate_cohort(cfg), config_error);
}

TEST_CASE("ingest keeps a complete 48-hour admission") {
    std::istringstream in(minimal_admission_csv(47.5));
    ch::ingest_report rep;
    const auto cohort = ch::ingest_events(in, &rep);
    REQUIRE(cohort.size() == 1);
    CHECK(cohort[0].length_of_stay == 48);
    CHECK(rep.retained == 1);
    CHECK(rep.dropped_length_of_stay == 0);
    CHECK(rep.dropped_missing_trait == 0);
}

TEST_CASE("ingest drops a 12-hour admission on the length-of-stay filter") {
    std::istringstream in(minimal_admission_csv(11.5));
    ch::ingest_report rep;
    const auto cohort = ch::ingest_events(in, &rep);
    CHECK(cohort.empty());
    CHECK(rep.dropped_length_of_stay == 1);
    CHECK(rep.dropped_missing_trait == 0);
}

TEST_CASE("ingest drops admissions missing a required trait") {
    std::ostringstream os;
    os << "admission_id,kind,trait_or_category,timestamp_hours,value\n";
    for (int t = 0; t < n_traits; ++t) {
        if (static_cast<trait>(t) == trait::wbc) continue;  // withhold all WBC rows
        os << "adm-1,obs," << trait_name(static_cast<trait>(t)) << "," << 30.0 + t << ",5\n";
    }
    std::istringstream in(os.str());
    ch::ingest_report rep;
    const auto cohort = ch::ingest_events(in, &rep);
    CHECK(cohort.empty());
    CHECK(rep.dropped_missing_trait == 1);
}

TEST_CASE("ingest reports malformed rows with their line number") {
    std::istringstream in(
        "admission_id,kind,trait_or_category,timestamp_hours,value\n"
        "adm-1,obs,HR,1.0,80\n"
        "adm-1,obs,HR,not_a_number,80\n");
    try {
        ch::ingest_events(in);
        FAIL("expected parse_error");
    } catch (const parse_error& e) {
        CHECK(e.line_number == 3);
    }

    std::istringstream short_row(
        "admission_id,kind,trait_or_category,timestamp_hours,value\n"
        "adm-1,obs,HR\n");
    CHECK_THROWS_AS(ch::ingest_events(short_row), parse_error);

    std::istringstream bad_kind(
        "admission_id,kind,trait_or_category,timestamp_hours,value\n"
        "adm-1,measurement,HR,1.0,80\n");
    CHECK_THROWS_AS(ch::ingest_events(bad_kind), parse_error);
}

TEST_CASE("empty files raise an empty-cohort error") {
    std::istringstream empty("");
    CHECK_THROWS_AS(ch::ingest_events(empty), io_error);
    std::istringstream header_only("admission_id,kind,trait_or_category,timestamp_hours,value\n");
    CHECK_THROWS_AS(ch::ingest_events(header_only), io_error);
}

TEST_CASE("ingest of an exported cohort is the identity on the file") {
    const auto cohort = ch::simulate_cohort(small_config(15, 23));
    const std::string exported = export_to_string(cohort);
    std::istringstream in(exported);
    ch::ingest_report rep;
    const auto round = ch::ingest_events(in, &rep);
    CHECK(rep.retained == 15);
    CHECK(export_to_string(round) == exported);
}

TEST_CASE("split partitions at admission granularity") {
    const auto cohort = ch::simulate_cohort(small_config(60, 2));
    const auto [train, test] = ch::split_cohort(cohort, 0.6, 9);
    CHECK(train.size() == 36);
    CHECK(test.size() == 24);
    std::set<std::string> train_ids, test_ids;
    for (const auto& a : train) train_ids.insert(a.id);
    for (const auto& a : test) test_ids.insert(a.id);
    CHECK(train_ids.size() == 36);
    for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);

    const auto [train2, test2] = ch::split_cohort(cohort, 0.6, 9);
    CHECK(export_to_string(train) == export_to_string(train2));
    const auto [train3, test3] = ch::split_cohort(cohort, 0.6, 10);
    CHECK(export_to_string(train) != export_to_string(train3));
}

TEST_CASE("split ratio arithmetic matches the cohort scale") {
    // 6,060 admissions at 0.6 give the 3,636 / 2,424 partition; checked on
    // lightweight stand-in admissions.
    std::vector<ch::admission> cohort(6060);
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        cohort[i].id = "a" + std::to_string(i);
        cohort[i].length_of_stay = 48;
    }
    const auto [train, test] = ch::split_cohort(cohort, 0.6, 1);
    CHECK(train.size() == 3636);
    CHECK(test.size() == 2424);
}

TEST_CASE("split edge cases") {
    std::vector<ch::admission> two(2);
    two[0].id = "a";
    two[1].id = "b";
    const auto [train, test] = ch::split_cohort(two, 0.5, 3);
    CHECK(train.size() == 1);
    CHECK(test.size() == 1);

    std::vector<ch::admission> one(1);
    CHECK_THROWS_AS(ch::split_cohort(one, 0.5, 3), argument_error);
    CHECK_THROWS_AS(ch::split_cohort(two, 0.0, 3), argument_error);
    CHECK_THROWS_AS(ch::split_cohort(two, 1.0, 3), argument_error);
}
