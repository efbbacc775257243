#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "labrl_cli_test";

int run(const std::string& args) {
    const std::string cmd = std::string(LABRL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_config(const fs::path& p, uint64_t seed) {
    std::ofstream os(p);
    os << R"({
  "seed": )" << seed
       << R"(,
  "cohort": { "n_admissions": 24 },
  "fqi": { "iterations": 2, "batch_size": 1500,
           "q_trees": {"n_trees": 15, "min_samples_leaf": 8},
           "consistency_trees": {"n_trees": 10, "min_samples_leaf": 8} },
  "policy_trees": {"n_trees": 15, "min_samples_leaf": 8},
  "behaviour_trees": {"n_trees": 15, "min_samples_leaf": 8},
  "eval": { "random_trials": 3 }
})";
}

struct fixture {
    fixture() {
        fs::remove_all(kWork);
        fs::create_directories(kWork);
        write_config(kWork / "config.json", 7);
    }
};

}  // namespace

TEST_CASE("pipeline through the command line") {
    fixture fx;
    const std::string cfg = " --config " + (kWork / "config.json").string();

    SUBCASE("simulate is deterministic and idempotent") {
        REQUIRE(run("simulate" + cfg + " --out " + (kWork / "a").string()) == 0);
        REQUIRE(run("simulate" + cfg + " --out " + (kWork / "b").string()) == 0);
        CHECK(slurp(kWork / "a" / "events.csv") == slurp(kWork / "b" / "events.csv"));
        CHECK(slurp(kWork / "a" / "cohort_summary.json") == slurp(kWork / "b" / "cohort_summary.json"));

        // A different seed changes the cohort.
        REQUIRE(run("simulate" + cfg + " --seed 8 --out " + (kWork / "c").string()) == 0);
        CHECK(slurp(kWork / "a" / "events.csv") != slurp(kWork / "c" / "events.csv"));
    }

    SUBCASE("missing or broken config exits with the usage code") {
        CHECK(run("simulate --config /nonexistent/config.json --out " + (kWork / "x").string()) == 2);
        std::ofstream bad(kWork / "bad.json");
        bad << "{ not json";
        bad.close();
        CHECK(run("simulate --config " + (kWork / "bad.json").string()) == 2);
        CHECK(run("train" + cfg + " --events /nonexistent/events.csv") == 2);
        CHECK(run("definitely-not-a-command") == 2);
    }

    SUBCASE("ingest round-trips canonical event files") {
        REQUIRE(run("simulate" + cfg + " --out " + (kWork / "sim").string()) == 0);
        REQUIRE(run("ingest" + cfg + " --events " + (kWork / "sim" / "events.csv").string() +
                    " --out " + (kWork / "ing").string()) == 0);
        CHECK(slurp(kWork / "sim" / "events.csv") == slurp(kWork / "ing" / "events.csv"));
    }

    SUBCASE("train, evaluate and report chain") {
        REQUIRE(run("simulate" + cfg + " --out " + (kWork / "sim").string()) == 0);
        const std::string events = " --events " + (kWork / "sim" / "events.csv").string();

        REQUIRE(run("train" + cfg + events + " --out " + (kWork / "run1").string()) == 0);
        CHECK(fs::exists(kWork / "run1" / "policy.bin"));
        CHECK(fs::exists(kWork / "run1" / "feature_importances.json"));

        // The metrics log records the configured iteration count, one row each.
        const std::string metrics = slurp(kWork / "run1" / "metrics.jsonl");
        CHECK(metrics.find("\"iterations\":2") != std::string::npos);
        CHECK(metrics.find("\"gamma\":0.9") != std::string::npos);
        std::size_t rows = 0;
        for (char ch : metrics) rows += ch == '\n' ? 1u : 0u;
        CHECK(rows == 1 + 2 + 4);  // header + per-iteration rows + per-lab tuning rows

        // Retraining under the same seed reproduces the artifact bytes.
        REQUIRE(run("train" + cfg + events + " --out " + (kWork / "run2").string()) == 0);
        CHECK(slurp(kWork / "run1" / "policy.bin") == slurp(kWork / "run2" / "policy.bin"));
        CHECK(slurp(kWork / "run1" / "metrics.jsonl") == slurp(kWork / "run2" / "metrics.jsonl"));

        REQUIRE(run("evaluate" + cfg + events + " --policy " +
                    (kWork / "run1" / "policy.bin").string() + " --out " +
                    (kWork / "eval1").string()) == 0);
        const std::string ev = slurp(kWork / "eval1" / "evaluation.json");
        for (const char* policy :
             {"mo_fqi", "behaviour", "random_0.01", "random_p_emp", "random_0.5"})
            CHECK(ev.find(policy) != std::string::npos);
        for (const char* lab : {"Creatinine", "BUN", "WBC", "Lactate"})
            CHECK(ev.find(lab) != std::string::npos);
        CHECK(ev.find("trial_std") != std::string::npos);
        CHECK(fs::exists(kWork / "eval1" / "ps_wis_values.csv"));
        CHECK(fs::exists(kWork / "eval1" / "info_gain_distribution.csv"));
        CHECK(fs::exists(kWork / "eval1" / "time_to_treatment_distribution.csv"));

        // Evaluation is deterministic too.
        REQUIRE(run("evaluate" + cfg + events + " --policy " +
                    (kWork / "run1" / "policy.bin").string() + " --out " +
                    (kWork / "eval2").string()) == 0);
        CHECK(ev == slurp(kWork / "eval2" / "evaluation.json"));

        CHECK(run("report --evaluation " + (kWork / "eval1" / "evaluation.json").string()) == 0);

        // A mismatched chain (different seed => different config hash and
        // cohort) is refused with the compatibility exit code.
        write_config(kWork / "other.json", 8);
        REQUIRE(run("simulate --config " + (kWork / "other.json").string() + " --out " +
                    (kWork / "sim8").string()) == 0);
        CHECK(run("evaluate --config " + (kWork / "other.json").string() + " --events " +
                  (kWork / "sim8" / "events.csv").string() + " --policy " +
                  (kWork / "run1" / "policy.bin").string() + " --out " +
                  (kWork / "eval3").string()) == 4);
    }

    SUBCASE("build-transitions writes datasets with sidecars") {
        REQUIRE(run("simulate" + cfg + " --out " + (kWork / "sim").string()) == 0);
        REQUIRE(run("build-transitions" + cfg + " --events " +
                    (kWork / "sim" / "events.csv").string() + " --csv --out " +
                    (kWork / "ds").string()) == 0);
        for (const char* name : {"transitions_train.bin", "transitions_train.json",
                                 "transitions_train.csv", "transitions_test.bin",
                                 "transitions_test.json", "transitions_test.csv"})
            CHECK(fs::exists(kWork / "ds" / name));
        const std::string sidecar = slurp(kWork / "ds" / "transitions_train.json");
        CHECK(sidecar.find("state_features") != std::string::npos);
    }
}
