#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace labrl {

// ---------------------------------------------------------------------------
// Errors. Each failure class carries a message naming the offending input.
// ---------------------------------------------------------------------------

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct parse_error : std::runtime_error {
    parse_error(const std::string& msg, std::size_t line)
        : std::runtime_error(msg + " (line " + std::to_string(line) + ")"), line_number(line) {}
    std::size_t line_number;
};

struct fit_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct argument_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violation of an internal contract that must not occur on any valid input.
struct invariant_error : std::logic_error {
    using std::logic_error::logic_error;
};

// Artifact chains that do not belong together (config hash mismatch).
struct compatibility_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Tracked physiological traits.
// ---------------------------------------------------------------------------

enum class trait : int {
    hr = 0,
    rr,
    temp,
    mean_bp,
    creatinine,
    bun,
    wbc,
    lactate,
    bilirubin,
    platelet,
    fio2_ratio,
    gcs,
    dopamine,
};

inline constexpr int n_traits = 13;
inline constexpr int n_labs = 4;

// Vitals entering the state, in state order.
inline constexpr std::array<trait, 4> vital_traits = {trait::hr, trait::rr, trait::temp,
                                                      trait::mean_bp};
// Orderable labs, in action-bit order.
inline constexpr std::array<trait, 4> lab_traits = {trait::creatinine, trait::bun, trait::wbc,
                                                    trait::lactate};

const std::string& trait_name(trait t);
trait trait_from_name(const std::string& name);  // throws argument_error
int lab_index(trait t);                          // -1 if not a lab

// ---------------------------------------------------------------------------
// Reward vector components.
// ---------------------------------------------------------------------------

using vec4 = std::array<double, 4>;

enum reward_component : int { rc_sofa = 0, rc_treat = 1, rc_info = 2, rc_cost = 3 };

inline vec4 operator+(const vec4& a, const vec4& b) {
    return {a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]};
}

// ---------------------------------------------------------------------------
// Deterministic random streams. std:: distributions are not bit-stable across
// standard libraries, so everything is generated from raw engine output.
// ---------------------------------------------------------------------------

uint64_t splitmix64(uint64_t& state);

// Derives an independent stream seed from a base seed and a stream label, so
// per-admission / per-tree generators agree between serial and parallel runs.
uint64_t derive_seed(uint64_t base, uint64_t stream);
uint64_t derive_seed(uint64_t base, uint64_t stream_a, uint64_t stream_b);

class rng {
  public:
    explicit rng(uint64_t seed);

    uint64_t next_u64();
    double uniform();                    // [0, 1)
    double uniform(double lo, double hi);
    uint64_t uniform_int(uint64_t n);    // [0, n)
    double normal();                     // standard normal, Box-Muller
    double normal(double mean, double sd);
    double exponential(double mean);
    bool bernoulli(double p);
    int poisson(double mean);            // inversion; mean expected small

  private:
    uint64_t s_[4];  // xoshiro256++ state
};

// ---------------------------------------------------------------------------
// Parallel helpers. Work is partitioned by index so results are written to
// caller-owned slots and never depend on scheduling.
// ---------------------------------------------------------------------------

void set_max_threads(int n);  // 0 = hardware concurrency
int max_threads();

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

// ---------------------------------------------------------------------------
// Hashing / binary encoding.
// ---------------------------------------------------------------------------

uint64_t fnv1a64(const void* data, std::size_t len);
uint64_t fnv1a64(const std::string& s);
std::string hash_hex(uint64_t h);

// Shortest decimal representation that round-trips the double exactly.
std::string format_double(double v);
double parse_double(const std::string& s, bool& ok);

}  // namespace labrl
