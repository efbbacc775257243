#include "labrl/common.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <thread>

namespace labrl {

namespace {

const std::array<std::string, n_traits> kTraitNames = {
    "HR",        "RR",       "Temp", "MeanBP",    "Creatinine", "BUN",      "WBC",
    "Lactate",   "Bilirubin", "Platelet", "Fio2Ratio", "GCS",    "Dopamine"};

}  // namespace

const std::string& trait_name(trait t) { return kTraitNames[static_cast<int>(t)]; }

trait trait_from_name(const std::string& name) {
    for (int i = 0; i < n_traits; ++i) {
        if (kTraitNames[i] == name) return static_cast<trait>(i);
    }
    throw argument_error("unknown trait name: " + name);
}

int lab_index(trait t) {
    for (int i = 0; i < n_labs; ++i) {
        if (lab_traits[i] == t) return i;
    }
    return -1;
}

uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t derive_seed(uint64_t base, uint64_t stream) {
    uint64_t s = base ^ (0x517cc1b727220a95ULL * (stream + 1));
    uint64_t a = splitmix64(s);
    uint64_t b = splitmix64(s);
    return a ^ (b << 1);
}

uint64_t derive_seed(uint64_t base, uint64_t stream_a, uint64_t stream_b) {
    return derive_seed(derive_seed(base, stream_a), stream_b);
}

rng::rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
}

static inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

uint64_t rng::next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

uint64_t rng::uniform_int(uint64_t n) {
    // Lemire's multiply-shift; bias is negligible for the ranges used here
    // and the mapping is identical on every platform.
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
}

double rng::normal() {
    // Box-Muller without a cached spare so the draw count per call is fixed.
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double rng::normal(double mean, double sd) { return mean + sd * normal(); }

double rng::exponential(double mean) {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return -mean * std::log(u);
}

bool rng::bernoulli(double p) { return uniform() < p; }

int rng::poisson(double mean) {
    if (mean <= 0.0) return 0;
    const double limit = std::exp(-mean);
    double prod = uniform();
    int k = 0;
    while (prod > limit) {
        prod *= uniform();
        ++k;
    }
    return k;
}

namespace {
std::atomic<int> g_max_threads{1};
}

void set_max_threads(int n) {
    if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    g_max_threads.store(n);
}

int max_threads() { return g_max_threads.load(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    const int workers = std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                body(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, bool& ok) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    ok = res.ec == std::errc() && res.ptr == s.data() + s.size();
    return v;
}

}  // namespace labrl
