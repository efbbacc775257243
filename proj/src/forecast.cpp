#include "labrl/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace labrl::forecast {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

void check_series(const trait_series& s) {
    for (std::size_t i = 0; i + 1 < s.times.size(); ++i) {
        if (!(s.times[i] < s.times[i + 1]))
            throw argument_error("trait series timestamps must be strictly increasing (" +
                                 trait_name(s.id) + ")");
    }
    if (s.times.size() != s.values.size())
        throw argument_error("trait series times/values length mismatch");
    for (double v : s.values) {
        if (!std::isfinite(v)) throw argument_error("trait series contains a non-finite value");
    }
}

// One node of the merged observation/grid timeline.
struct timeline_node {
    double time;
    int obs = -1;   // index into series
    int grid = -1;  // index into grid
};

}  // namespace

fit_options fit_options::defaults() {
    fit_options o;
    for (int k = 0; k <= 12; ++k) o.lengthscales.push_back(std::pow(2.0, 0.5 * k));
    o.amplitude_fracs = {0.1, 0.25, 0.5, 0.75, 1.0, 1.5};
    o.noise_fracs = {0.005, 0.02, 0.05, 0.1, 0.25};
    return o;
}

double log_marginal_likelihood(const trait_series& series, const kernel_params& params) {
    // Prediction-error decomposition of the OU-kernel GP likelihood.
    const double ell = params.lengthscale;
    const double amp = params.output_variance;
    const double noise = params.noise_variance;
    double mean = params.prior_mean;
    double var = amp;
    double prev_t = 0.0;
    bool first = true;
    double ll = 0.0;
    for (std::size_t i = 0; i < series.times.size(); ++i) {
        const double t = series.times[i];
        if (!first) {
            const double phi = std::exp(-(t - prev_t) / ell);
            mean = params.prior_mean + phi * (mean - params.prior_mean);
            var = phi * phi * var + amp * (1.0 - phi * phi);
        }
        first = false;
        prev_t = t;
        const double s = std::max(var + noise, 1e-300);
        const double v = series.values[i] - mean;
        ll += -0.5 * (std::log(kTwoPi * s) + v * v / s);
        const double gain = (var + noise) > 0.0 ? var / (var + noise) : 0.0;
        mean += gain * v;
        var = (1.0 - gain) * var;
    }
    return ll;
}

kernel_params fit_kernel(std::span<const trait_series> series, const fit_options& opts) {
    const std::string name = series.empty() ? std::string("(none)") : trait_name(series.front().id);
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : series) {
        check_series(s);
        for (double v : s.values) sum += v;
        count += s.values.size();
    }
    if (count < 10)
        throw fit_error("insufficient observations to fit kernel for trait " + name + ": have " +
                        std::to_string(count) + ", need at least 10");

    const double prior_mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (const auto& s : series)
        for (double v : s.values) ss += (v - prior_mean) * (v - prior_mean);
    const double pooled_var = ss / static_cast<double>(count);
    const double scale = std::max(pooled_var, 1e-8);

    // Deterministic subsample: leading series until the cap is reached.
    std::vector<const trait_series*> fit_set;
    std::size_t used = 0;
    for (const auto& s : series) {
        if (used >= opts.max_observations && !fit_set.empty()) break;
        fit_set.push_back(&s);
        used += s.values.size();
    }

    kernel_params best;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (double nf : opts.noise_fracs) {
        for (double af : opts.amplitude_fracs) {
            for (double ell : opts.lengthscales) {
                kernel_params p{af * scale, ell, nf * scale, prior_mean};
                double ll = 0.0;
                for (const auto* s : fit_set) ll += log_marginal_likelihood(*s, p);
                if (ll > best_ll) {
                    best_ll = ll;
                    best = p;
                }
            }
        }
    }
    return best;
}

forecast_grid predict(const trait_series& series, const kernel_params& params,
                      std::span<const double> grid, mode m) {
    check_series(series);
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        if (!(grid[i] < grid[i + 1])) throw argument_error("prediction grid must be strictly increasing");
    }
    if (params.lengthscale <= 0.0) throw argument_error("lengthscale must be positive");
    if (params.output_variance < 0.0 || params.noise_variance < 0.0)
        throw argument_error("variances must be nonnegative");

    // Merge observation and grid times; coincident times share one node so
    // that filtering at t conditions on the observation at t.
    std::vector<timeline_node> nodes;
    nodes.reserve(series.times.size() + grid.size());
    std::size_t oi = 0, gi = 0;
    while (oi < series.times.size() || gi < grid.size()) {
        if (gi >= grid.size() || (oi < series.times.size() && series.times[oi] < grid[gi])) {
            nodes.push_back({series.times[oi], static_cast<int>(oi), -1});
            ++oi;
        } else if (oi >= series.times.size() || grid[gi] < series.times[oi]) {
            nodes.push_back({grid[gi], -1, static_cast<int>(gi)});
            ++gi;
        } else {
            nodes.push_back({series.times[oi], static_cast<int>(oi), static_cast<int>(gi)});
            ++oi;
            ++gi;
        }
    }

    const std::size_t n = nodes.size();
    std::vector<double> pred_mean(n), pred_var(n), filt_mean(n), filt_var(n), phi_in(n);

    const double amp = params.output_variance;
    const double noise = params.noise_variance;
    double mean = params.prior_mean;
    double var = amp;
    double prev_t = 0.0;
    bool first = true;
    for (std::size_t i = 0; i < n; ++i) {
        double phi = 1.0;
        if (!first) {
            phi = std::exp(-(nodes[i].time - prev_t) / params.lengthscale);
            mean = params.prior_mean + phi * (mean - params.prior_mean);
            var = phi * phi * var + amp * (1.0 - phi * phi);
        }
        first = false;
        prev_t = nodes[i].time;
        phi_in[i] = phi;
        pred_mean[i] = mean;
        pred_var[i] = var;
        if (nodes[i].obs >= 0) {
            const double s = var + noise;
            if (s > 0.0) {
                const double gain = var / s;
                mean += gain * (series.values[static_cast<std::size_t>(nodes[i].obs)] - mean);
                var = (1.0 - gain) * var;
            }
        }
        filt_mean[i] = mean;
        filt_var[i] = var;
    }

    forecast_grid out;
    out.id = series.id;
    out.times.assign(grid.begin(), grid.end());
    out.means.resize(grid.size());
    out.stds.resize(grid.size());

    if (m == mode::filtering) {
        for (std::size_t i = 0; i < n; ++i) {
            if (nodes[i].grid < 0) continue;
            out.means[static_cast<std::size_t>(nodes[i].grid)] = filt_mean[i];
            out.stds[static_cast<std::size_t>(nodes[i].grid)] = std::sqrt(filt_var[i] + noise);
        }
        return out;
    }

    // Rauch-Tung-Striebel backward pass for the smoothing posterior.
    std::vector<double> sm_mean(n), sm_var(n);
    sm_mean[n - 1] = filt_mean[n - 1];
    sm_var[n - 1] = filt_var[n - 1];
    for (std::size_t i = n - 1; i-- > 0;) {
        const double pv = pred_var[i + 1];
        const double gain = pv > 0.0 ? filt_var[i] * phi_in[i + 1] / pv : 0.0;
        sm_mean[i] = filt_mean[i] + gain * (sm_mean[i + 1] - pred_mean[i + 1]);
        sm_var[i] = filt_var[i] + (gain * gain) * (sm_var[i + 1] - pred_var[i + 1]);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (nodes[i].grid < 0) continue;
        out.means[static_cast<std::size_t>(nodes[i].grid)] = sm_mean[i];
        out.stds[static_cast<std::size_t>(nodes[i].grid)] = std::sqrt(sm_var[i] + noise);
    }
    return out;
}

forecast_grid impute_locf(const trait_series& series, std::span<const double> grid) {
    check_series(series);
    if (series.times.empty())
        throw argument_error("imputation requires at least one observation (" +
                             trait_name(series.id) + ")");
    forecast_grid out;
    out.id = series.id;
    out.times.assign(grid.begin(), grid.end());
    out.means.resize(grid.size());
    out.stds.assign(grid.size(), 0.0);
    std::size_t k = 0;  // index of last observation with time <= grid point
    for (std::size_t i = 0; i < grid.size(); ++i) {
        while (k + 1 < series.times.size() && series.times[k + 1] <= grid[i]) ++k;
        // Before the first observation, carry it backward.
        out.means[i] = series.times[0] > grid[i] ? series.values[0] : series.values[k];
    }
    return out;
}

void export_grid_csv(std::ostream& os, const std::string& admission_id, const forecast_grid& grid,
                     mode m, bool header) {
    if (header) os << "admission_id,trait_id,time,mean,std,mode\n";
    const char* mname = m == mode::filtering ? "filtering" : "smoothing";
    for (std::size_t i = 0; i < grid.times.size(); ++i) {
        os << admission_id << ',' << trait_name(grid.id) << ',' << format_double(grid.times[i])
           << ',' << format_double(grid.means[i]) << ',' << format_double(grid.stds[i]) << ','
           << mname << '\n';
    }
}

}  // namespace labrl::forecast
