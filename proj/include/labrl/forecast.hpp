#pragma once

#include <span>
#include <vector>

#include "labrl/common.hpp"

namespace labrl::forecast {

/// Irregular observations of one trait within one admission.
struct trait_series {
    trait id = trait::hr;
    std::vector<double> times;   // strictly increasing, hours from admission
    std::vector<double> values;
};

/// Hourly (or arbitrary-grid) predictive means and standard deviations.
struct forecast_grid {
    trait id = trait::hr;
    std::vector<double> times;
    std::vector<double> means;
    std::vector<double> stds;
};

/// Exponential (Ornstein-Uhlenbeck) kernel:
///   k(t, t') = output_variance * exp(-|t - t'| / lengthscale)
/// plus i.i.d. observation noise. The reported predictive variance includes
/// the noise term, so a noiseless exact hit reports std 0 and the prior
/// fallback reports sqrt(output_variance + noise_variance).
struct kernel_params {
    double output_variance = 1.0;
    double lengthscale = 8.0;
    double noise_variance = 0.01;
    double prior_mean = 0.0;
};

enum class mode { filtering, smoothing };

struct fit_options {
    std::vector<double> lengthscales;     // hours; default 1..64 in half-octave steps
    std::vector<double> amplitude_fracs;  // fraction of pooled variance, ascending
    std::vector<double> noise_fracs;      // fraction of pooled variance
    std::size_t max_observations = 20000; // fitting subsample cap, leading series first
    static fit_options defaults();
};

/// Maximum-marginal-likelihood grid search shared by all admissions of a
/// trait. prior_mean is the pooled mean of the observations.
kernel_params fit_kernel(std::span<const trait_series> series, const fit_options& opts = fit_options::defaults());

/// Exact GP posterior under the OU kernel. Filtering conditions each grid
/// time t on observations with timestamp <= t; smoothing conditions on all
/// observations. Grid times must be strictly increasing.
forecast_grid predict(const trait_series& series, const kernel_params& params,
                      std::span<const double> grid, mode m);

/// Last observation carried forward (first observation carried backward
/// before the start). std is identically 0.
forecast_grid impute_locf(const trait_series& series, std::span<const double> grid);

/// Exact log marginal likelihood of one series under the kernel.
double log_marginal_likelihood(const trait_series& series, const kernel_params& params);

void export_grid_csv(std::ostream& os, const std::string& admission_id, const forecast_grid& grid,
                     mode m, bool header);

}  // namespace labrl::forecast
