#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "labrl/common.hpp"

namespace labrl::trees {

struct tree_params {
    int n_trees = 50;
    int k_features = 0;        // 0 -> ceil(sqrt(input_dim))
    int min_samples_leaf = 20;
    int max_depth = 0;         // 0 -> unlimited
    uint64_t seed = 0;
};

// Row-major view over a dense matrix owned by the caller.
struct matrix_view {
    const double* data = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;
    const double* row(std::size_t i) const { return data + i * cols; }
};

/// Extremely randomized trees for vector-valued regression and
/// classification. Splits draw k candidate features uniformly among the
/// non-constant features of a node and one uniform cut per feature; the
/// candidate with the lowest child impurity wins. Trees see the full sample
/// (no bootstrap) and leaves keep at least min_samples_leaf rows.
class ensemble {
  public:
    struct node {
        int32_t feature = -1;   // -1 marks a leaf
        double threshold = 0.0;
        int32_t left = -1;
        int32_t right = -1;
        int32_t payload = -1;   // leaf payload row
    };

    struct tree {
        std::vector<node> nodes;
        std::vector<double> payloads;  // n_leaves x output_dim, row-major
    };

    static ensemble fit_regressor(matrix_view x, matrix_view y, const tree_params& params);
    // Labels must lie in [0, n_classes); n_classes = 0 infers max label + 1.
    static ensemble fit_classifier(matrix_view x, std::span<const int> labels, int n_classes,
                                   const tree_params& params);

    // Assembles an ensemble from explicit trees (tests, hand-built models).
    static ensemble from_parts(int input_dim, int output_dim, bool classifier,
                               std::vector<tree> trees, tree_params params = {});

    // Regression: mean of per-tree leaf means. Classification: mean of
    // per-tree leaf class frequencies (unsmoothed).
    void predict(std::span<const double> x, std::span<double> out) const;
    vec4 predict4(std::span<const double> x) const;

    // Classifier probabilities with a floor: p' = (1 - K*p_min) * p + p_min.
    void predict_proba(std::span<const double> x, std::span<double> out, double p_min) const;
    int predict_class(std::span<const double> x) const;  // argmax raw, lowest label on ties

    // Total impurity decrease per feature, normalized to sum to one (all
    // zeros when no tree ever split).
    std::vector<double> feature_importances() const;

    void save(std::ostream& os) const;
    static ensemble load(std::istream& is);
    std::string importances_json() const;

    bool is_classifier() const { return classifier_; }
    int input_dim() const { return input_dim_; }
    int output_dim() const { return output_dim_; }
    const std::vector<tree>& trees() const { return trees_; }
    const tree_params& params() const { return params_; }

  private:
    static ensemble fit_impl(matrix_view x, matrix_view y, std::span<const int> labels,
                             int n_classes, const tree_params& params);

    tree_params params_;
    int input_dim_ = 0;
    int output_dim_ = 0;   // target dim or class count
    bool classifier_ = false;
    std::vector<tree> trees_;
    std::vector<double> importance_raw_;

    friend struct fit_context;
};

}  // namespace labrl::trees
