#include "labrl/trees.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "labrl/binio.hpp"

namespace labrl::trees {

namespace {

// Rows are re-ordered into a canonical sequence (lexicographic by features,
// then targets) before any accumulation, so fitting is invariant to the
// caller's row permutation down to the last bit.
std::vector<uint32_t> canonical_order(matrix_view x, matrix_view y, std::span<const int> labels) {
    std::vector<uint32_t> idx(x.rows);
    std::iota(idx.begin(), idx.end(), 0u);
    std::sort(idx.begin(), idx.end(), [&](uint32_t a, uint32_t b) {
        const double* ra = x.row(a);
        const double* rb = x.row(b);
        for (std::size_t j = 0; j < x.cols; ++j) {
            if (ra[j] != rb[j]) return ra[j] < rb[j];
        }
        if (y.data != nullptr) {
            const double* ta = y.row(a);
            const double* tb = y.row(b);
            for (std::size_t j = 0; j < y.cols; ++j) {
                if (ta[j] != tb[j]) return ta[j] < tb[j];
            }
        } else if (!labels.empty()) {
            return labels[a] < labels[b];
        }
        return false;
    });
    return idx;
}

struct candidate {
    int feature = -1;
    double cut = 0.0;
    double score = std::numeric_limits<double>::infinity();
};

}  // namespace

struct fit_context {
    matrix_view x;
    matrix_view y;              // regression targets (empty for classifiers)
    std::span<const int> labels;
    int n_classes = 0;
    const tree_params* params = nullptr;
    int k_features = 0;

    bool classification() const { return y.data == nullptr; }
    int output_dim() const { return classification() ? n_classes : static_cast<int>(y.cols); }

    // Scratch, reused across nodes of one tree.
    std::vector<uint32_t> idx;
    std::vector<uint32_t> scratch;
    std::vector<double> fmin, fmax;
    std::vector<int> feat_pool;
    std::vector<double> left_stats;   // regression: sum/sumsq per output
    std::vector<double> node_stats;
    std::vector<double> left_counts;  // classification
    std::vector<double> node_counts;
    std::vector<double> importance;

    ensemble::tree build_tree(rng& gen);

  private:
    struct frame {
        int node = 0;
        uint32_t begin = 0, end = 0;
        int depth = 0;
    };

    void leaf_from_range(ensemble::tree& t, int node, uint32_t begin, uint32_t end);
    bool node_is_pure(uint32_t begin, uint32_t end) const;
    double node_impurity(uint32_t begin, uint32_t end) const;
    double eval_candidate(uint32_t begin, uint32_t end, int feature, double cut,
                          uint32_t& left_count) const;
};

bool fit_context::node_is_pure(uint32_t begin, uint32_t end) const {
    if (classification()) {
        const int first = labels[idx[begin]];
        for (uint32_t i = begin + 1; i < end; ++i)
            if (labels[idx[i]] != first) return false;
        return true;
    }
    const double* first = y.row(idx[begin]);
    for (uint32_t i = begin + 1; i < end; ++i) {
        const double* row = y.row(idx[i]);
        for (std::size_t j = 0; j < y.cols; ++j)
            if (row[j] != first[j]) return false;
    }
    return true;
}

double fit_context::node_impurity(uint32_t begin, uint32_t end) const {
    const double n = static_cast<double>(end - begin);
    if (classification()) {
        auto& counts = const_cast<std::vector<double>&>(node_counts);
        std::fill(counts.begin(), counts.end(), 0.0);
        for (uint32_t i = begin; i < end; ++i) counts[static_cast<std::size_t>(labels[idx[i]])] += 1.0;
        double sq = 0.0;
        for (double c : counts) sq += c * c;
        return n - sq / n;  // n * gini
    }
    auto& stats = const_cast<std::vector<double>&>(node_stats);
    std::fill(stats.begin(), stats.end(), 0.0);
    for (uint32_t i = begin; i < end; ++i) {
        const double* row = y.row(idx[i]);
        for (std::size_t j = 0; j < y.cols; ++j) {
            stats[2 * j] += row[j];
            stats[2 * j + 1] += row[j] * row[j];
        }
    }
    double ss = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j)
        ss += std::max(0.0, stats[2 * j + 1] - stats[2 * j] * stats[2 * j] / n);
    return ss;
}

double fit_context::eval_candidate(uint32_t begin, uint32_t end, int feature, double cut,
                                   uint32_t& left_count) const {
    const std::size_t f = static_cast<std::size_t>(feature);
    if (classification()) {
        auto& lc = const_cast<std::vector<double>&>(left_counts);
        auto& nc = const_cast<std::vector<double>&>(node_counts);
        std::fill(lc.begin(), lc.end(), 0.0);
        std::fill(nc.begin(), nc.end(), 0.0);
        uint32_t nl = 0;
        for (uint32_t i = begin; i < end; ++i) {
            const uint32_t r = idx[i];
            const std::size_t c = static_cast<std::size_t>(labels[r]);
            nc[c] += 1.0;
            if (x.row(r)[f] < cut) {
                lc[c] += 1.0;
                ++nl;
            }
        }
        left_count = nl;
        const double n = static_cast<double>(end - begin);
        const double nld = static_cast<double>(nl);
        const double nrd = n - nld;
        if (nld == 0.0 || nrd == 0.0) return std::numeric_limits<double>::infinity();
        double sql = 0.0, sqr = 0.0;
        for (std::size_t c = 0; c < nc.size(); ++c) {
            sql += lc[c] * lc[c];
            const double rc = nc[c] - lc[c];
            sqr += rc * rc;
        }
        return (nld - sql / nld) + (nrd - sqr / nrd);
    }

    auto& ls = const_cast<std::vector<double>&>(left_stats);
    auto& ns = const_cast<std::vector<double>&>(node_stats);
    std::fill(ls.begin(), ls.end(), 0.0);
    std::fill(ns.begin(), ns.end(), 0.0);
    uint32_t nl = 0;
    for (uint32_t i = begin; i < end; ++i) {
        const uint32_t r = idx[i];
        const double* row = y.row(r);
        const bool goes_left = x.row(r)[f] < cut;
        if (goes_left) ++nl;
        for (std::size_t j = 0; j < y.cols; ++j) {
            const double v = row[j];
            ns[2 * j] += v;
            ns[2 * j + 1] += v * v;
            if (goes_left) {
                ls[2 * j] += v;
                ls[2 * j + 1] += v * v;
            }
        }
    }
    left_count = nl;
    const double n = static_cast<double>(end - begin);
    const double nld = static_cast<double>(nl);
    const double nrd = n - nld;
    if (nld == 0.0 || nrd == 0.0) return std::numeric_limits<double>::infinity();
    double ss = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j) {
        const double sl = ls[2 * j], ql = ls[2 * j + 1];
        const double sr = ns[2 * j] - sl, qr = ns[2 * j + 1] - ql;
        ss += std::max(0.0, ql - sl * sl / nld);
        ss += std::max(0.0, qr - sr * sr / nrd);
    }
    return ss;
}

void fit_context::leaf_from_range(ensemble::tree& t, int node, uint32_t begin, uint32_t end) {
    const int q = output_dim();
    const int payload_row = static_cast<int>(t.payloads.size()) / q;
    t.payloads.resize(t.payloads.size() + static_cast<std::size_t>(q), 0.0);
    double* payload = t.payloads.data() + static_cast<std::size_t>(payload_row) * q;
    const double n = static_cast<double>(end - begin);
    if (classification()) {
        for (uint32_t i = begin; i < end; ++i) payload[labels[idx[i]]] += 1.0;
        for (int j = 0; j < q; ++j) payload[j] /= n;
    } else {
        for (uint32_t i = begin; i < end; ++i) {
            const double* row = y.row(idx[i]);
            for (int j = 0; j < q; ++j) payload[j] += row[j];
        }
        for (int j = 0; j < q; ++j) payload[j] /= n;
    }
    t.nodes[static_cast<std::size_t>(node)].feature = -1;
    t.nodes[static_cast<std::size_t>(node)].payload = payload_row;
}

ensemble::tree fit_context::build_tree(rng& gen) {
    ensemble::tree t;
    t.nodes.emplace_back();
    const int msl = params->min_samples_leaf;
    const std::size_t d = x.cols;

    std::vector<frame> stack;
    stack.push_back({0, 0, static_cast<uint32_t>(x.rows), 0});

    while (!stack.empty()) {
        const frame fr = stack.back();
        stack.pop_back();
        const uint32_t n = fr.end - fr.begin;

        const bool depth_capped = params->max_depth > 0 && fr.depth >= params->max_depth;
        if (n < 2 * static_cast<uint32_t>(msl) || depth_capped || node_is_pure(fr.begin, fr.end)) {
            leaf_from_range(t, fr.node, fr.begin, fr.end);
            continue;
        }

        // Candidate features: the non-constant ones within this node.
        for (std::size_t j = 0; j < d; ++j) {
            fmin[j] = std::numeric_limits<double>::infinity();
            fmax[j] = -std::numeric_limits<double>::infinity();
        }
        for (uint32_t i = fr.begin; i < fr.end; ++i) {
            const double* row = x.row(idx[i]);
            for (std::size_t j = 0; j < d; ++j) {
                fmin[j] = std::min(fmin[j], row[j]);
                fmax[j] = std::max(fmax[j], row[j]);
            }
        }
        feat_pool.clear();
        for (std::size_t j = 0; j < d; ++j)
            if (fmax[j] > fmin[j]) feat_pool.push_back(static_cast<int>(j));
        if (feat_pool.empty()) {
            leaf_from_range(t, fr.node, fr.begin, fr.end);
            continue;
        }

        const int k = std::min<int>(k_features, static_cast<int>(feat_pool.size()));
        for (int i = 0; i < k; ++i) {
            const std::size_t j =
                static_cast<std::size_t>(i) + gen.uniform_int(feat_pool.size() - static_cast<std::size_t>(i));
            std::swap(feat_pool[static_cast<std::size_t>(i)], feat_pool[j]);
        }

        candidate best;
        uint32_t best_left = 0;
        for (int i = 0; i < k; ++i) {
            const int f = feat_pool[static_cast<std::size_t>(i)];
            const double cut =
                fmin[static_cast<std::size_t>(f)] +
                gen.uniform() * (fmax[static_cast<std::size_t>(f)] - fmin[static_cast<std::size_t>(f)]);
            uint32_t nl = 0;
            const double score = eval_candidate(fr.begin, fr.end, f, cut, nl);
            if (nl < static_cast<uint32_t>(msl) || (n - nl) < static_cast<uint32_t>(msl)) continue;
            if (score < best.score) {
                best = {f, cut, score};
                best_left = nl;
            }
        }
        if (best.feature < 0) {
            leaf_from_range(t, fr.node, fr.begin, fr.end);
            continue;
        }

        importance[static_cast<std::size_t>(best.feature)] +=
            std::max(0.0, node_impurity(fr.begin, fr.end) - best.score);

        // Stable partition keeps the canonical order inside both children.
        scratch.clear();
        uint32_t w = fr.begin;
        for (uint32_t i = fr.begin; i < fr.end; ++i) {
            const uint32_t r = idx[i];
            if (x.row(r)[static_cast<std::size_t>(best.feature)] < best.cut)
                idx[w++] = r;
            else
                scratch.push_back(r);
        }
        std::copy(scratch.begin(), scratch.end(), idx.begin() + w);

        const int left_node = static_cast<int>(t.nodes.size());
        t.nodes.emplace_back();
        t.nodes.emplace_back();
        auto& nd = t.nodes[static_cast<std::size_t>(fr.node)];
        nd.feature = best.feature;
        nd.threshold = best.cut;
        nd.left = left_node;
        nd.right = left_node + 1;

        stack.push_back({left_node + 1, fr.begin + best_left, fr.end, fr.depth + 1});
        stack.push_back({left_node, fr.begin, fr.begin + best_left, fr.depth + 1});
    }
    return t;
}

ensemble ensemble::fit_impl(matrix_view x, matrix_view y, std::span<const int> labels, int n_classes,
                            const tree_params& params) {
    if (x.rows == 0) throw fit_error("cannot fit a tree ensemble on an empty dataset");
    if (params.n_trees < 1) throw fit_error("n_trees must be at least 1");
    if (params.min_samples_leaf < 1) throw fit_error("min_samples_leaf must be at least 1");
    const bool classification = y.data == nullptr;
    if (!classification && y.rows != x.rows)
        throw fit_error("row count mismatch between features and targets");
    if (classification && labels.size() != x.rows)
        throw fit_error("row count mismatch between features and labels");

    ensemble out;
    out.params_ = params;
    out.input_dim_ = static_cast<int>(x.cols);
    out.classifier_ = classification;
    if (classification) {
        int max_label = 0;
        for (int l : labels) {
            if (l < 0) throw fit_error("class labels must be nonnegative");
            max_label = std::max(max_label, l);
        }
        if (n_classes == 0) n_classes = max_label + 1;
        if (max_label >= n_classes) throw fit_error("label exceeds declared class count");
        out.output_dim_ = n_classes;
    } else {
        out.output_dim_ = static_cast<int>(y.cols);
    }

    const int k_default = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(x.cols))));
    const int k = params.k_features > 0 ? std::min<int>(params.k_features, static_cast<int>(x.cols))
                                        : k_default;

    const auto order = canonical_order(x, y, labels);

    out.trees_.resize(static_cast<std::size_t>(params.n_trees));
    std::vector<std::vector<double>> importances(static_cast<std::size_t>(params.n_trees));

    parallel_for(static_cast<std::size_t>(params.n_trees), [&](std::size_t ti) {
        fit_context ctx;
        ctx.x = x;
        ctx.y = y;
        ctx.labels = labels;
        ctx.n_classes = n_classes;
        ctx.params = &params;
        ctx.k_features = k;
        ctx.idx = order;
        ctx.scratch.reserve(x.rows);
        ctx.fmin.resize(x.cols);
        ctx.fmax.resize(x.cols);
        const std::size_t q = static_cast<std::size_t>(ctx.output_dim());
        ctx.left_stats.resize(2 * q);
        ctx.node_stats.resize(2 * q);
        ctx.left_counts.resize(q);
        ctx.node_counts.resize(q);
        ctx.importance.assign(x.cols, 0.0);
        rng gen(derive_seed(params.seed, ti));
        out.trees_[ti] = ctx.build_tree(gen);
        importances[ti] = std::move(ctx.importance);
    });

    out.importance_raw_.assign(x.cols, 0.0);
    for (const auto& imp : importances)
        for (std::size_t j = 0; j < imp.size(); ++j) out.importance_raw_[j] += imp[j];
    return out;
}

ensemble ensemble::fit_regressor(matrix_view x, matrix_view y, const tree_params& params) {
    if (y.data == nullptr || y.cols == 0) throw fit_error("regression targets are empty");
    return fit_impl(x, y, {}, 0, params);
}

ensemble ensemble::fit_classifier(matrix_view x, std::span<const int> labels, int n_classes,
                                  const tree_params& params) {
    if (labels.empty()) throw fit_error("classification labels are empty");
    return fit_impl(x, {}, labels, n_classes, params);
}

ensemble ensemble::from_parts(int input_dim, int output_dim, bool classifier,
                              std::vector<tree> trees, tree_params params) {
    ensemble out;
    out.params_ = params;
    out.params_.n_trees = static_cast<int>(trees.size());
    out.input_dim_ = input_dim;
    out.output_dim_ = output_dim;
    out.classifier_ = classifier;
    out.trees_ = std::move(trees);
    out.importance_raw_.assign(static_cast<std::size_t>(input_dim), 0.0);
    return out;
}

void ensemble::predict(std::span<const double> x, std::span<double> out) const {
    if (static_cast<int>(x.size()) != input_dim_)
        throw argument_error("prediction input has wrong dimension: got " +
                             std::to_string(x.size()) + ", expected " + std::to_string(input_dim_));
    if (static_cast<int>(out.size()) != output_dim_)
        throw argument_error("prediction output span has wrong dimension");
    std::fill(out.begin(), out.end(), 0.0);
    for (const auto& t : trees_) {
        int n = 0;
        while (t.nodes[static_cast<std::size_t>(n)].feature >= 0) {
            const auto& nd = t.nodes[static_cast<std::size_t>(n)];
            n = x[static_cast<std::size_t>(nd.feature)] < nd.threshold ? nd.left : nd.right;
        }
        const double* payload = t.payloads.data() +
                                static_cast<std::size_t>(t.nodes[static_cast<std::size_t>(n)].payload) *
                                    static_cast<std::size_t>(output_dim_);
        for (int j = 0; j < output_dim_; ++j) out[static_cast<std::size_t>(j)] += payload[j];
    }
    const double inv = 1.0 / static_cast<double>(trees_.size());
    for (auto& v : out) v *= inv;
}

vec4 ensemble::predict4(std::span<const double> x) const {
    vec4 out;
    predict(x, std::span<double>(out.data(), 4));
    return out;
}

void ensemble::predict_proba(std::span<const double> x, std::span<double> out, double p_min) const {
    if (!classifier_) throw argument_error("predict_proba requires a classifier");
    predict(x, out);
    const double scale = 1.0 - static_cast<double>(output_dim_) * p_min;
    for (auto& v : out) v = scale * v + p_min;
}

int ensemble::predict_class(std::span<const double> x) const {
    std::vector<double> probs(static_cast<std::size_t>(output_dim_));
    predict(x, probs);
    int best = 0;
    for (int j = 1; j < output_dim_; ++j)
        if (probs[static_cast<std::size_t>(j)] > probs[static_cast<std::size_t>(best)]) best = j;
    return best;
}

std::vector<double> ensemble::feature_importances() const {
    std::vector<double> out = importance_raw_;
    double total = 0.0;
    for (double v : out) total += v;
    if (total > 0.0)
        for (auto& v : out) v /= total;
    return out;
}

void ensemble::save(std::ostream& os) const {
    os.write("ETRS", 4);
    binio::write_u32(os, 1);
    binio::write_u8(os, classifier_ ? 1 : 0);
    binio::write_i32(os, params_.n_trees);
    binio::write_i32(os, params_.k_features);
    binio::write_i32(os, params_.min_samples_leaf);
    binio::write_i32(os, params_.max_depth);
    binio::write_u64(os, params_.seed);
    binio::write_i32(os, input_dim_);
    binio::write_i32(os, output_dim_);
    binio::write_u64(os, trees_.size());
    for (const auto& t : trees_) {
        binio::write_u64(os, t.nodes.size());
        for (const auto& nd : t.nodes) {
            binio::write_i32(os, nd.feature);
            binio::write_f64(os, nd.threshold);
            binio::write_i32(os, nd.left);
            binio::write_i32(os, nd.right);
            binio::write_i32(os, nd.payload);
        }
        binio::write_u64(os, t.payloads.size());
        for (double v : t.payloads) binio::write_f64(os, v);
    }
    binio::write_u64(os, importance_raw_.size());
    for (double v : importance_raw_) binio::write_f64(os, v);
}

ensemble ensemble::load(std::istream& is) {
    binio::expect_magic(is, "ETRS", "tree ensemble");
    const uint32_t version = binio::read_u32(is);
    if (version != 1) throw io_error("unsupported tree ensemble version " + std::to_string(version));
    ensemble out;
    out.classifier_ = binio::read_u8(is) != 0;
    out.params_.n_trees = binio::read_i32(is);
    out.params_.k_features = binio::read_i32(is);
    out.params_.min_samples_leaf = binio::read_i32(is);
    out.params_.max_depth = binio::read_i32(is);
    out.params_.seed = binio::read_u64(is);
    out.input_dim_ = binio::read_i32(is);
    out.output_dim_ = binio::read_i32(is);
    out.trees_.resize(binio::read_u64(is));
    for (auto& t : out.trees_) {
        t.nodes.resize(binio::read_u64(is));
        for (auto& nd : t.nodes) {
            nd.feature = binio::read_i32(is);
            nd.threshold = binio::read_f64(is);
            nd.left = binio::read_i32(is);
            nd.right = binio::read_i32(is);
            nd.payload = binio::read_i32(is);
        }
        t.payloads.resize(binio::read_u64(is));
        for (auto& v : t.payloads) v = binio::read_f64(is);
    }
    out.importance_raw_.resize(binio::read_u64(is));
    for (auto& v : out.importance_raw_) v = binio::read_f64(is);
    return out;
}

std::string ensemble::importances_json() const {
    const auto imp = feature_importances();
    std::ostringstream os;
    os << "[";
    for (std::size_t j = 0; j < imp.size(); ++j) {
        if (j) os << ",";
        os << format_double(imp[j]);
    }
    os << "]";
    return os.str();
}

}  // namespace labrl::trees
