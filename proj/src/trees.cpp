#include "fuseclin/error.hpp"
#include "fuseclin/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <queue>

namespace fuseclin::tabular {

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void validate_xy(const Matrix& x, std::span<const int> y) {
    if (x.rows != y.size()) throw PreconditionError("X and y differ in length");
    if (x.rows == 0 || x.cols == 0) throw PreconditionError("empty training set");
    for (double v : x.values)
        if (!std::isfinite(v)) throw DataError("feature matrix contains a non-finite value");
    std::size_t pos = 0;
    for (int v : y) {
        if (v != 0 && v != 1) throw DataError("labels must be 0 or 1");
        pos += static_cast<std::size_t>(v);
    }
    if (pos == 0 || pos == y.size()) throw PreconditionError("training labels contain a single class");
}

std::size_t feature_count(MaxFeatures m, std::size_t p) {
    switch (m) {
        case MaxFeatures::all: return p;
        case MaxFeatures::sqrt: return std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(p))));
        case MaxFeatures::log2: return std::max<std::size_t>(1, static_cast<std::size_t>(std::log2(static_cast<double>(p))));
    }
    return p;
}

/// Running sum of absolute deviations from the median, maintained with two heaps.
class RunningAbsDev {
public:
    void add(double v) {
        if (low_.empty() || v <= low_.top()) {
            low_.push(v);
            low_sum_ += v;
        } else {
            high_.push(v);
            high_sum_ += v;
        }
        if (low_.size() > high_.size() + 1) {
            const double t = low_.top();
            low_.pop();
            low_sum_ -= t;
            high_.push(t);
            high_sum_ += t;
        } else if (high_.size() > low_.size()) {
            const double t = high_.top();
            high_.pop();
            high_sum_ -= t;
            low_.push(t);
            low_sum_ += t;
        }
    }
    double value() const {
        if (low_.empty()) return 0.0;
        const double med = low_.top();
        return med * static_cast<double>(low_.size()) - low_sum_ + high_sum_ - med * static_cast<double>(high_.size());
    }

private:
    std::priority_queue<double> low_;
    std::priority_queue<double, std::vector<double>, std::greater<>> high_;
    double low_sum_ = 0.0, high_sum_ = 0.0;
};

struct TreeParams {
    int max_depth = 3;
    int min_samples_split = 2;
    int min_samples_leaf = 1;
    std::size_t max_features = 0;
    bool absolute = false;  // mae criterion
};

class TreeBuilder {
public:
    using LeafFn = std::function<double(std::span<const std::size_t>)>;

    TreeBuilder(const Matrix& x, std::span<const double> target, TreeParams params, LeafFn leaf, Rng& rng)
        : x_(x), g_(target), p_(params), leaf_(std::move(leaf)), rng_(rng) {
        features_.resize(x.cols);
        std::iota(features_.begin(), features_.end(), std::size_t{0});
    }

    Tree build(std::vector<std::size_t> rows) {
        grow(rows, 0);
        return std::move(tree_);
    }

private:
    struct Split {
        int feature = -1;
        double cut = 0.0;
        double gain = 0.0;
    };

    int add_node() {
        tree_.feature.push_back(-1);
        tree_.cut.push_back(0.0);
        tree_.left.push_back(-1);
        tree_.right.push_back(-1);
        tree_.value.push_back(0.0);
        return static_cast<int>(tree_.feature.size()) - 1;
    }

    int grow(std::vector<std::size_t>& rows, int depth) {
        const int node = add_node();
        const auto n = static_cast<int>(rows.size());
        Split best;
        if (depth < p_.max_depth && n >= p_.min_samples_split && n >= 2 * p_.min_samples_leaf) best = find_split(rows);
        if (best.feature < 0) {
            tree_.value[node] = leaf_(rows);
            return node;
        }
        std::vector<std::size_t> left, right;
        for (auto r : rows) (x_(r, static_cast<std::size_t>(best.feature)) <= best.cut ? left : right).push_back(r);
        rows.clear();
        rows.shrink_to_fit();
        tree_.feature[node] = best.feature;
        tree_.cut[node] = best.cut;
        const int l = grow(left, depth + 1);
        tree_.left[node] = l;
        const int r = grow(right, depth + 1);
        tree_.right[node] = r;
        return node;
    }

    Split find_split(const std::vector<std::size_t>& rows) {
        // partial Fisher-Yates for the candidate feature subset
        const std::size_t m = std::min(p_.max_features ? p_.max_features : x_.cols, x_.cols);
        if (m < x_.cols)
            for (std::size_t i = 0; i < m; ++i) std::swap(features_[i], features_[i + rng_.index(x_.cols - i)]);
        std::vector<std::size_t> candidates(features_.begin(), features_.begin() + static_cast<std::ptrdiff_t>(m));
        if (m < x_.cols) std::sort(candidates.begin(), candidates.end());

        const std::size_t n = rows.size();
        const auto min_leaf = static_cast<std::size_t>(p_.min_samples_leaf);
        std::vector<std::pair<double, double>> vals(n);  // (x, target)
        std::vector<double> left_dev, right_dev;
        double parent_dev = 0.0;
        if (!p_.absolute) {
            double s = 0.0;
            for (auto r : rows) s += g_[r];
            parent_dev = s * s / static_cast<double>(n);  // gain measured as sum^2/n terms
        }
        Split best;
        for (auto f : candidates) {
            for (std::size_t i = 0; i < n; ++i) vals[i] = {x_(rows[i], f), g_[rows[i]]};
            std::sort(vals.begin(), vals.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
            if (vals.front().first == vals.back().first) continue;
            if (p_.absolute) {
                left_dev.assign(n + 1, 0.0);
                right_dev.assign(n + 1, 0.0);
                RunningAbsDev lo, hi;
                for (std::size_t i = 0; i < n; ++i) {
                    lo.add(vals[i].second);
                    left_dev[i + 1] = lo.value();
                }
                for (std::size_t i = n; i-- > 0;) {
                    hi.add(vals[i].second);
                    right_dev[i] = hi.value();
                }
                parent_dev = left_dev[n];
            }
            double sl = 0.0, stotal = 0.0;
            if (!p_.absolute)
                for (const auto& v : vals) stotal += v.second;
            for (std::size_t i = 1; i < n; ++i) {
                sl += vals[i - 1].second;
                if (i < min_leaf || n - i < min_leaf) continue;
                if (vals[i - 1].first == vals[i].first) continue;
                double gain;
                if (p_.absolute) {
                    gain = parent_dev - left_dev[i] - right_dev[i];
                } else {
                    const double sr = stotal - sl;
                    gain = sl * sl / static_cast<double>(i) + sr * sr / static_cast<double>(n - i) - parent_dev;
                }
                if (gain > best.gain + 1e-12) {
                    best.gain = gain;
                    best.feature = static_cast<int>(f);
                    double cut = 0.5 * (vals[i - 1].first + vals[i].first);
                    if (!(cut < vals[i].first)) cut = vals[i - 1].first;
                    best.cut = cut;
                }
            }
        }
        return best;
    }

    const Matrix& x_;
    std::span<const double> g_;
    TreeParams p_;
    LeafFn leaf_;
    Rng& rng_;
    std::vector<std::size_t> features_;
    Tree tree_;
};

nlohmann::json node_arrays(const Tree& t) {
    return {{"feature", t.feature}, {"cut", t.cut}, {"left", t.left}, {"right", t.right}, {"value", t.value}};
}

}  // namespace

double Tree::predict(std::span<const double> x) const {
    int node = 0;
    while (feature[static_cast<std::size_t>(node)] >= 0) {
        const auto n = static_cast<std::size_t>(node);
        node = x[static_cast<std::size_t>(feature[n])] <= cut[n] ? left[n] : right[n];
    }
    return value[static_cast<std::size_t>(node)];
}

std::size_t Tree::depth() const {
    std::function<std::size_t(int)> d = [&](int node) -> std::size_t {
        const auto n = static_cast<std::size_t>(node);
        if (feature[n] < 0) return 0;
        return 1 + std::max(d(left[n]), d(right[n]));
    };
    return feature.empty() ? 0 : d(0);
}

nlohmann::json Tree::to_json() const { return node_arrays(*this); }

Tree Tree::from_json(const nlohmann::json& j) {
    Tree t;
    t.feature = j.at("feature").get<std::vector<int>>();
    t.cut = j.at("cut").get<std::vector<double>>();
    t.left = j.at("left").get<std::vector<int>>();
    t.right = j.at("right").get<std::vector<int>>();
    t.value = j.at("value").get<std::vector<double>>();
    const auto n = t.feature.size();
    if (n == 0 || t.cut.size() != n || t.left.size() != n || t.right.size() != n || t.value.size() != n)
        throw DataError("tree node arrays differ in length");
    for (std::size_t i = 0; i < n; ++i)
        if (t.feature[i] >= 0 && (t.left[i] <= static_cast<int>(i) || t.right[i] <= static_cast<int>(i) ||
                                  t.left[i] >= static_cast<int>(n) || t.right[i] >= static_cast<int>(n)))
            throw DataError("tree child index out of range");
    return t;
}

double GBModel::proba_from_decision(double f) const {
    return params.loss == GBLoss::exponential ? sigmoid(2.0 * f) : sigmoid(f);
}

double GBModel::decision(std::span<const double> x) const {
    double f = init;
    for (const auto& t : trees) f += params.learning_rate * t.predict(x);
    return f;
}

double GBModel::predict_proba(std::span<const double> x) const { return proba_from_decision(decision(x)); }

std::vector<double> GBModel::staged_decision(std::span<const double> x) const {
    std::vector<double> out = {init};
    double f = init;
    for (const auto& t : trees) {
        f += params.learning_rate * t.predict(x);
        out.push_back(f);
    }
    return out;
}

GBModel fit_gbtrees(const Matrix& x, std::span<const int> y, const GBParams& params, std::uint64_t seed) {
    validate_xy(x, y);
    if (params.n_estimators < 1) throw PreconditionError("n_estimators must be at least 1");
    if (!(params.learning_rate > 0.0)) throw PreconditionError("learning_rate must be positive");
    if (!(params.subsample > 0.0 && params.subsample <= 1.0)) throw PreconditionError("subsample must lie in (0, 1]");
    if (params.max_depth < 1 || params.min_samples_leaf < 1 || params.min_samples_split < 2)
        throw PreconditionError("invalid tree size constraints");

    const std::size_t n = x.rows;
    const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
    const bool exponential = params.loss == GBLoss::exponential;
    GBModel model;
    model.params = params;
    model.init = exponential ? 0.5 * std::log(pos / (static_cast<double>(n) - pos)) : std::log(pos / (static_cast<double>(n) - pos));

    std::vector<double> f(n, model.init), target(n), hess(n);
    TreeParams tp{params.max_depth, params.min_samples_split, params.min_samples_leaf,
                  feature_count(params.max_features, x.cols), params.criterion == Criterion::mae};
    Rng rng(seed);
    const auto sample_n = std::max<std::size_t>(2, static_cast<std::size_t>(std::floor(params.subsample * static_cast<double>(n))));
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});

    for (int stage = 0; stage < params.n_estimators; ++stage) {
        for (std::size_t i = 0; i < n; ++i) {
            if (exponential) {
                const double s = 2.0 * y[i] - 1.0;
                const double e = std::exp(-s * f[i]);
                target[i] = s * e;
                hess[i] = e;
            } else {
                const double p = sigmoid(f[i]);
                target[i] = y[i] - p;
                hess[i] = p * (1.0 - p);
            }
        }
        std::vector<std::size_t> rows;
        if (sample_n < n) {
            std::vector<std::size_t> perm = all;
            for (std::size_t i = 0; i < sample_n; ++i) std::swap(perm[i], perm[i + rng.index(n - i)]);
            rows.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(sample_n));
            std::sort(rows.begin(), rows.end());
        } else {
            rows = all;
        }
        auto leaf = [&](std::span<const std::size_t> idx) {
            double num = 0.0, den = 0.0;
            for (auto i : idx) {
                num += target[i];
                den += hess[i];
            }
            return den > 1e-150 ? num / den : 0.0;
        };
        TreeBuilder builder(x, target, tp, leaf, rng);
        Tree tree = builder.build(std::move(rows));
        for (std::size_t i = 0; i < n; ++i) f[i] += params.learning_rate * tree.predict(x.row(i));
        model.trees.push_back(std::move(tree));
    }
    return model;
}

double RFModel::predict_proba(std::span<const double> x) const {
    double s = 0.0;
    for (const auto& t : trees) s += t.predict(x);
    return s / static_cast<double>(trees.size());
}

RFModel fit_random_forest(const Matrix& x, std::span<const int> y, const RFParams& params, std::uint64_t seed) {
    validate_xy(x, y);
    if (params.n_estimators < 1) throw PreconditionError("n_estimators must be at least 1");
    if (params.max_depth < 1 || params.min_samples_leaf < 1 || params.min_samples_split < 2)
        throw PreconditionError("invalid tree size constraints");
    const std::size_t n = x.rows;
    std::vector<double> target(y.begin(), y.end());
    TreeParams tp{params.max_depth, params.min_samples_split, params.min_samples_leaf,
                  feature_count(params.max_features, x.cols), false};
    auto leaf = [&](std::span<const std::size_t> idx) {
        double s = 0.0;
        for (auto i : idx) s += target[i];
        return s / static_cast<double>(idx.size());
    };
    RFModel model;
    model.params = params;
    Rng rng(seed);
    for (int t = 0; t < params.n_estimators; ++t) {
        std::vector<std::size_t> rows(n);
        if (params.bootstrap) {
            for (auto& r : rows) r = rng.index(n);
            std::sort(rows.begin(), rows.end());
        } else {
            std::iota(rows.begin(), rows.end(), std::size_t{0});
        }
        TreeBuilder builder(x, target, tp, leaf, rng);
        model.trees.push_back(builder.build(std::move(rows)));
    }
    return model;
}

}  // namespace fuseclin::tabular
