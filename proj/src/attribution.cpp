#include "fuseclin/attribution.hpp"

#include "fuseclin/error.hpp"
#include "fuseclin/io.hpp"
#include "fuseclin/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

namespace fuseclin::attribution {

namespace {

void check_row(std::span<const double> x, const ShapConfig& cfg) {
    cfg.validate();
    if (x.size() != cfg.background.cols) throw PreconditionError("row width differs from the background width");
    if (x.empty()) throw PreconditionError("cannot attribute a row without features");
}

double mean_output(const ModelFn& f, const Matrix& background) {
    double s = 0.0;
    for (std::size_t b = 0; b < background.rows; ++b) s += f(background.row(b));
    return s / static_cast<double>(background.rows);
}

}  // namespace

void ShapConfig::validate() const {
    if (background.rows == 0) throw PreconditionError("SHAP background is empty");
    if (exact_limit > 20) throw PreconditionError("exact_limit must not exceed 20");
}

ShapValues exact_shap(const ModelFn& f, std::span<const double> x, const ShapConfig& cfg) {
    check_row(x, cfg);
    const std::size_t k = x.size();
    if (k > cfg.exact_limit)
        throw PreconditionError("exact SHAP supports at most " + std::to_string(cfg.exact_limit) + " features, got " +
                                std::to_string(k));
    const std::size_t subsets = std::size_t{1} << k;
    const auto& bg = cfg.background;
    std::vector<double> value(subsets, 0.0);
    std::vector<double> z(k);
    for (std::size_t mask = 0; mask < subsets; ++mask) {
        double s = 0.0;
        for (std::size_t b = 0; b < bg.rows; ++b) {
            auto brow = bg.row(b);
            for (std::size_t j = 0; j < k; ++j) z[j] = (mask >> j) & 1U ? x[j] : brow[j];
            s += f(z);
        }
        value[mask] = s / static_cast<double>(bg.rows);
    }
    // weight(|S|) = |S|! (k - |S| - 1)! / k!
    std::vector<double> weight(k);
    for (std::size_t s = 0; s < k; ++s) {
        double w = 1.0 / static_cast<double>(k);
        // 1 / (k * C(k-1, s))
        double c = 1.0;
        for (std::size_t i = 1; i <= s; ++i) c = c * static_cast<double>(k - 1 - s + i) / static_cast<double>(i);
        weight[s] = w / c;
    }
    ShapValues out;
    out.values.assign(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t bit = std::size_t{1} << i;
        double acc = 0.0;
        for (std::size_t mask = 0; mask < subsets; ++mask) {
            if (mask & bit) continue;
            acc += weight[static_cast<std::size_t>(std::popcount(mask))] * (value[mask | bit] - value[mask]);
        }
        out.values[i] = acc;
    }
    out.base_value = value[0];
    out.output = f(x);
    return out;
}

ShapValues sampled_shap(const ModelFn& f, std::span<const double> x, const ShapConfig& cfg) {
    check_row(x, cfg);
    if (cfg.n_permutations < 100) throw PreconditionError("sampled SHAP needs at least 100 permutations");
    const std::size_t k = x.size();
    const auto& bg = cfg.background;
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(k);
    std::vector<double> z(k);
    ShapValues out;
    out.values.assign(k, 0.0);
    for (int p = 0; p < cfg.n_permutations; ++p) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        auto brow = bg.row(static_cast<std::size_t>(p) % bg.rows);
        std::copy(brow.begin(), brow.end(), z.begin());
        double prev = f(z);
        for (auto j : order) {
            z[j] = x[j];
            const double cur = f(z);
            out.values[j] += cur - prev;
            prev = cur;
        }
    }
    for (double& v : out.values) v /= static_cast<double>(cfg.n_permutations);
    out.base_value = mean_output(f, bg);
    out.output = f(x);
    return out;
}

ShapMatrix explain_rows(const ModelFn& f, const Matrix& x, const std::vector<std::string>& ids,
                        const std::vector<std::string>& columns, const ShapConfig& cfg) {
    cfg.validate();
    if (ids.size() != x.rows || columns.size() != x.cols) throw PreconditionError("explain: ids/columns do not match X");
    ShapMatrix m;
    m.columns = columns;
    m.ids = ids;
    m.values = Matrix(x.rows, x.cols);
    m.exact = x.cols <= cfg.exact_limit;
    m.base_value = mean_output(f, cfg.background);
    for (std::size_t r = 0; r < x.rows; ++r) {
        ShapConfig row_cfg = cfg;
        row_cfg.seed = Rng(cfg.seed).derive(ids[r]).key();
        const auto v = m.exact ? exact_shap(f, x.row(r), row_cfg) : sampled_shap(f, x.row(r), row_cfg);
        std::copy(v.values.begin(), v.values.end(), m.values.row(r).begin());
        m.outputs.push_back(v.output);
    }
    return m;
}

std::string ShapMatrix::to_csv() const {
    std::vector<std::string> header = {"id"};
    header.insert(header.end(), columns.begin(), columns.end());
    std::string out = io::csv_line(header);
    for (std::size_t r = 0; r < values.rows; ++r) {
        std::vector<std::string> fields = {ids[r]};
        for (double v : values.row(r)) fields.push_back(io::format_double(v));
        out += io::csv_line(fields);
    }
    return out;
}

nlohmann::json ShapMatrix::summary_json() const {
    nlohmann::json ranking = nlohmann::json::array();
    for (const auto& f : rank_features(*this)) ranking.push_back({{"feature", f.name}, {"mean_abs_shap", f.mean_abs}});
    return {{"rows", values.rows},
            {"features", values.cols},
            {"mode", exact ? "exact" : "sampled"},
            {"base_value", base_value},
            {"output", "probability"},
            {"ranking", ranking}};
}

std::vector<RankedFeature> rank_features(const ShapMatrix& shap) {
    if (shap.values.rows == 0 || shap.values.cols == 0) throw PreconditionError("empty SHAP matrix");
    std::vector<RankedFeature> out;
    for (std::size_t c = 0; c < shap.values.cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < shap.values.rows; ++r) s += std::abs(shap.values(r, c));
        out.push_back({c < shap.columns.size() ? shap.columns[c] : "x" + std::to_string(c),
                       s / static_cast<double>(shap.values.rows)});
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.mean_abs > b.mean_abs; });
    return out;
}

Matrix sample_background(const Matrix& x, std::size_t n, std::uint64_t seed) {
    if (x.rows == 0) throw PreconditionError("cannot sample a background from an empty matrix");
    if (n >= x.rows) return x;
    std::vector<std::size_t> idx(x.rows);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.index(x.rows - i)]);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    return x.select_rows(idx);
}

}  // namespace fuseclin::attribution
