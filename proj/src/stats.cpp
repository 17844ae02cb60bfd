#include "fuseclin/stats.hpp"

#include "fuseclin/error.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace fuseclin::stats {

double chi2_sf(double x, double df) {
    if (x <= 0.0) return 1.0;
    if (std::isinf(x)) return 0.0;
    return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<double>(df), x));
}

double f_sf(double x, double df1, double df2) {
    if (x <= 0.0) return 1.0;
    if (std::isinf(x)) return 0.0;
    return boost::math::cdf(boost::math::complement(boost::math::fisher_f_distribution<double>(df1, df2), x));
}

TestResult chi2_yates(double a, double b, double c, double d) {
    if (a < 0 || b < 0 || c < 0 || d < 0) throw PreconditionError("chi2_yates: negative count");
    const double r1 = a + b, r2 = c + d, c1 = a + c, c2 = b + d;
    if (r1 <= 0 || r2 <= 0 || c1 <= 0 || c2 <= 0)
        throw PreconditionError("chi2_yates: zero marginal, test undefined");
    const double n = r1 + r2;
    const double corrected = std::max(0.0, std::fabs(a * d - b * c) - n / 2.0);
    TestResult out;
    out.statistic = n * corrected * corrected / (r1 * r2 * c1 * c2);
    out.p_value = chi2_sf(out.statistic, 1.0);
    return out;
}

TestResult chi2_contingency(const std::vector<std::vector<double>>& table) {
    if (table.size() < 2 || table.front().size() < 2)
        throw PreconditionError("chi2_contingency: need at least a 2x2 table");
    const std::size_t rows = table.size(), cols = table.front().size();
    for (const auto& r : table)
        if (r.size() != cols) throw PreconditionError("chi2_contingency: ragged table");
    if (rows == 2 && cols == 2) return chi2_yates(table[0][0], table[0][1], table[1][0], table[1][1]);

    std::vector<double> row_sum(rows, 0.0), col_sum(cols, 0.0);
    double n = 0.0;
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            if (table[i][j] < 0) throw PreconditionError("chi2_contingency: negative count");
            row_sum[i] += table[i][j];
            col_sum[j] += table[i][j];
            n += table[i][j];
        }
    for (double s : row_sum)
        if (s <= 0) throw PreconditionError("chi2_contingency: zero marginal, test undefined");
    for (double s : col_sum)
        if (s <= 0) throw PreconditionError("chi2_contingency: zero marginal, test undefined");

    double stat = 0.0;
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            const double expected = row_sum[i] * col_sum[j] / n;
            const double diff = table[i][j] - expected;
            stat += diff * diff / expected;
        }
    const double df = static_cast<double>((rows - 1) * (cols - 1));
    return {stat, chi2_sf(stat, df)};
}

double mean(std::span<const double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw PreconditionError("percentile of empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

double sample_sd(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

AnovaResult anova_oneway(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw PreconditionError("anova_oneway: need at least two groups");
    std::size_t n = 0;
    double total = 0.0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].size() < 2)
            throw PreconditionError("anova_oneway: group " + std::to_string(g) + " has fewer than two values");
        n += groups[g].size();
        for (double x : groups[g]) total += x;
    }
    const double grand = total / static_cast<double>(n);
    double ssb = 0.0, ssw = 0.0;
    for (const auto& g : groups) {
        const double m = mean(g);
        ssb += static_cast<double>(g.size()) * (m - grand) * (m - grand);
        for (double x : g) ssw += (x - m) * (x - m);
    }
    const double df_between = static_cast<double>(groups.size() - 1);
    const double df_within = static_cast<double>(n - groups.size());

    AnovaResult out;
    if (ssw == 0.0) {
        if (ssb == 0.0) throw PreconditionError("anova_oneway: all groups constant and equal, F undefined");
        out.f = std::numeric_limits<double>::infinity();
        out.p_value = 0.0;
        out.infinite = true;
        return out;
    }
    out.f = (ssb / df_between) / (ssw / df_within);
    out.p_value = f_sf(out.f, df_between, df_within);
    return out;
}

}  // namespace fuseclin::stats
