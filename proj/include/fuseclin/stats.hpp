#pragma once

#include <span>
#include <vector>

namespace fuseclin::stats {

struct TestResult {
    double statistic = 0.0;
    double p_value = 1.0;
};

/// Yates-corrected chi-square test of independence on the 2x2 table [[a, b], [c, d]]:
/// n (max(0, |ad - bc| - n/2))^2 / ((a+b)(c+d)(a+c)(b+d)), df = 1.
/// Throws PreconditionError when a marginal is zero or a count is negative.
TestResult chi2_yates(double a, double b, double c, double d);

/// Pearson chi-square test on an r x c contingency table (rows of equal length).
/// Applies the Yates correction when the table is 2x2, like the usual default.
TestResult chi2_contingency(const std::vector<std::vector<double>>& table);

/// Survival function of the chi-square distribution.
double chi2_sf(double x, double df);
/// Survival function of the F distribution.
double f_sf(double x, double df1, double df2);

struct AnovaResult {
    double f = 0.0;
    double p_value = 1.0;
    /// Zero within-group variance with unequal means: F is +inf and p is 0.
    bool infinite = false;
};

/// Classical one-way ANOVA (equal-variance). Requires >= 2 groups of >= 2 values.
AnovaResult anova_oneway(const std::vector<std::vector<double>>& groups);

double mean(std::span<const double> v);

/// Linear-interpolation percentile (q in [0, 100]) of a non-empty sample.
double percentile(std::vector<double> values, double q);
/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double sample_sd(std::span<const double> v);

}  // namespace fuseclin::stats
