#include "fuseclin/error.hpp"
#include "fuseclin/stats.hpp"

#include <doctest.h>

#include <cmath>

using namespace fuseclin;

TEST_CASE("Yates chi-square on hand-computed tables") {
    // n (|ad - bc| - n/2)^2 / (r1 r2 c1 c2) = 50 * (375 - 25)^2 / 25^4
    auto r = stats::chi2_yates(20, 5, 5, 20);
    CHECK(r.statistic == doctest::Approx(15.68).epsilon(1e-12));
    // df = 1 survival: erfc(sqrt(x / 2))
    CHECK(r.p_value == doctest::Approx(std::erfc(std::sqrt(15.68 / 2.0))).epsilon(1e-9));
    CHECK(r.p_value == doctest::Approx(7.5e-5).epsilon(0.01));

    auto flat = stats::chi2_yates(10, 10, 10, 10);
    CHECK(flat.statistic == 0.0);
    CHECK(flat.p_value == doctest::Approx(1.0));

    CHECK_THROWS_AS(stats::chi2_yates(0, 0, 5, 5), PreconditionError);
}

TEST_CASE("general contingency test uses Pearson without correction beyond 2x2") {
    // 2x3 table; expected counts are row * col / n.
    std::vector<std::vector<double>> t = {{10, 20, 30}, {20, 20, 20}};
    double n = 120, chi = 0;
    const double rows[2] = {60, 60}, cols[3] = {30, 40, 50};
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) {
            const double e = rows[i] * cols[j] / n;
            chi += (t[i][j] - e) * (t[i][j] - e) / e;
        }
    auto r = stats::chi2_contingency(t);
    CHECK(r.statistic == doctest::Approx(chi).epsilon(1e-12));
    // df = 2 survival is exp(-x / 2)
    CHECK(r.p_value == doctest::Approx(std::exp(-chi / 2.0)).epsilon(1e-9));
    CHECK(stats::chi2_contingency({{20, 5}, {5, 20}}).statistic == doctest::Approx(15.68).epsilon(1e-12));
}

TEST_CASE("one-way ANOVA") {
    auto r = stats::anova_oneway({{1, 2, 3}, {2, 3, 4}});
    CHECK(r.f == doctest::Approx(1.5).epsilon(1e-12));
    // F(1, 4) survival at 1.5 equals the two-sided t(4) tail at sqrt(1.5).
    CHECK(r.p_value == doctest::Approx(0.287864).epsilon(1e-4));

    auto same = stats::anova_oneway({{1, 2, 3}, {1, 2, 3}});
    CHECK(same.f == 0.0);
    CHECK(same.p_value == doctest::Approx(1.0));

    auto inf = stats::anova_oneway({{1, 1}, {2, 2}});
    CHECK(inf.infinite);
    CHECK(inf.p_value == 0.0);

    CHECK_THROWS_AS(stats::anova_oneway({{1, 2}}), PreconditionError);
    CHECK_THROWS_AS(stats::anova_oneway({{1}, {2, 3}}), PreconditionError);
}

TEST_CASE("percentile, mean and sd") {
    CHECK(stats::percentile({1, 2, 4}, 50) == 2.0);
    CHECK(stats::percentile({1, 2, 3, 4}, 25) == doctest::Approx(1.75));
    CHECK(stats::percentile({5}, 97.5) == 5.0);
    const std::vector<double> v = {2, 4, 4, 4, 5, 5, 7, 9};
    CHECK(stats::mean(v) == 5.0);
    CHECK(stats::sample_sd(v) == doctest::Approx(std::sqrt(32.0 / 7.0)));
    CHECK(stats::chi2_sf(3.841458820694124, 1) == doctest::Approx(0.05).epsilon(1e-9));
}
