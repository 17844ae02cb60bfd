#include "fuseclin/error.hpp"
#include "fuseclin/evaluation.hpp"
#include "fuseclin/rng.hpp"

#include <doctest.h>

#include <vector>

using namespace fuseclin;
using namespace fuseclin::evaluation;

namespace {

// TP 3, FN 1, FP 1, TN 5 at threshold 0.5.
const std::vector<int> kLabels = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
const std::vector<double> kScores = {0.9, 0.8, 0.7, 0.2, 0.6, 0.1, 0.1, 0.1, 0.1, 0.1};

}  // namespace

TEST_CASE("confusion and point metrics") {
    const auto c = confusion(kLabels, kScores, 0.5);
    CHECK(c.tp == 3);
    CHECK(c.fn == 1);
    CHECK(c.fp == 1);
    CHECK(c.tn == 5);
    const auto m = compute_metrics(kLabels, kScores, 0.5);
    CHECK(*m[MetricId::sensitivity] == doctest::Approx(0.75));
    CHECK(*m[MetricId::specificity] == doctest::Approx(5.0 / 6.0));
    CHECK(*m[MetricId::ppv] == doctest::Approx(0.75));
    CHECK(*m[MetricId::npv] == doctest::Approx(5.0 / 6.0));
    CHECK(*m[MetricId::f1] == doctest::Approx(0.75));
    CHECK(*m[MetricId::accuracy] == doctest::Approx(0.8));
    // 18 + 5 of 24 positive/negative pairs are ordered correctly.
    CHECK(*m[MetricId::auroc] == doctest::Approx(23.0 / 24.0));

    // The threshold is inclusive.
    CHECK(confusion(kLabels, kScores, 0.7).tp == 3);
}

TEST_CASE("degenerate inputs") {
    std::vector<int> y = {1, 0, 1, 0};
    std::vector<double> perfect = {1.0, 0.0, 1.0, 0.0};
    const auto m = compute_metrics(y, perfect, 0.5);
    for (auto id : kAllMetrics) CHECK(*m[id] == 1.0);

    std::vector<double> flat(4, 0.3);
    CHECK(auroc(y, flat) == 0.5);

    std::vector<int> one_class = {0, 0, 0};
    std::vector<double> s = {0.1, 0.2, 0.3};
    CHECK_THROWS(auroc(one_class, s));
    const auto u = compute_metrics(one_class, s, 0.5);
    CHECK_FALSE(u[MetricId::auroc]);
    CHECK_FALSE(u[MetricId::sensitivity]);
    CHECK_FALSE(u[MetricId::ppv]);
    CHECK(*u[MetricId::f1] == 0.0);
    CHECK(*u[MetricId::specificity] == 1.0);
}

TEST_CASE("roc curve area matches the rank statistic") {
    auto pts = roc_points(kLabels, kScores);
    CHECK(pts.front() == std::pair{0.0, 0.0});
    CHECK(pts.back() == std::pair{1.0, 1.0});
    CHECK(trapezoid_area(pts) == doctest::Approx(23.0 / 24.0));

    Rng rng(4);
    std::vector<int> y(300);
    std::vector<double> s(300);
    for (std::size_t i = 0; i < 300; ++i) {
        y[i] = rng.uniform() < 0.3;
        s[i] = std::round((rng.normal() + y[i]) * 4.0) / 4.0;  // many ties
    }
    CHECK(trapezoid_area(roc_points(y, s)) == doctest::Approx(auroc(y, s)).epsilon(1e-12));
}

TEST_CASE("bootstrap intervals") {
    std::vector<int> y(40);
    std::vector<double> s(40);
    for (std::size_t i = 0; i < 40; ++i) {
        y[i] = i % 3 == 0;
        s[i] = y[i] ? 0.9 : 0.1;
    }
    const auto ci = bootstrap_ci(y, s, 0.5, 200, 3);
    for (auto id : kAllMetrics) {
        const auto& iv = ci[static_cast<std::size_t>(id)];
        REQUIRE(iv.low);
        CHECK(*iv.low == 1.0);
        CHECK(*iv.high == 1.0);
    }

    const auto a = metrics_report(kLabels, kScores, 0.5, 100, 8);
    const auto b = metrics_report(kLabels, kScores, 0.5, 100, 8);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.to_csv() == b.to_csv());
    for (auto id : kAllMetrics) {
        const auto& e = a[id];
        if (e.low && e.point) {
            CHECK(*e.low <= *e.high);
        }
    }

    std::vector<int> small = {1, 0, 1};
    std::vector<double> ss = {0.2, 0.3, 0.4};
    CHECK_THROWS(bootstrap_ci(small, ss, 0.5, 100, 1));
    CHECK_THROWS(bootstrap_ci(kLabels, kScores, 0.5, 50, 1));
}

TEST_CASE("pooling out-of-fold predictions") {
    std::vector<PredictionSet> folds(2);
    folds[0] = {{"a", "b", "c"}, {1, 0, 0}, {0.8, 0.3, 0.6}, 0.5, {}, {"fold:0", "fold:0", "fold:0"}};
    folds[1] = {{"d", "e"}, {1, 0}, {0.4, 0.2}, 0.5, {}, {"fold:1", "fold:1"}};
    const auto p = pool_folds(folds);
    CHECK(p.pooled.size() == 5);
    CHECK(p.per_fold.size() == 2);
    CHECK(p.pooled.provenance[4] == "fold:1");
    CHECK(*p.per_fold[0][MetricId::accuracy] == doctest::Approx(2.0 / 3.0));
    CHECK(*p.per_fold[1][MetricId::accuracy] == doctest::Approx(0.5));
    CHECK(*p.fold_mean[MetricId::accuracy] == doctest::Approx((2.0 / 3.0 + 0.5) / 2.0));

    folds[1].ids[0] = "a";
    CHECK_THROWS_AS(pool_folds(folds), DataError);

    const auto back = PredictionSet::from_csv(p.pooled.to_csv(), 0.5);
    CHECK(back.ids == p.pooled.ids);
    CHECK(back.labels == p.pooled.labels);
    CHECK(back.scores == p.pooled.scores);

    PredictionSet bad = folds[0];
    bad.labels[0] = 2;
    CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("fairness report handles a stratum without positives") {
    PredictionSet ps;
    for (int i = 0; i < 40; ++i) {
        ps.ids.push_back("P" + std::to_string(i));
        const bool female = i < 15;
        ps.strata["sex"].push_back(female ? "F" : "M");
        ps.labels.push_back(!female && i % 3 == 0);
        ps.scores.push_back(ps.labels.back() ? 0.7 : 0.2 + 0.01 * i);
    }
    const auto r = fairness_report(ps, "sex", 200, 1);
    REQUIRE(r.size() == 2);
    const auto& f = r.at("F");
    CHECK(f.n == 15);
    CHECK(f.positives == 0);
    CHECK_FALSE(f.available(MetricId::auroc));
    CHECK_FALSE(f.available(MetricId::sensitivity));
    CHECK_FALSE(f.available(MetricId::ppv));
    CHECK(f.available(MetricId::specificity));
    CHECK_FALSE(f[MetricId::auroc].note.empty());
    CHECK(r.at("M").available(MetricId::auroc));
    CHECK_THROWS(fairness_report(ps, "race", 200, 1));
}
