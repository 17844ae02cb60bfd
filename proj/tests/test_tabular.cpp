#include "fuseclin/error.hpp"
#include "fuseclin/tabular.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace fuseclin;
using namespace fuseclin::tabular;

namespace {

struct Problem {
    Matrix x;
    std::vector<int> y;
};

Problem linear_problem(std::size_t n, std::size_t p, std::uint64_t seed, double noise = 1.0) {
    Rng rng(seed);
    Problem pr{Matrix(n, p), std::vector<int>(n)};
    std::vector<double> w(p);
    for (double& v : w) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
        double z = -1.0;
        for (std::size_t j = 0; j < p; ++j) {
            pr.x(i, j) = rng.normal();
            z += w[j] * pr.x(i, j);
        }
        pr.y[i] = rng.uniform() < 1.0 / (1.0 + std::exp(-z / noise)) ? 1 : 0;
    }
    return pr;
}

double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Gradient of the mean log-loss with respect to (w, b).
std::vector<double> loss_gradient(const Problem& pr, const LogregModel& m) {
    const std::size_t p = pr.x.cols;
    std::vector<double> g(p + 1, 0.0);
    for (std::size_t i = 0; i < pr.x.rows; ++i) {
        const double r = sigm(m.decision(pr.x.row(i))) - pr.y[i];
        for (std::size_t j = 0; j < p; ++j) g[j] += r * pr.x(i, j);
        g[p] += r;
    }
    for (double& v : g) v /= static_cast<double>(pr.x.rows);
    return g;
}

}  // namespace

TEST_CASE("stratified folds") {
    std::vector<int> eight = {1, 0, 1, 0, 1, 0, 1, 0};
    const auto f = make_stratified_folds(eight, 4, 2020);
    CHECK(f.positives_per_fold(eight) == std::vector<std::size_t>{1, 1, 1, 1});
    for (int k = 0; k < 4; ++k) CHECK(f.valid_indices(k).size() == 2);

    std::vector<int> three = {1, 1, 1, 0, 0, 0, 0, 0};
    CHECK_THROWS_AS(make_stratified_folds(three, 4, 2020), PreconditionError);

    std::vector<int> large(1628, 0);
    for (std::size_t i = 0; i < 189; ++i) large[i * 8] = 1;
    const auto m = make_stratified_folds(large, 4, 2020);
    auto pos = m.positives_per_fold(large);
    std::sort(pos.begin(), pos.end());
    CHECK(pos == std::vector<std::size_t>{47, 47, 47, 48});
    for (int k = 0; k < 4; ++k) {
        const auto tr = m.train_indices(k), va = m.valid_indices(k);
        CHECK(tr.size() + va.size() == 1628);
        CHECK(va.size() == 407);
    }
    CHECK(FoldAssignment::from_json(m.to_json()).fold == m.fold);
    CHECK(make_stratified_folds(large, 4, 2020).to_json().dump() == m.to_json().dump());
    CHECK(make_stratified_folds(large, 4, 2021).fold != m.fold);
}

TEST_CASE("logistic regression reaches the penalized optimum") {
    const auto pr = linear_problem(200, 5, 3);
    SUBCASE("l2: stationarity of the full objective") {
        LogregParams p;
        p.alpha = 0.05;
        p.penalty = Penalty::l2;
        const auto m = fit_logreg_elasticnet(pr.x, pr.y, p);
        CHECK(m.converged);
        const auto g = loss_gradient(pr, m);
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(g[j] + p.alpha * m.weights[j]) < 1e-5);
        CHECK(std::abs(g[5]) < 1e-5);
    }
    SUBCASE("l1: subgradient optimality") {
        LogregParams p;
        p.alpha = 0.05;
        p.penalty = Penalty::l1;
        const auto m = fit_logreg_elasticnet(pr.x, pr.y, p);
        const auto g = loss_gradient(pr, m);
        for (std::size_t j = 0; j < 5; ++j) {
            if (m.weights[j] == 0.0)
                CHECK(std::abs(g[j]) <= p.alpha + 1e-5);
            else
                CHECK(g[j] == doctest::Approx(-p.alpha * (m.weights[j] > 0 ? 1.0 : -1.0)).epsilon(1e-4).scale(1e-3));
        }
    }
    SUBCASE("heavy l1 zeroes every weight exactly") {
        LogregParams p;
        p.alpha = 10.0;
        p.penalty = Penalty::l1;
        const auto m = fit_logreg_elasticnet(pr.x, pr.y, p);
        for (double w : m.weights) CHECK(w == 0.0);
        const double prior = std::accumulate(pr.y.begin(), pr.y.end(), 0.0) / pr.y.size();
        CHECK(m.predict_proba(pr.x.row(0)) == doctest::Approx(prior).epsilon(1e-6));
    }
}

TEST_CASE("logistic regression on two separable points") {
    Matrix x(2, 1);
    x(0, 0) = -1.0;
    x(1, 0) = 1.0;
    std::vector<int> y = {0, 1};
    LogregParams p;
    p.alpha = 1e-6;
    const auto m = fit_logreg_elasticnet(x, y, p);
    CHECK(m.predict_proba(x.row(0)) < 0.5);
    CHECK(m.predict_proba(x.row(1)) > 0.5);
}

TEST_CASE("logistic regression preconditions") {
    Matrix x(3, 1);
    std::vector<int> single = {1, 1, 1};
    CHECK_THROWS_AS(fit_logreg_elasticnet(x, single, {}), PreconditionError);
    std::vector<int> short_y = {1, 0};
    CHECK_THROWS_AS(fit_logreg_elasticnet(x, short_y, {}), PreconditionError);
    Matrix bad(2, 1);
    bad(0, 0) = std::nan("");
    std::vector<int> y = {1, 0};
    CHECK_THROWS_AS(fit_logreg_elasticnet(bad, y, {}), DataError);
}

TEST_CASE("a single boosting stump recovers the threshold split") {
    Matrix x(10, 1);
    std::vector<int> y(10);
    for (int i = 0; i < 10; ++i) {
        x(i, 0) = i;
        y[i] = i >= 6;
    }
    GBParams p;
    p.n_estimators = 1;
    p.max_depth = 1;
    p.learning_rate = 1.0;
    p.min_samples_leaf = 1;
    const auto m = fit_gbtrees(x, y, p);
    REQUIRE(m.trees.size() == 1);
    CHECK(m.trees[0].feature[0] == 0);
    CHECK(m.trees[0].cut[0] == 5.5);
    for (int i = 0; i < 10; ++i) CHECK((m.predict_proba(x.row(i)) > 0.5) == (i >= 6));
    CHECK(m.init == doctest::Approx(std::log(4.0 / 6.0)));
}

TEST_CASE("boosting training loss does not increase over stages") {
    const auto pr = linear_problem(150, 4, 9);
    for (auto loss : {GBLoss::deviance, GBLoss::exponential}) {
        GBParams p;
        p.loss = loss;
        p.n_estimators = 40;
        p.learning_rate = 0.1;
        p.max_depth = 2;
        const auto m = fit_gbtrees(pr.x, pr.y, p, 4);
        std::vector<double> total(41, 0.0);
        for (std::size_t i = 0; i < pr.x.rows; ++i) {
            const auto staged = m.staged_decision(pr.x.row(i));
            REQUIRE(staged.size() == 41);
            for (std::size_t s = 0; s < staged.size(); ++s) {
                if (loss == GBLoss::deviance) {
                    const double q = m.proba_from_decision(staged[s]);
                    total[s] -= pr.y[i] ? std::log(q) : std::log(1.0 - q);
                } else {
                    total[s] += std::exp(-(2.0 * pr.y[i] - 1.0) * staged[s]);
                }
            }
        }
        for (std::size_t s = 1; s < total.size(); ++s) CHECK(total[s] <= total[s - 1] + 1e-9);
    }
}

TEST_CASE("tree ensembles: criteria, subsampling and serialization") {
    const auto pr = linear_problem(120, 6, 21);
    for (auto crit : {Criterion::friedman_mse, Criterion::mse, Criterion::mae}) {
        GBParams p;
        p.criterion = crit;
        p.n_estimators = 20;
        p.subsample = 0.6;
        p.max_features = MaxFeatures::log2;
        const auto a = fit_gbtrees(pr.x, pr.y, p, 5);
        const auto b = fit_gbtrees(pr.x, pr.y, p, 5);
        for (std::size_t i = 0; i < 10; ++i) CHECK(a.decision(pr.x.row(i)) == b.decision(pr.x.row(i)));
        for (const auto& t : a.trees) CHECK(t.depth() <= 3);
    }
    RFParams rp;
    rp.n_estimators = 30;
    const auto rf = fit_random_forest(pr.x, pr.y, rp, 2);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pr.x.rows; ++i) {
        const double q = rf.predict_proba(pr.x.row(i));
        CHECK(q >= 0.0);
        CHECK(q <= 1.0);
        correct += (q >= 0.5) == (pr.y[i] == 1);
    }
    CHECK(correct > pr.x.rows * 8 / 10);

    for (auto kind : {LearnerKind::logreg_elasticnet, LearnerKind::grad_boost_trees, LearnerKind::random_forest}) {
        HyperSpace space;
        space.kinds = {kind};
        space.n_estimators = {5, 10};
        space.max_depth = {2, 3};
        Rng rng(1);
        const auto spec = space.sample(kind, rng);
        CHECK(space.contains(spec));
        const auto model = fit_learner(spec, pr.x, pr.y);
        const auto back = TrainedModel::from_json(model.to_json());
        CHECK(back.columns == model.columns);
        CHECK(back.predict_proba(pr.x) == model.predict_proba(pr.x));
        CHECK(LearnerSpec::from_json(spec.to_json()).to_json() == spec.to_json());
    }
}

TEST_CASE("hyperparameter space") {
    HyperSpace space;
    Rng rng(2020);
    for (int i = 0; i < 200; ++i) {
        const auto gb = space.sample(LearnerKind::grad_boost_trees, rng);
        const auto& p = std::get<GBParams>(gb.params);
        CHECK(p.n_estimators >= 200);
        CHECK(p.n_estimators <= 1000);
        CHECK(p.max_depth >= 3);
        CHECK(p.max_depth <= 12);
        CHECK(p.subsample >= 0.1);
        CHECK(space.contains(gb));
        const auto lr = space.sample(LearnerKind::logreg_elasticnet, rng);
        const auto& q = std::get<LogregParams>(lr.params);
        CHECK(q.alpha >= 0.0001);
        CHECK(q.alpha <= 0.001);
    }
    Rng a(5), b(5);
    for (int i = 0; i < 10; ++i)
        CHECK(space.sample(LearnerKind::grad_boost_trees, a).to_json() ==
              space.sample(LearnerKind::grad_boost_trees, b).to_json());
    CHECK(HyperSpace::from_json(space.to_json()).to_json() == space.to_json());
}

TEST_CASE("threshold selection") {
    ThresholdPolicy maxf1;
    // Candidate cuts 0.1, 0.225, 0.375, 0.6 give F1 2/3, 4/5, 1/2, 2/3.
    std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
    std::vector<int> y = {0, 0, 1, 1};
    CHECK(select_threshold(s, y, maxf1) == doctest::Approx(0.225));

    std::vector<double> sep = {0.1, 0.2, 0.8, 0.9};
    CHECK(select_threshold(sep, y, maxf1) == doctest::Approx(0.5));

    ThresholdPolicy fixed;
    fixed.kind = ThresholdPolicy::Kind::fixed;
    fixed.value = 0.5;
    CHECK(select_threshold(s, y, fixed) == 0.5);
    CHECK(ThresholdPolicy::from_json(fixed.to_json()).value == 0.5);
}

TEST_CASE("ranking applies the per-fold floor") {
    SearchEntry steady, spiky;
    steady.fold_f1 = {0.3, 0.3, 0.3, 0.3};
    steady.mean_f1 = 0.3;
    spiky.fold_f1 = {0.9, 0.9, 0.9, 0.2};
    spiky.mean_f1 = 0.725;
    auto r = rank_entries({spiky, steady}, 0.25);
    CHECK(r.winner().fold_f1 == steady.fold_f1);
    CHECK_FALSE(r.floor_warning);

    SearchEntry low;
    low.fold_f1 = {0.1, 0.1, 0.1, 0.1};
    low.mean_f1 = 0.1;
    auto w = rank_entries({low, spiky}, 0.25);
    CHECK(w.floor_warning);
    CHECK(w.winner().fold_f1 == spiky.fold_f1);
}

TEST_CASE("random search and cross-validated fit") {
    const auto pr = linear_problem(160, 4, 13);
    const auto folds = make_stratified_folds(pr.y, 4, 2020);
    HyperSpace space;
    space.kinds = {LearnerKind::logreg_elasticnet};
    const auto one = random_search_cv(space, pr.x, pr.y, folds, 1, 2020);
    REQUIRE(one.ranked.size() == 1);
    Rng rng = Rng(2020).derive("logreg_elasticnet");
    CHECK(one.winner().spec.to_json() == space.sample(LearnerKind::logreg_elasticnet, rng).to_json());

    space.kinds = {LearnerKind::logreg_elasticnet, LearnerKind::grad_boost_trees};
    space.n_estimators = {10, 20};
    space.max_depth = {2, 3};
    const auto a = random_search_cv(space, pr.x, pr.y, folds, 3, 7);
    const auto b = random_search_cv(space, pr.x, pr.y, folds, 3, 7);
    CHECK(a.ranked.size() == 6);
    CHECK(a.to_json() == b.to_json());
    for (std::size_t i = 1; i < a.ranked.size(); ++i)
        if (a.ranked[i].floor_pass == a.ranked[i - 1].floor_pass) CHECK(a.ranked[i].mean_f1 <= a.ranked[i - 1].mean_f1);

    std::vector<std::string> cols = {"a", "b", "c", "d"};
    const auto run = cross_validated_fit(pr.x, pr.y, cols, folds, space, 2, 7, 0.25, ThresholdPolicy{});
    CHECK(run.oof_scores.size() == 160);
    CHECK(run.fold_thresholds.size() == 4);
    CHECK(run.model.columns == cols);
    CHECK(run.model.threshold == doctest::Approx(select_threshold(run.oof_scores, pr.y, ThresholdPolicy{})));
}
