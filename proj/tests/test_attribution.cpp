#include "fuseclin/attribution.hpp"
#include "fuseclin/error.hpp"
#include "fuseclin/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace fuseclin;
using namespace fuseclin::attribution;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (double& v : m.values) v = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("linear model attributions have a closed form") {
    const std::vector<double> w = {0.5, -2.0, 0.0, 1.25, 3.0};
    ModelFn f = [&](std::span<const double> x) {
        double z = 0.1;
        for (std::size_t i = 0; i < w.size(); ++i) z += w[i] * x[i];
        return z;
    };
    ShapConfig cfg;
    cfg.background = random_matrix(20, 5, 3);
    const std::vector<double> x = {1.0, 0.5, -3.0, 2.0, -1.0};
    const auto exact = exact_shap(f, x, cfg);
    cfg.n_permutations = 100;
    const auto sampled = sampled_shap(f, x, cfg);
    for (std::size_t i = 0; i < 5; ++i) {
        double mean = 0.0;
        for (std::size_t r = 0; r < 20; ++r) mean += cfg.background(r, i);
        const double expected = w[i] * (x[i] - mean / 20.0);
        CHECK(exact.values[i] == doctest::Approx(expected).epsilon(1e-10));
        // Additive models are recovered exactly by every permutation when rows cycle evenly.
        CHECK(sampled.values[i] == doctest::Approx(expected).epsilon(1e-10));
    }
    CHECK(exact.values[2] == 0.0);
}

TEST_CASE("constant model and interaction split") {
    ShapConfig cfg;
    cfg.background = Matrix(1, 3, 0.0);
    const std::vector<double> x = {1.0, 1.0, 1.0};
    const auto zero = exact_shap([](std::span<const double>) { return 0.7; }, x, cfg);
    for (double v : zero.values) CHECK(v == 0.0);
    CHECK(zero.base_value == 0.7);

    // x0 * x1 against a zero baseline: the product splits evenly.
    const auto prod = exact_shap([](std::span<const double> v) { return v[0] * v[1]; }, x, cfg);
    CHECK(prod.values[0] == doctest::Approx(0.5));
    CHECK(prod.values[1] == doctest::Approx(0.5));
    CHECK(prod.values[2] == 0.0);
    CHECK(prod.output == 1.0);
}

TEST_CASE("explain_rows, ranking and determinism") {
    const auto x = random_matrix(12, 4, 5);
    ModelFn f = [](std::span<const double> v) { return 1.0 / (1.0 + std::exp(-(2.0 * v[0] - 0.5 * v[2]))); };
    ShapConfig cfg;
    cfg.background = sample_background(x, 6, 1);
    CHECK(cfg.background.rows == 6);
    std::vector<std::string> ids, cols = {"a", "b", "c", "d"};
    for (int i = 0; i < 12; ++i) ids.push_back("P" + std::to_string(i));

    const auto e = explain_rows(f, x, ids, cols, cfg);
    CHECK(e.exact);
    for (std::size_t r = 0; r < 12; ++r) {
        double sum = e.base_value;
        for (std::size_t j = 0; j < 4; ++j) sum += e.values(r, j);
        CHECK(sum == doctest::Approx(e.outputs[r]).epsilon(1e-10));
    }
    const auto ranked = rank_features(e);
    CHECK(ranked[0].name == "a");
    CHECK(ranked[1].name == "c");
    CHECK(ranked[2].mean_abs == 0.0);
    CHECK(ranked[2].name == "b");

    cfg.exact_limit = 2;
    cfg.n_permutations = 100;
    const auto s1 = explain_rows(f, x, ids, cols, cfg);
    const auto s2 = explain_rows(f, x, ids, cols, cfg);
    CHECK_FALSE(s1.exact);
    CHECK(s1.to_csv() == s2.to_csv());
    CHECK(rank_features(s1)[0].name == "a");

    CHECK(sample_background(x, 6, 1) == cfg.background);
    CHECK(sample_background(x, 50, 1) == x);

    ShapConfig empty;
    CHECK_THROWS_AS(empty.validate(), PreconditionError);
}
