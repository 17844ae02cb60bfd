#pragma once

#include "fuseclin/matrix.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace fuseclin::attribution {

/// Model output being explained (a probability in the pipeline).
using ModelFn = std::function<double(std::span<const double>)>;

struct ShapConfig {
    Matrix background;  // reference rows standing in for absent features
    std::size_t exact_limit = 12;
    int n_permutations = 200;
    std::uint64_t seed = 2020;

    /// Throws PreconditionError on an empty background or exact_limit above 20.
    void validate() const;
};

struct ShapValues {
    std::vector<double> values;
    double base_value = 0.0;  // mean model output over the background
    double output = 0.0;      // model output at the explained row
};

/// Shapley values of v(S) = mean over background rows b of f(x on S, b elsewhere), by
/// enumeration of all 2^k coalitions.
ShapValues exact_shap(const ModelFn& f, std::span<const double> x, const ShapConfig& cfg);

/// Permutation-sampling estimate of the same values. Permutation p pairs a seeded random
/// feature order with background row p mod |background|.
ShapValues sampled_shap(const ModelFn& f, std::span<const double> x, const ShapConfig& cfg);

struct ShapMatrix {
    std::vector<std::string> columns;
    std::vector<std::string> ids;
    Matrix values;
    std::vector<double> outputs;
    double base_value = 0.0;
    bool exact = false;

    std::string to_csv() const;
    nlohmann::json summary_json() const;
};

/// Exact mode when the feature count is within exact_limit, sampled otherwise.
ShapMatrix explain_rows(const ModelFn& f, const Matrix& x, const std::vector<std::string>& ids,
                        const std::vector<std::string>& columns, const ShapConfig& cfg);

struct RankedFeature {
    std::string name;
    double mean_abs = 0.0;
};

/// Descending mean |value|; ties keep column order.
std::vector<RankedFeature> rank_features(const ShapMatrix& shap);

/// Up to n rows drawn without replacement (seeded), in their original order.
Matrix sample_background(const Matrix& x, std::size_t n = 100, std::uint64_t seed = 2020);

}  // namespace fuseclin::attribution
