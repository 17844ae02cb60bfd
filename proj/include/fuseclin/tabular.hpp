#pragma once

#include "fuseclin/matrix.hpp"
#include "fuseclin/rng.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace fuseclin::tabular {

// ---------------------------------------------------------------------------
// Folds

struct FoldAssignment {
    int k = 4;
    std::uint64_t seed = 2020;
    std::vector<int> fold;  // per row

    std::vector<std::size_t> train_indices(int f) const;
    std::vector<std::size_t> valid_indices(int f) const;
    std::vector<std::size_t> positives_per_fold(std::span<const int> labels) const;

    nlohmann::json to_json() const;
    static FoldAssignment from_json(const nlohmann::json& j);
};

/// Positives and negatives are shuffled independently, then dealt round-robin into k folds;
/// the negatives continue from the fold after the last positive so fold sizes stay balanced.
FoldAssignment make_stratified_folds(std::span<const int> labels, int k = 4, std::uint64_t seed = 2020);

// ---------------------------------------------------------------------------
// Learners

enum class Penalty { l1, l2, elasticnet };
enum class GBLoss { deviance, exponential };
enum class Criterion { friedman_mse, mse, mae };
enum class MaxFeatures { all, sqrt, log2 };
enum class LearnerKind { logreg_elasticnet, grad_boost_trees, random_forest };

std::string_view to_string(Penalty p);
std::string_view to_string(GBLoss l);
std::string_view to_string(Criterion c);
std::string_view to_string(MaxFeatures m);
std::string_view to_string(LearnerKind k);
LearnerKind parse_learner_kind(std::string_view s);

struct LogregParams {
    double alpha = 1e-4;
    Penalty penalty = Penalty::l2;
    double l1_ratio = 0.15;  // used only with the elastic-net penalty
    int max_iter = 20000;
    double tolerance = 1e-6;
};

struct LogregModel {
    std::vector<double> weights;
    double intercept = 0.0;
    LogregParams params;
    int iterations = 0;
    bool converged = false;

    double decision(std::span<const double> x) const;
    double predict_proba(std::span<const double> x) const;
};

/// Mean log-loss + alpha * R(w); intercept unpenalized.
double logreg_objective(const Matrix& x, std::span<const int> y, std::span<const double> w, double b,
                        const LogregParams& params);

/// Accelerated proximal gradient (monotone FISTA with backtracking), started from zero
/// weights and the prior log-odds. Stops when the infinity norm of the proximal gradient
/// mapping falls below the tolerance.
LogregModel fit_logreg_elasticnet(const Matrix& x, std::span<const int> y, const LogregParams& params,
                                  std::uint64_t seed = 2020);

/// Node arrays; leaves have feature = -1. Rows with x[feature] <= cut go left.
struct Tree {
    std::vector<int> feature;
    std::vector<double> cut;
    std::vector<int> left;
    std::vector<int> right;
    std::vector<double> value;

    double predict(std::span<const double> x) const;
    std::size_t depth() const;
    nlohmann::json to_json() const;
    static Tree from_json(const nlohmann::json& j);
};

struct GBParams {
    GBLoss loss = GBLoss::deviance;
    double learning_rate = 0.1;
    int n_estimators = 100;
    double subsample = 1.0;
    Criterion criterion = Criterion::friedman_mse;
    int min_samples_split = 2;
    int min_samples_leaf = 1;
    int max_depth = 3;
    MaxFeatures max_features = MaxFeatures::all;
};

struct GBModel {
    GBParams params;
    double init = 0.0;
    std::vector<Tree> trees;

    double decision(std::span<const double> x) const;
    double predict_proba(std::span<const double> x) const;
    /// Decision value after each stage (index 0 = prior only).
    std::vector<double> staged_decision(std::span<const double> x) const;
    double proba_from_decision(double f) const;
};

/// Stage-wise additive regression trees fitted to the negative gradient of the loss,
/// with one Newton step per leaf. Subsampling draws rows without replacement per stage.
GBModel fit_gbtrees(const Matrix& x, std::span<const int> y, const GBParams& params, std::uint64_t seed = 2020);

struct RFParams {
    int n_estimators = 100;
    bool bootstrap = true;
    int max_depth = 8;
    MaxFeatures max_features = MaxFeatures::sqrt;
    int min_samples_split = 2;
    int min_samples_leaf = 1;
};

struct RFModel {
    RFParams params;
    std::vector<Tree> trees;  // leaves hold the positive fraction
    double predict_proba(std::span<const double> x) const;
};

RFModel fit_random_forest(const Matrix& x, std::span<const int> y, const RFParams& params, std::uint64_t seed = 2020);

struct LearnerSpec {
    LearnerKind kind = LearnerKind::logreg_elasticnet;
    std::variant<LogregParams, GBParams, RFParams> params = LogregParams{};
    std::uint64_t seed = 2020;

    nlohmann::json to_json() const;
    static LearnerSpec from_json(const nlohmann::json& j);
};

/// A fitted learner of any kind, with its feature columns and operating threshold.
struct TrainedModel {
    LearnerSpec spec;
    std::variant<LogregModel, GBModel, RFModel> model;
    std::vector<std::string> columns;
    double threshold = 0.5;

    double predict_proba(std::span<const double> x) const;
    std::vector<double> predict_proba(const Matrix& x) const;

    nlohmann::json to_json() const;
    static TrainedModel from_json(const nlohmann::json& j);
};

TrainedModel fit_learner(const LearnerSpec& spec, const Matrix& x, std::span<const int> y,
                         std::vector<std::string> columns = {});

// ---------------------------------------------------------------------------
// Search

/// Sampling distributions for each learner kind (inclusive integer ranges).
struct HyperSpace {
    std::vector<LearnerKind> kinds = {LearnerKind::logreg_elasticnet, LearnerKind::grad_boost_trees};
    /// Tree-ensemble size and depth ranges; narrowing them trades fidelity for run time.
    std::array<int, 2> n_estimators = {200, 1000};
    std::array<int, 2> max_depth = {3, 12};

    LearnerSpec sample(LearnerKind kind, Rng& rng) const;
    /// True when every hyperparameter of `spec` lies inside its declared range.
    bool contains(const LearnerSpec& spec) const;

    nlohmann::json to_json() const;
    static HyperSpace from_json(const nlohmann::json& j);
};

struct ThresholdPolicy {
    enum class Kind { max_f1, fixed } kind = Kind::max_f1;
    double value = 0.5;

    nlohmann::json to_json() const;
    static ThresholdPolicy from_json(const nlohmann::json& j);
};

/// max_f1 scans the minimum score and every midpoint between consecutive unique scores,
/// returning the F1-maximizing cut (ties resolved to the lowest). fixed returns its value.
double select_threshold(std::span<const double> scores, std::span<const int> labels, const ThresholdPolicy& policy);

struct SearchEntry {
    LearnerSpec spec;
    std::vector<double> fold_f1;
    double mean_f1 = 0.0;
    bool floor_pass = false;
};

struct SearchResult {
    std::vector<SearchEntry> ranked;  // winner first
    double floor = 0.25;
    bool floor_warning = false;       // no entry cleared the floor on every fold

    const SearchEntry& winner() const { return ranked.front(); }
    nlohmann::json to_json() const;
};

/// Orders entries: floor-passing first, then by mean F1 (descending), then by sampling order.
SearchResult rank_entries(std::vector<SearchEntry> entries, double floor = 0.25);

/// Samples n_iter specs per kind in the space; each spec is trained on k-1 folds and scored
/// by F1 on the held-out fold at that fold's max-F1 threshold.
SearchResult random_search_cv(const HyperSpace& space, const Matrix& x, std::span<const int> y,
                              const FoldAssignment& folds, int n_iter, std::uint64_t seed = 2020, double floor = 0.25);

/// Search winner refitted per fold (out-of-fold scores), an operating threshold chosen on
/// the pooled out-of-fold scores, and the winner refitted on every row.
struct CVRun {
    SearchResult search;
    std::vector<double> oof_scores;
    std::vector<double> fold_thresholds;
    TrainedModel model;
};

/// `final_x`, when given, replaces `x` for the full-data refit (same shape and row order).
CVRun cross_validated_fit(const Matrix& x, std::span<const int> y, const std::vector<std::string>& columns,
                          const FoldAssignment& folds, const HyperSpace& space, int n_iter, std::uint64_t seed,
                          double floor, const ThresholdPolicy& policy, const Matrix* final_x = nullptr);

}  // namespace fuseclin::tabular
