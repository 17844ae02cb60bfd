#pragma once

#include <json.hpp>

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fuseclin::evaluation {

enum class MetricId { auroc, sensitivity, specificity, ppv, npv, f1, accuracy };
inline constexpr std::size_t kMetricCount = 7;
inline constexpr std::array<MetricId, kMetricCount> kAllMetrics = {
    MetricId::auroc, MetricId::sensitivity, MetricId::specificity, MetricId::ppv,
    MetricId::npv,   MetricId::f1,          MetricId::accuracy};

std::string_view to_string(MetricId id);

struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t positives() const { return tp + fn; }
    std::size_t negatives() const { return tn + fp; }
    std::size_t n() const { return tp + fp + tn + fn; }
};

/// Score >= threshold predicts positive.
Confusion confusion(std::span<const int> labels, std::span<const double> scores, double threshold);

/// Seven metrics; nullopt marks an undefined value (zero denominator, or AUROC on one class).
struct Metrics {
    std::array<std::optional<double>, kMetricCount> values{};

    std::optional<double>& operator[](MetricId id) { return values[static_cast<std::size_t>(id)]; }
    const std::optional<double>& operator[](MetricId id) const { return values[static_cast<std::size_t>(id)]; }
};

/// Threshold metrics from a confusion matrix. F1 is 2TP / (2TP + FP + FN), taken as 0 when
/// there are no predicted or no true positives.
Metrics metrics_from_confusion(const Confusion& c);

/// All seven metrics; AUROC is undefined when only one class is present.
Metrics compute_metrics(std::span<const int> labels, std::span<const double> scores, double threshold);

/// Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie). Throws on single-class input.
double auroc(std::span<const int> labels, std::span<const double> scores);

/// Operating points from (0,0) to (1,1), one per distinct score threshold.
std::vector<std::pair<double, double>> roc_points(std::span<const int> labels, std::span<const double> scores);
double trapezoid_area(const std::vector<std::pair<double, double>>& points);

struct Interval {
    std::optional<double> low;
    std::optional<double> high;
    std::size_t valid_resamples = 0;
    std::string reason;  // set when the interval is unavailable
};

/// Percentile (2.5 / 97.5) bootstrap over patients. Resamples where a metric is undefined are
/// dropped for that metric; fewer than 0.9 B valid resamples leaves its interval unavailable.
/// Requires n >= 10 and B >= 100.
std::array<Interval, kMetricCount> bootstrap_ci(std::span<const int> labels, std::span<const double> scores,
                                                double threshold, int resamples = 1000, std::uint64_t seed = 2020);

struct MetricEstimate {
    std::optional<double> point;
    std::optional<double> low;
    std::optional<double> high;
    std::string note;
};

struct MetricsReport {
    std::size_t n = 0;
    std::size_t positives = 0;
    double threshold = 0.5;
    int resamples = 1000;
    std::uint64_t seed = 2020;
    std::array<MetricEstimate, kMetricCount> metrics{};

    const MetricEstimate& operator[](MetricId id) const { return metrics[static_cast<std::size_t>(id)]; }
    bool available(MetricId id) const { return (*this)[id].point.has_value(); }

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

/// Point metrics plus bootstrap intervals. A set without positive cases reports AUROC,
/// sensitivity, PPV and F1 as unavailable; one without negatives does the same for AUROC,
/// specificity and NPV.
MetricsReport metrics_report(std::span<const int> labels, std::span<const double> scores, double threshold,
                             int resamples = 1000, std::uint64_t seed = 2020);

/// Scored predictions for one evaluation unit (fold, pooled set or external site).
struct PredictionSet {
    std::vector<std::string> ids;
    std::vector<int> labels;
    std::vector<double> scores;
    double threshold = 0.5;
    std::map<std::string, std::vector<std::string>> strata;  // e.g. "sex" -> per-row value
    std::vector<std::string> provenance;                       // e.g. "fold:2" or "site:siteb"

    std::size_t size() const { return ids.size(); }
    /// Throws DataError on length mismatch, threshold outside [0,1], or non-binary labels.
    void validate() const;

    std::string to_csv() const;
    static PredictionSet from_csv(std::string_view text, double threshold);
};

struct PooledPredictions {
    PredictionSet pooled;
    std::vector<Metrics> per_fold;
    Metrics fold_mean;  // mean over folds where the metric is defined
};

/// Concatenates disjoint out-of-fold prediction sets. The pooled threshold is taken from the
/// first fold.
PooledPredictions pool_folds(const std::vector<PredictionSet>& folds);

/// One MetricsReport per value of `stratum_key`.
std::map<std::string, MetricsReport> fairness_report(const PredictionSet& predictions,
                                                     const std::string& stratum_key = "sex", int resamples = 1000,
                                                     std::uint64_t seed = 2020);

}  // namespace fuseclin::evaluation
