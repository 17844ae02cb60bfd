#include "fuseclin/evaluation.hpp"

#include "fuseclin/error.hpp"
#include "fuseclin/io.hpp"
#include "fuseclin/rng.hpp"
#include "fuseclin/stats.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <set>

namespace fuseclin::evaluation {

namespace {

constexpr std::string_view kMetricNames[] = {"auroc", "sensitivity", "specificity", "ppv", "npv", "f1", "accuracy"};

void check_inputs(std::span<const int> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) throw PreconditionError("labels and scores differ in length");
    if (labels.empty()) throw PreconditionError("empty prediction set");
    for (int y : labels)
        if (y != 0 && y != 1) throw PreconditionError("labels must be 0 or 1");
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

/// Twice the Mann-Whitney U count (integral), plus class sizes.
struct RankCount {
    double twice_u = 0.0;
    std::size_t pos = 0;
    std::size_t neg = 0;
};

RankCount rank_count(std::span<const int> labels, std::span<const double> scores, std::vector<std::size_t>& order) {
    order.resize(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    RankCount rc;
    std::size_t neg_below = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::size_t pos_here = 0, neg_here = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? pos_here : neg_here) += 1;
            ++j;
        }
        rc.twice_u += static_cast<double>(pos_here) * static_cast<double>(2 * neg_below + neg_here);
        neg_below += neg_here;
        rc.pos += pos_here;
        rc.neg += neg_here;
        i = j;
    }
    return rc;
}

std::optional<double> auroc_or_none(std::span<const int> labels, std::span<const double> scores,
                                    std::vector<std::size_t>& scratch) {
    auto rc = rank_count(labels, scores, scratch);
    if (rc.pos == 0 || rc.neg == 0) return std::nullopt;
    return rc.twice_u / (2.0 * static_cast<double>(rc.pos) * static_cast<double>(rc.neg));
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string opt_text(const std::optional<double>& v) { return v ? io::format_double(*v) : std::string{}; }

}  // namespace

std::string_view to_string(MetricId id) { return kMetricNames[static_cast<std::size_t>(id)]; }

Confusion confusion(std::span<const int> labels, std::span<const double> scores, double threshold) {
    check_inputs(labels, scores);
    Confusion c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        if (labels[i] == 1)
            (predicted ? c.tp : c.fn) += 1;
        else
            (predicted ? c.fp : c.tn) += 1;
    }
    return c;
}

Metrics metrics_from_confusion(const Confusion& c) {
    Metrics m;
    m[MetricId::sensitivity] = ratio(c.tp, c.tp + c.fn);
    m[MetricId::specificity] = ratio(c.tn, c.tn + c.fp);
    m[MetricId::ppv] = ratio(c.tp, c.tp + c.fp);
    m[MetricId::npv] = ratio(c.tn, c.tn + c.fn);
    m[MetricId::f1] = c.tp == 0 ? 0.0 : static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
    m[MetricId::accuracy] = ratio(c.tp + c.tn, c.n());
    return m;
}

Metrics compute_metrics(std::span<const int> labels, std::span<const double> scores, double threshold) {
    Metrics m = metrics_from_confusion(confusion(labels, scores, threshold));
    std::vector<std::size_t> scratch;
    m[MetricId::auroc] = auroc_or_none(labels, scores, scratch);
    return m;
}

double auroc(std::span<const int> labels, std::span<const double> scores) {
    check_inputs(labels, scores);
    std::vector<std::size_t> scratch;
    auto v = auroc_or_none(labels, scores, scratch);
    if (!v) throw PreconditionError("auroc: both classes must be present");
    return *v;
}

std::vector<std::pair<double, double>> roc_points(std::span<const int> labels, std::span<const double> scores) {
    check_inputs(labels, scores);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw PreconditionError("roc_points: both classes must be present");

    std::vector<std::pair<double, double>> points = {{0.0, 0.0}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? tp : fp) += 1;
            ++j;
        }
        points.emplace_back(static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos));
        i = j;
    }
    return points;
}

double trapezoid_area(const std::vector<std::pair<double, double>>& points) {
    double area = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i)
        area += (points[i].first - points[i - 1].first) * (points[i].second + points[i - 1].second) / 2.0;
    return area;
}

std::array<Interval, kMetricCount> bootstrap_ci(std::span<const int> labels, std::span<const double> scores,
                                                double threshold, int resamples, std::uint64_t seed) {
    check_inputs(labels, scores);
    if (labels.size() < 10) throw PreconditionError("bootstrap_ci: need at least 10 predictions");
    if (resamples < 100) throw PreconditionError("bootstrap_ci: need at least 100 resamples");

    const std::size_t n = labels.size();
    std::array<std::vector<double>, kMetricCount> samples;
    for (auto& s : samples) s.reserve(static_cast<std::size_t>(resamples));

    Rng rng(seed);
    std::vector<int> rl(n);
    std::vector<double> rs(n);
    std::vector<std::size_t> scratch;
    for (int b = 0; b < resamples; ++b) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = rng.index(n);
            rl[i] = labels[k];
            rs[i] = scores[k];
        }
        Metrics m = metrics_from_confusion(confusion(rl, rs, threshold));
        m[MetricId::auroc] = auroc_or_none(rl, rs, scratch);
        for (std::size_t k = 0; k < kMetricCount; ++k)
            if (m.values[k]) samples[k].push_back(*m.values[k]);
    }

    std::array<Interval, kMetricCount> out;
    const auto min_valid = static_cast<std::size_t>(std::ceil(0.9 * resamples));
    for (std::size_t k = 0; k < kMetricCount; ++k) {
        out[k].valid_resamples = samples[k].size();
        if (samples[k].size() < min_valid) {
            out[k].reason = "only " + std::to_string(samples[k].size()) + " of " + std::to_string(resamples) +
                            " resamples define " + std::string(kMetricNames[k]);
            continue;
        }
        out[k].low = stats::percentile(samples[k], 2.5);
        out[k].high = stats::percentile(samples[k], 97.5);
    }
    return out;
}

MetricsReport metrics_report(std::span<const int> labels, std::span<const double> scores, double threshold,
                             int resamples, std::uint64_t seed) {
    check_inputs(labels, scores);
    MetricsReport report;
    report.n = labels.size();
    report.positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    report.threshold = threshold;
    report.resamples = resamples;
    report.seed = seed;

    const Metrics point = compute_metrics(labels, scores, threshold);
    std::array<Interval, kMetricCount> ci{};
    bool have_ci = labels.size() >= 10;
    if (have_ci) ci = bootstrap_ci(labels, scores, threshold, resamples, seed);

    const std::size_t negatives = report.n - report.positives;
    for (auto id : kAllMetrics) {
        auto& est = report.metrics[static_cast<std::size_t>(id)];
        const auto& iv = ci[static_cast<std::size_t>(id)];
        const bool needs_pos = id == MetricId::auroc || id == MetricId::sensitivity || id == MetricId::ppv ||
                               id == MetricId::f1;
        const bool needs_neg = id == MetricId::auroc || id == MetricId::specificity || id == MetricId::npv;
        if (needs_pos && report.positives == 0) {
            est.note = "unavailable: no positive cases";
            continue;
        }
        if (needs_neg && negatives == 0) {
            est.note = "unavailable: no negative cases";
            continue;
        }
        est.point = point[id];
        if (!est.point) {
            est.note = "undefined: zero denominator";
            continue;
        }
        if (!have_ci) {
            est.note = "interval unavailable: fewer than 10 predictions";
        } else if (!iv.low) {
            est.note = "interval unavailable: " + iv.reason;
        } else {
            est.low = iv.low;
            est.high = iv.high;
        }
    }
    return report;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json metrics_json = nlohmann::json::object();
    for (auto id : kAllMetrics) {
        const auto& e = (*this)[id];
        nlohmann::json j = {{"point", opt_json(e.point)}, {"lo", opt_json(e.low)}, {"hi", opt_json(e.high)}};
        if (!e.note.empty()) j["note"] = e.note;
        metrics_json[std::string(to_string(id))] = j;
    }
    return {{"n", n},
            {"positives", positives},
            {"threshold", threshold},
            {"bootstrap_resamples", resamples},
            {"seed", seed},
            {"metrics", metrics_json},
            {"footnotes",
             {"PPV/NPV undefined on zero denominators; F1 = 0 when there are no predicted or no true positives",
              "95% CI: percentile bootstrap (2.5th/97.5th) over patients",
              "score >= threshold is predicted positive"}}};
}

std::string MetricsReport::to_csv() const {
    std::string out = "metric,point,lo,hi,note\n";
    for (auto id : kAllMetrics) {
        const auto& e = (*this)[id];
        std::vector<std::string> fields = {std::string(to_string(id)), opt_text(e.point), opt_text(e.low),
                                           opt_text(e.high), e.note};
        out += io::csv_line(fields);
    }
    return out;
}

void PredictionSet::validate() const {
    const std::size_t n = ids.size();
    if (labels.size() != n || scores.size() != n) throw DataError("prediction set: column lengths differ");
    if (!provenance.empty() && provenance.size() != n) throw DataError("prediction set: provenance length differs");
    for (const auto& [key, values] : strata)
        if (values.size() != n) throw DataError("prediction set: stratum '" + key + "' length differs");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw DataError("prediction set: threshold outside [0,1]");
    for (int y : labels)
        if (y != 0 && y != 1) throw DataError("prediction set: labels must be 0 or 1");
}

std::string PredictionSet::to_csv() const {
    std::vector<std::string> header = {"id", "label", "score", "provenance"};
    for (const auto& [key, values] : strata) header.push_back(key);
    std::string out = io::csv_line(header);
    for (std::size_t i = 0; i < size(); ++i) {
        std::vector<std::string> fields = {ids[i], std::to_string(labels[i]), io::format_double(scores[i]),
                                           provenance.empty() ? std::string{} : provenance[i]};
        for (const auto& [key, values] : strata) fields.push_back(values[i]);
        out += io::csv_line(fields);
    }
    return out;
}

PredictionSet PredictionSet::from_csv(std::string_view text, double threshold) {
    auto csv = io::parse_csv(text);
    if (csv.header.size() < 4 || csv.header[0] != "id" || csv.header[1] != "label" || csv.header[2] != "score" ||
        csv.header[3] != "provenance")
        throw DataError("prediction csv: header must start with id,label,score,provenance");
    PredictionSet p;
    p.threshold = threshold;
    for (std::size_t c = 4; c < csv.header.size(); ++c) p.strata[csv.header[c]];
    for (const auto& row : csv.rows) {
        p.ids.push_back(row[0]);
        p.labels.push_back(row[1] == "1" ? 1 : row[1] == "0" ? 0 : throw DataError("prediction csv: bad label"));
        double s = 0.0;
        auto [ptr, ec] = std::from_chars(row[2].data(), row[2].data() + row[2].size(), s);
        if (ec != std::errc{} || ptr != row[2].data() + row[2].size()) throw DataError("prediction csv: bad score");
        p.scores.push_back(s);
        p.provenance.push_back(row[3]);
        for (std::size_t c = 4; c < csv.header.size(); ++c) p.strata[csv.header[c]].push_back(row[c]);
    }
    p.validate();
    return p;
}

PooledPredictions pool_folds(const std::vector<PredictionSet>& folds) {
    if (folds.empty()) throw PreconditionError("pool_folds: no folds");
    PooledPredictions out;
    out.pooled.threshold = folds.front().threshold;
    std::set<std::string> seen;
    std::set<std::string> keys;
    for (const auto& f : folds)
        for (const auto& [k, v] : f.strata) keys.insert(k);

    for (const auto& f : folds) {
        f.validate();
        for (std::size_t i = 0; i < f.size(); ++i) {
            if (!seen.insert(f.ids[i]).second) throw DataError("pool_folds: id '" + f.ids[i] + "' appears in two folds");
            out.pooled.ids.push_back(f.ids[i]);
            out.pooled.labels.push_back(f.labels[i]);
            out.pooled.scores.push_back(f.scores[i]);
            out.pooled.provenance.push_back(f.provenance.empty() ? std::string{} : f.provenance[i]);
            for (const auto& k : keys) {
                auto it = f.strata.find(k);
                out.pooled.strata[k].push_back(it == f.strata.end() ? std::string{} : it->second[i]);
            }
        }
        out.per_fold.push_back(compute_metrics(f.labels, f.scores, f.threshold));
    }
    for (std::size_t k = 0; k < kMetricCount; ++k) {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& m : out.per_fold)
            if (m.values[k]) {
                sum += *m.values[k];
                ++count;
            }
        if (count) out.fold_mean.values[k] = sum / static_cast<double>(count);
    }
    return out;
}

std::map<std::string, MetricsReport> fairness_report(const PredictionSet& predictions, const std::string& stratum_key,
                                                     int resamples, std::uint64_t seed) {
    predictions.validate();
    auto it = predictions.strata.find(stratum_key);
    if (it == predictions.strata.end()) throw DataError("fairness_report: missing stratum attribute '" + stratum_key + "'");
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < it->second.size(); ++i) {
        if (it->second[i].empty())
            throw DataError("fairness_report: row '" + predictions.ids[i] + "' lacks stratum '" + stratum_key + "'");
        groups[it->second[i]].push_back(i);
    }
    std::map<std::string, MetricsReport> out;
    for (const auto& [value, rows] : groups) {
        std::vector<int> labels;
        std::vector<double> scores;
        for (auto r : rows) {
            labels.push_back(predictions.labels[r]);
            scores.push_back(predictions.scores[r]);
        }
        out.emplace(value, metrics_report(labels, scores, predictions.threshold, resamples, seed));
    }
    return out;
}

}  // namespace fuseclin::evaluation
