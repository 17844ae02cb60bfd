#pragma once

#include "fuseclin/matrix.hpp"

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fuseclin::cohort {

enum class ColumnKind { categorical, numeric, vital, outcome, id, admission_time };

std::string_view to_string(ColumnKind kind);
ColumnKind parse_column_kind(std::string_view s);

/// numeric and vital columns are both scaled as continuous features.
inline bool is_continuous(ColumnKind k) { return k == ColumnKind::numeric || k == ColumnKind::vital; }
inline bool is_feature(ColumnKind k) { return is_continuous(k) || k == ColumnKind::categorical; }

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::numeric;
    std::string unit = {};
};

/// Ordered column declarations. Exactly one id and one outcome column; unique names.
class FeatureSchema {
public:
    FeatureSchema() = default;
    explicit FeatureSchema(std::vector<ColumnSpec> columns);

    const std::vector<ColumnSpec>& columns() const { return columns_; }
    std::optional<std::size_t> index_of(std::string_view name) const;
    std::size_t id_index() const { return id_index_; }
    std::size_t outcome_index() const { return outcome_index_; }
    std::optional<std::size_t> admission_index() const { return admission_index_; }

    nlohmann::json to_json() const;
    static FeatureSchema from_json(const nlohmann::json& j);

private:
    std::vector<ColumnSpec> columns_;
    std::size_t id_index_ = 0;
    std::size_t outcome_index_ = 0;
    std::optional<std::size_t> admission_index_;
};

/// One column of cells. Continuous and outcome columns use `numbers`; id, admission
/// time and categorical columns use `labels`. nullopt marks a missing cell.
struct Column {
    std::vector<std::optional<double>> numbers;
    std::vector<std::optional<std::string>> labels;
};

/// Patient-keyed table, column-major, aligned with `schema.columns()`.
struct CohortTable {
    FeatureSchema schema;
    std::vector<Column> columns;
    std::string provenance;

    std::size_t rows() const;
    const std::vector<std::optional<std::string>>& ids() const { return columns[schema.id_index()].labels; }
    std::string id(std::size_t row) const { return *ids()[row]; }
    const Column* find(std::string_view name) const;
    Column* find(std::string_view name);
    /// Outcome per row: 0 alive, 1 expired, -1 missing.
    std::vector<int> outcomes() const;
    /// Copy restricted to the given rows, in order.
    CohortTable select_rows(const std::vector<std::size_t>& rows) const;
};

struct ExclusionCounts {
    std::size_t read = 0;
    std::size_t under_age = 0;
    std::size_t missing_admission = 0;
    std::size_t missing_cxr = 0;
    std::size_t missing_outcome = 0;
    std::size_t retained = 0;

    nlohmann::json to_json() const;
};

struct LoadOptions {
    /// Rows without an outcome are excluded (training sets); off for inference-only data.
    bool require_outcome = true;
    std::string age_column = "age";
    /// Rows with age <= this value are excluded.
    double max_excluded_age = 16.0;
    /// When set, rows whose id is absent are excluded as missing an admission CXR.
    std::optional<std::set<std::string>> ids_with_cxr;
};

struct LoadResult {
    CohortTable table;
    ExclusionCounts excluded;
};

/// Parses delimited EHR text whose header matches the schema names (any order).
/// Exclusions are applied in order: under age, missing admission time, missing CXR,
/// missing outcome; each row is counted under the first rule it fails.
LoadResult parse_cohort(std::string_view csv_text, const FeatureSchema& schema, const LoadOptions& options = {},
                        std::string provenance = {});
LoadResult load_cohort(const std::filesystem::path& path, const FeatureSchema& schema,
                       const LoadOptions& options = {});

/// Writes a table back to the EHR CSV format (empty cell for missing).
std::string to_csv(const CohortTable& table);

/// Inclusive valid ranges per vital column, in native units.
struct VitalRanges {
    std::map<std::string, std::pair<double, double>> ranges;

    /// temperature 30-45 C, spo2 1-100 %, heart_rate 20-300 bpm, systolic_bp 20-240 mmHg.
    static VitalRanges defaults();
    nlohmann::json to_json() const;
    static VitalRanges from_json(const nlohmann::json& j);
};

struct ClipResult {
    CohortTable table;
    std::size_t replaced = 0;
};

/// Out-of-range vital values become missing. Ranges naming a column that exists but is
/// not a vital raise PreconditionError; ranges for absent columns are ignored.
ClipResult clip_vitals(const CohortTable& table, const VitalRanges& ranges);

/// Fitted, persistable preprocessing state.
struct PreprocessPlan {
    static constexpr int kVersion = 1;

    double missing_threshold = 0.5;
    std::vector<std::string> dropped;
    /// Retained feature columns in schema order.
    std::vector<std::pair<std::string, ColumnKind>> features;
    std::map<std::string, double> medians;
    std::map<std::string, std::string> modes;
    std::map<std::string, double> center;
    std::map<std::string, double> spread;
    std::map<std::string, std::vector<std::string>> onehot;

    /// Output column names in matrix order: continuous columns by name, categorical
    /// columns expanded as "name=category".
    std::vector<std::string> output_columns() const;

    nlohmann::json to_json() const;
    static PreprocessPlan from_json(const nlohmann::json& j);
    /// Canonical serialization (sorted keys, shortest round-trip numbers).
    std::string serialize() const;
    static PreprocessPlan parse(std::string_view text);

    friend bool operator==(const PreprocessPlan&, const PreprocessPlan&) = default;
};

PreprocessPlan fit_preprocess(const CohortTable& dev, double missing_threshold = 0.5);

/// Row-aligned numeric design matrix.
struct FeatureMatrix {
    std::vector<std::string> columns;
    Matrix x;
    std::vector<int> labels;  // -1 where the outcome is missing
    std::vector<std::string> ids;
    /// Plan columns absent from the source table, emitted as constant zeros.
    std::vector<std::string> zero_filled;
    std::size_t unseen_categories = 0;

    std::size_t rows() const { return x.rows; }
    std::optional<std::size_t> column_index(std::string_view name) const;
    FeatureMatrix select_rows(const std::vector<std::size_t>& rows) const;

    std::string to_csv() const;
    static FeatureMatrix from_csv(std::string_view text);
};

FeatureMatrix apply_preprocess(const CohortTable& table, const PreprocessPlan& plan);

struct GroupStat {
    std::size_t n = 0;
    double mean = 0.0;
    double sd = 0.0;
};

struct CategoryCount {
    std::string category;
    std::size_t overall = 0;
    std::size_t alive = 0;
    std::size_t expired = 0;
};

struct VariableSummary {
    std::string name;
    ColumnKind kind = ColumnKind::numeric;
    std::size_t missing = 0;
    // continuous
    GroupStat overall, alive, expired;
    // categorical
    std::vector<CategoryCount> categories;
    std::optional<double> statistic;
    std::optional<double> p_value;
    std::string note;
};

/// Characteristics table grouped by outcome (alive = 0, expired = 1).
struct CohortReport {
    std::size_t n = 0;
    std::size_t n_alive = 0;
    std::size_t n_expired = 0;
    std::vector<VariableSummary> variables;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

/// Rows with a missing outcome are ignored. Categorical variables are tested with the
/// chi-square contingency test (Yates-corrected when 2x2), continuous ones with one-way
/// ANOVA. A test that is undefined for a variable leaves its p-value empty.
CohortReport cohort_report(const CohortTable& table);

/// Built-in schema used by the synthetic generator: demographics, 12 comorbidities,
/// laboratory values and four vitals.
FeatureSchema default_schema();

}  // namespace fuseclin::cohort
