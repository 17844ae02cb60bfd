#include "fuseclin/cohort.hpp"

#include "fuseclin/error.hpp"
#include "fuseclin/io.hpp"
#include "fuseclin/stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace fuseclin::cohort {

namespace {

constexpr std::pair<ColumnKind, std::string_view> kKindNames[] = {
    {ColumnKind::categorical, "categorical"}, {ColumnKind::numeric, "numeric"},
    {ColumnKind::vital, "vital"},             {ColumnKind::outcome, "outcome"},
    {ColumnKind::id, "id"},                   {ColumnKind::admission_time, "admission_time"},
};

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

std::optional<double> parse_number(const std::string& cell) {
    double v = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last || !std::isfinite(v)) return std::nullopt;
    return v;
}

bool uses_numbers(ColumnKind k) { return is_continuous(k) || k == ColumnKind::outcome; }

std::string fixed(double v, int precision) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

}  // namespace

std::string_view to_string(ColumnKind kind) {
    for (auto [k, name] : kKindNames)
        if (k == kind) return name;
    return "unknown";
}

ColumnKind parse_column_kind(std::string_view s) {
    for (auto [k, name] : kKindNames)
        if (name == s) return k;
    throw DataError("unknown column kind '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Schema

FeatureSchema::FeatureSchema(std::vector<ColumnSpec> columns) : columns_(std::move(columns)) {
    std::unordered_set<std::string> seen;
    std::optional<std::size_t> id, outcome;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
        const auto& c = columns_[i];
        if (c.name.empty()) throw DataError("schema: empty column name");
        if (!seen.insert(c.name).second) throw DataError("schema: duplicate column name '" + c.name + "'");
        switch (c.kind) {
            case ColumnKind::id:
                if (id) throw DataError("schema: more than one id column");
                id = i;
                break;
            case ColumnKind::outcome:
                if (outcome) throw DataError("schema: more than one outcome column");
                outcome = i;
                break;
            case ColumnKind::admission_time:
                if (admission_index_) throw DataError("schema: more than one admission_time column");
                admission_index_ = i;
                break;
            default:
                break;
        }
    }
    if (!id) throw DataError("schema: no id column");
    if (!outcome) throw DataError("schema: no outcome column");
    id_index_ = *id;
    outcome_index_ = *outcome;
}

std::optional<std::size_t> FeatureSchema::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i)
        if (columns_[i].name == name) return i;
    return std::nullopt;
}

nlohmann::json FeatureSchema::to_json() const {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& c : columns_)
        cols.push_back({{"name", c.name}, {"kind", std::string(to_string(c.kind))}, {"unit", c.unit}});
    return {{"columns", cols}};
}

FeatureSchema FeatureSchema::from_json(const nlohmann::json& j) {
    std::vector<ColumnSpec> cols;
    for (const auto& c : j.at("columns"))
        cols.push_back({c.at("name").get<std::string>(), parse_column_kind(c.at("kind").get<std::string>()),
                        c.value("unit", std::string{})});
    return FeatureSchema(std::move(cols));
}

FeatureSchema default_schema() {
    std::vector<ColumnSpec> cols = {
        {"patient_id", ColumnKind::id, ""},
        {"admission_time", ColumnKind::admission_time, "iso8601"},
        {"sex", ColumnKind::categorical, ""},
        {"age", ColumnKind::numeric, "years"},
    };
    for (const char* name : {"diabetes", "hyperlipidemia", "hypertension", "ischemic_heart_disease",
                             "chronic_kidney_disease", "copd", "asthma", "cancer", "chronic_liver_disease", "stroke",
                             "chf", "dementia"})
        cols.push_back({name, ColumnKind::categorical, "bool"});
    const std::pair<const char*, const char*> labs[] = {
        {"ldh", "U/L"},          {"hemoglobin", "g/dL"},    {"mcv", "fL"},
        {"neutrophil_pct", "%"}, {"neutrophil", "10^3/uL"}, {"lymphocyte_pct", "%"},
        {"lymphocyte", "10^3/uL"}, {"leukocyte", "10^3/uL"}, {"mpv", "fL"},
        {"platelet", "10^3/uL"}, {"crp", "mg/L"},          {"mch", "pg"},
        {"ast", "U/L"},          {"alt", "U/L"},           {"aptt", "s"},
        {"d_dimer", "ng/mL"},    {"prothrombin_activity", "%"}, {"inr", ""},
        {"glucose", "mg/dL"},    {"sodium", "mmol/L"},     {"potassium", "mmol/L"},
        {"bun", "mg/dL"},        {"creatinine", "mg/dL"},  {"ferritin", "ng/mL"},
    };
    for (auto [name, unit] : labs) cols.push_back({name, ColumnKind::numeric, unit});
    cols.push_back({"temperature", ColumnKind::vital, "C"});
    cols.push_back({"spo2", ColumnKind::vital, "%"});
    cols.push_back({"heart_rate", ColumnKind::vital, "bpm"});
    cols.push_back({"systolic_bp", ColumnKind::vital, "mmHg"});
    cols.push_back({"expired_30d", ColumnKind::outcome, "bool"});
    return FeatureSchema(std::move(cols));
}

// ---------------------------------------------------------------------------
// Table

std::size_t CohortTable::rows() const {
    if (columns.empty()) return 0;
    return columns[schema.id_index()].labels.size();
}

const Column* CohortTable::find(std::string_view name) const {
    auto idx = schema.index_of(name);
    return idx ? &columns[*idx] : nullptr;
}

Column* CohortTable::find(std::string_view name) {
    auto idx = schema.index_of(name);
    return idx ? &columns[*idx] : nullptr;
}

std::vector<int> CohortTable::outcomes() const {
    const auto& col = columns[schema.outcome_index()].numbers;
    std::vector<int> out(col.size(), -1);
    for (std::size_t i = 0; i < col.size(); ++i)
        if (col[i]) out[i] = static_cast<int>(*col[i]);
    return out;
}

CohortTable CohortTable::select_rows(const std::vector<std::size_t>& rows) const {
    CohortTable out;
    out.schema = schema;
    out.provenance = provenance;
    out.columns.resize(columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) {
        if (!columns[c].numbers.empty()) out.columns[c].numbers = select(columns[c].numbers, rows);
        if (!columns[c].labels.empty()) out.columns[c].labels = select(columns[c].labels, rows);
    }
    return out;
}

nlohmann::json ExclusionCounts::to_json() const {
    return {{"read", read},
            {"under_age", under_age},
            {"missing_admission", missing_admission},
            {"missing_cxr", missing_cxr},
            {"missing_outcome", missing_outcome},
            {"retained", retained}};
}

LoadResult parse_cohort(std::string_view csv_text, const FeatureSchema& schema, const LoadOptions& options,
                        std::string provenance) {
    io::CsvTable csv = io::parse_csv(csv_text);
    const auto& specs = schema.columns();

    // Map schema columns to file columns; the header must hold exactly the schema names.
    std::vector<std::size_t> file_index(specs.size());
    {
        std::unordered_map<std::string, std::size_t> header;
        for (std::size_t i = 0; i < csv.header.size(); ++i) {
            auto name = trim(csv.header[i]);
            if (!header.emplace(name, i).second) throw DataError("malformed header: duplicate column '" + name + "'");
        }
        for (std::size_t c = 0; c < specs.size(); ++c) {
            auto it = header.find(specs[c].name);
            if (it == header.end()) throw DataError("malformed header: missing column '" + specs[c].name + "'");
            file_index[c] = it->second;
        }
        if (header.size() != specs.size()) {
            for (const auto& [name, idx] : header)
                if (!schema.index_of(name)) throw DataError("malformed header: unexpected column '" + name + "'");
        }
    }

    LoadResult result;
    auto& table = result.table;
    table.schema = schema;
    table.provenance = std::move(provenance);
    table.columns.resize(specs.size());

    const auto age_idx = schema.index_of(options.age_column);
    std::unordered_set<std::string> seen_ids;
    result.excluded.read = csv.rows.size();

    for (std::size_t r = 0; r < csv.rows.size(); ++r) {
        const auto& raw = csv.rows[r];
        std::vector<std::optional<double>> nums(specs.size());
        std::vector<std::optional<std::string>> labels(specs.size());
        for (std::size_t c = 0; c < specs.size(); ++c) {
            std::string cell = trim(raw[file_index[c]]);
            if (cell.empty()) continue;
            if (uses_numbers(specs[c].kind)) {
                auto v = parse_number(cell);
                if (!v)
                    throw DataError("unparseable cell at row " + std::to_string(r + 1) + ", column '" +
                                    specs[c].name + "': '" + cell + "'");
                if (specs[c].kind == ColumnKind::outcome && *v != 0.0 && *v != 1.0)
                    throw DataError("outcome at row " + std::to_string(r + 1) + " must be 0 or 1, found '" + cell +
                                    "'");
                nums[c] = *v;
            } else {
                labels[c] = std::move(cell);
            }
        }

        const auto& id = labels[schema.id_index()];
        if (!id) throw DataError("missing patient id at row " + std::to_string(r + 1));
        if (!seen_ids.insert(*id).second) throw DataError("duplicate patient id '" + *id + "'");

        if (age_idx && nums[*age_idx] && *nums[*age_idx] <= options.max_excluded_age) {
            ++result.excluded.under_age;
            continue;
        }
        if (schema.admission_index() && !labels[*schema.admission_index()]) {
            ++result.excluded.missing_admission;
            continue;
        }
        if (options.ids_with_cxr && !options.ids_with_cxr->contains(*id)) {
            ++result.excluded.missing_cxr;
            continue;
        }
        if (options.require_outcome && !nums[schema.outcome_index()]) {
            ++result.excluded.missing_outcome;
            continue;
        }
        for (std::size_t c = 0; c < specs.size(); ++c) {
            if (uses_numbers(specs[c].kind))
                table.columns[c].numbers.push_back(nums[c]);
            else
                table.columns[c].labels.push_back(std::move(labels[c]));
        }
    }
    result.excluded.retained = table.rows();
    return result;
}

LoadResult load_cohort(const std::filesystem::path& path, const FeatureSchema& schema, const LoadOptions& options) {
    return parse_cohort(io::read_file(path), schema, options, path.string());
}

std::string to_csv(const CohortTable& table) {
    const auto& specs = table.schema.columns();
    std::vector<std::string> header;
    for (const auto& s : specs) header.push_back(s.name);
    std::string out = io::csv_line(header);
    for (std::size_t r = 0; r < table.rows(); ++r) {
        std::vector<std::string> fields;
        for (std::size_t c = 0; c < specs.size(); ++c) {
            const auto& col = table.columns[c];
            if (uses_numbers(specs[c].kind))
                fields.push_back(col.numbers[r] ? io::format_double(*col.numbers[r]) : std::string{});
            else
                fields.push_back(col.labels[r].value_or(std::string{}));
        }
        out += io::csv_line(fields);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Vitals

VitalRanges VitalRanges::defaults() {
    VitalRanges v;
    v.ranges = {{"temperature", {30.0, 45.0}},
                {"spo2", {1.0, 100.0}},
                {"heart_rate", {20.0, 300.0}},
                {"systolic_bp", {20.0, 240.0}}};
    return v;
}

nlohmann::json VitalRanges::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, r] : ranges) j[name] = {r.first, r.second};
    return j;
}

VitalRanges VitalRanges::from_json(const nlohmann::json& j) {
    VitalRanges v;
    for (const auto& [name, r] : j.items()) {
        const double lo = r.at(0).get<double>(), hi = r.at(1).get<double>();
        if (!(lo < hi)) throw DataError("vital range for '" + name + "' must satisfy low < high");
        v.ranges[name] = {lo, hi};
    }
    return v;
}

ClipResult clip_vitals(const CohortTable& table, const VitalRanges& ranges) {
    ClipResult out{table, 0};
    for (const auto& [name, range] : ranges.ranges) {
        auto idx = table.schema.index_of(name);
        if (!idx) continue;
        if (table.schema.columns()[*idx].kind != ColumnKind::vital)
            throw PreconditionError("clip_vitals: range given for non-vital column '" + name + "'");
        for (auto& cell : out.table.columns[*idx].numbers) {
            if (cell && (*cell < range.first || *cell > range.second)) {
                cell.reset();
                ++out.replaced;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Preprocessing plan

std::vector<std::string> PreprocessPlan::output_columns() const {
    std::vector<std::string> out;
    for (const auto& [name, kind] : features) {
        if (kind == ColumnKind::categorical) {
            for (const auto& cat : onehot.at(name)) out.push_back(name + "=" + cat);
        } else {
            out.push_back(name);
        }
    }
    return out;
}

nlohmann::json PreprocessPlan::to_json() const {
    nlohmann::json feats = nlohmann::json::array();
    for (const auto& [name, kind] : features) feats.push_back({name, std::string(to_string(kind))});
    return {{"version", kVersion},        {"missing_threshold", missing_threshold},
            {"dropped", dropped},         {"features", feats},
            {"medians", medians},         {"modes", modes},
            {"scale_center", center},     {"scale_spread", spread},
            {"onehot_categories", onehot}};
}

PreprocessPlan PreprocessPlan::from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != kVersion)
        throw DataError("unsupported preprocess plan version " + j.at("version").dump());
    PreprocessPlan p;
    p.missing_threshold = j.at("missing_threshold").get<double>();
    p.dropped = j.at("dropped").get<std::vector<std::string>>();
    for (const auto& f : j.at("features"))
        p.features.emplace_back(f.at(0).get<std::string>(), parse_column_kind(f.at(1).get<std::string>()));
    p.medians = j.at("medians").get<std::map<std::string, double>>();
    p.modes = j.at("modes").get<std::map<std::string, std::string>>();
    p.center = j.at("scale_center").get<std::map<std::string, double>>();
    p.spread = j.at("scale_spread").get<std::map<std::string, double>>();
    p.onehot = j.at("onehot_categories").get<std::map<std::string, std::vector<std::string>>>();
    for (const auto& [name, kind] : p.features) {
        if (is_continuous(kind) && (!p.center.contains(name) || !p.spread.contains(name) || !p.medians.contains(name)))
            throw DataError("preprocess plan: continuous column '" + name + "' lacks median/center/spread");
        if (kind == ColumnKind::categorical && (!p.onehot.contains(name) || !p.modes.contains(name)))
            throw DataError("preprocess plan: categorical column '" + name + "' lacks categories/mode");
    }
    for (const auto& [name, s] : p.spread)
        if (s < 0) throw DataError("preprocess plan: negative spread for '" + name + "'");
    return p;
}

std::string PreprocessPlan::serialize() const { return to_json().dump(2) + "\n"; }

PreprocessPlan PreprocessPlan::parse(std::string_view text) { return from_json(nlohmann::json::parse(text)); }

PreprocessPlan fit_preprocess(const CohortTable& dev, double missing_threshold) {
    const std::size_t n = dev.rows();
    if (n < 2) throw PreconditionError("fit_preprocess: development table needs at least 2 rows");
    for (int y : dev.outcomes())
        if (y < 0) throw PreconditionError("fit_preprocess: development table has rows without outcome");

    PreprocessPlan plan;
    plan.missing_threshold = missing_threshold;
    const auto& specs = dev.schema.columns();
    for (std::size_t c = 0; c < specs.size(); ++c) {
        const auto& spec = specs[c];
        if (!is_feature(spec.kind)) continue;
        const auto& col = dev.columns[c];

        std::size_t missing = 0;
        if (is_continuous(spec.kind)) {
            for (const auto& v : col.numbers) missing += !v;
        } else {
            for (const auto& v : col.labels) missing += !v;
        }
        if (static_cast<double>(missing) / static_cast<double>(n) > missing_threshold) {
            plan.dropped.push_back(spec.name);
            continue;
        }
        if (missing == n) throw DataError("fit_preprocess: all values missing in retained column '" + spec.name + "'");

        if (is_continuous(spec.kind)) {
            std::vector<double> observed;
            for (const auto& v : col.numbers)
                if (v) observed.push_back(*v);
            if (observed.size() < 2)
                throw DataError("fit_preprocess: column '" + spec.name + "' has fewer than 2 observed values");
            const double med = stats::percentile(observed, 50.0);
            plan.medians[spec.name] = med;
            plan.center[spec.name] = med;
            plan.spread[spec.name] = stats::percentile(observed, 75.0) - stats::percentile(observed, 25.0);
        } else {
            std::map<std::string, std::size_t> counts;
            for (const auto& v : col.labels)
                if (v) ++counts[*v];
            std::vector<std::string> cats;
            std::string mode;
            std::size_t best = 0;
            for (const auto& [cat, count] : counts) {  // map order: ties resolve to the smallest label
                cats.push_back(cat);
                if (count > best) {
                    best = count;
                    mode = cat;
                }
            }
            plan.modes[spec.name] = mode;
            plan.onehot[spec.name] = std::move(cats);
        }
        plan.features.emplace_back(spec.name, spec.kind);
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Feature matrix

std::optional<std::size_t> FeatureMatrix::column_index(std::string_view name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i] == name) return i;
    return std::nullopt;
}

FeatureMatrix FeatureMatrix::select_rows(const std::vector<std::size_t>& rows) const {
    FeatureMatrix out;
    out.columns = columns;
    out.x = x.select_rows(rows);
    out.labels = select(labels, rows);
    out.ids = select(ids, rows);
    out.zero_filled = zero_filled;
    out.unseen_categories = unseen_categories;
    return out;
}

std::string FeatureMatrix::to_csv() const {
    std::vector<std::string> header = {"id", "label"};
    header.insert(header.end(), columns.begin(), columns.end());
    std::string out = io::csv_line(header);
    for (std::size_t r = 0; r < rows(); ++r) {
        std::vector<std::string> fields = {ids[r], std::to_string(labels[r])};
        for (double v : x.row(r)) fields.push_back(io::format_double(v));
        out += io::csv_line(fields);
    }
    return out;
}

FeatureMatrix FeatureMatrix::from_csv(std::string_view text) {
    auto csv = io::parse_csv(text);
    if (csv.header.size() < 2 || csv.header[0] != "id" || csv.header[1] != "label")
        throw DataError("feature matrix csv: header must start with id,label");
    FeatureMatrix m;
    m.columns.assign(csv.header.begin() + 2, csv.header.end());
    m.x = Matrix(csv.rows.size(), m.columns.size());
    for (std::size_t r = 0; r < csv.rows.size(); ++r) {
        m.ids.push_back(csv.rows[r][0]);
        auto label = parse_number(csv.rows[r][1]);
        if (!label) throw DataError("feature matrix csv: bad label at row " + std::to_string(r + 1));
        m.labels.push_back(static_cast<int>(*label));
        for (std::size_t c = 0; c < m.columns.size(); ++c) {
            auto v = parse_number(csv.rows[r][c + 2]);
            if (!v) throw DataError("feature matrix csv: bad value at row " + std::to_string(r + 1));
            m.x(r, c) = *v;
        }
    }
    return m;
}

FeatureMatrix apply_preprocess(const CohortTable& table, const PreprocessPlan& plan) {
    const std::size_t n = table.rows();
    FeatureMatrix out;
    out.columns = plan.output_columns();
    out.x = Matrix(n, out.columns.size());
    out.labels = table.outcomes();
    {
        std::unordered_set<std::string> seen;
        for (std::size_t r = 0; r < n; ++r) {
            auto id = table.id(r);
            if (!seen.insert(id).second) throw DataError("apply_preprocess: id collision '" + id + "'");
            out.ids.push_back(std::move(id));
        }
    }

    std::size_t col = 0;
    for (const auto& [name, kind] : plan.features) {
        const auto idx = table.schema.index_of(name);
        if (idx) {
            const ColumnKind actual = table.schema.columns()[*idx].kind;
            const bool compatible = kind == ColumnKind::categorical ? actual == ColumnKind::categorical
                                                                    : is_continuous(actual);
            if (!compatible)
                throw DataError("apply_preprocess: plan/schema kind mismatch for '" + name + "' (plan " +
                                std::string(to_string(kind)) + ", table " + std::string(to_string(actual)) + ")");
        } else {
            out.zero_filled.push_back(name);
        }

        if (kind == ColumnKind::categorical) {
            const auto& cats = plan.onehot.at(name);
            if (idx) {
                const auto& mode = plan.modes.at(name);
                const auto& labels = table.columns[*idx].labels;
                for (std::size_t r = 0; r < n; ++r) {
                    const std::string& value = labels[r] ? *labels[r] : mode;
                    auto it = std::find(cats.begin(), cats.end(), value);
                    if (it == cats.end()) {
                        ++out.unseen_categories;
                        continue;
                    }
                    out.x(r, col + static_cast<std::size_t>(it - cats.begin())) = 1.0;
                }
            }
            col += cats.size();
        } else {
            if (idx) {
                const double median = plan.medians.at(name);
                const double center = plan.center.at(name);
                const double spread = plan.spread.at(name);
                const auto& values = table.columns[*idx].numbers;
                for (std::size_t r = 0; r < n; ++r) {
                    const double v = values[r] ? *values[r] : median;
                    out.x(r, col) = spread > 0.0 ? (v - center) / spread : 0.0;
                }
            }
            ++col;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cohort report

namespace {

GroupStat group_stat(const std::vector<double>& v) {
    return {v.size(), v.empty() ? 0.0 : stats::mean(v), stats::sample_sd(v)};
}

}  // namespace

CohortReport cohort_report(const CohortTable& table) {
    CohortReport report;
    const auto outcomes = table.outcomes();
    for (int y : outcomes) {
        if (y < 0) continue;
        ++report.n;
        (y == 1 ? report.n_expired : report.n_alive) += 1;
    }
    const bool testable = report.n_alive > 0 && report.n_expired > 0;
    if (!testable) report.warnings.push_back("single-class table: p-values omitted");

    const auto& specs = table.schema.columns();
    for (std::size_t c = 0; c < specs.size(); ++c) {
        const auto& spec = specs[c];
        if (!is_feature(spec.kind)) continue;
        VariableSummary var;
        var.name = spec.name;
        var.kind = spec.kind;
        const auto& col = table.columns[c];

        if (is_continuous(spec.kind)) {
            std::vector<double> all, alive, expired;
            for (std::size_t r = 0; r < outcomes.size(); ++r) {
                if (outcomes[r] < 0) continue;
                if (!col.numbers[r]) {
                    ++var.missing;
                    continue;
                }
                all.push_back(*col.numbers[r]);
                (outcomes[r] == 1 ? expired : alive).push_back(*col.numbers[r]);
            }
            var.overall = group_stat(all);
            var.alive = group_stat(alive);
            var.expired = group_stat(expired);
            if (testable) {
                if (alive.size() < 2 || expired.size() < 2) {
                    var.note = "group with fewer than two observations";
                    report.warnings.push_back(spec.name + ": " + var.note + ", p-value omitted");
                } else {
                    try {
                        auto res = stats::anova_oneway({alive, expired});
                        var.p_value = res.p_value;
                        if (res.infinite)
                            var.note = "zero within-group variance, infinite F";
                        else
                            var.statistic = res.f;
                    } catch (const PreconditionError& e) {
                        var.note = "constant in both groups";
                    }
                }
            }
        } else {
            std::map<std::string, CategoryCount> counts;
            std::size_t obs_alive = 0, obs_expired = 0;
            for (std::size_t r = 0; r < outcomes.size(); ++r) {
                if (outcomes[r] < 0) continue;
                if (!col.labels[r]) {
                    ++var.missing;
                    continue;
                }
                auto& cc = counts[*col.labels[r]];
                cc.category = *col.labels[r];
                ++cc.overall;
                if (outcomes[r] == 1) {
                    ++cc.expired;
                    ++obs_expired;
                } else {
                    ++cc.alive;
                    ++obs_alive;
                }
            }
            std::vector<std::vector<double>> contingency;
            for (auto& [cat, cc] : counts) {
                contingency.push_back({static_cast<double>(cc.alive), static_cast<double>(cc.expired)});
                var.categories.push_back(cc);
            }
            if (testable) {
                if (obs_alive == 0 || obs_expired == 0) {
                    var.note = "not observed in one outcome group";
                } else if (contingency.size() < 2) {
                    var.note = "single category";
                } else {
                    try {
                        auto res = stats::chi2_contingency(contingency);
                        var.statistic = res.statistic;
                        var.p_value = res.p_value;
                    } catch (const PreconditionError&) {
                        var.note = "zero marginal";
                    }
                }
            }
        }
        report.variables.push_back(std::move(var));
    }
    return report;
}

nlohmann::json CohortReport::to_json() const {
    auto stat_json = [](const GroupStat& g) { return nlohmann::json{{"n", g.n}, {"mean", g.mean}, {"sd", g.sd}}; };
    nlohmann::json vars = nlohmann::json::array();
    for (const auto& v : variables) {
        nlohmann::json j = {{"name", v.name}, {"kind", std::string(to_string(v.kind))}, {"missing", v.missing}};
        if (is_continuous(v.kind)) {
            j["overall"] = stat_json(v.overall);
            j["alive"] = stat_json(v.alive);
            j["expired"] = stat_json(v.expired);
        } else {
            nlohmann::json cats = nlohmann::json::array();
            for (const auto& c : v.categories)
                cats.push_back({{"category", c.category},
                                {"overall", c.overall},
                                {"alive", c.alive},
                                {"expired", c.expired}});
            j["categories"] = cats;
        }
        j["statistic"] = v.statistic ? nlohmann::json(*v.statistic) : nlohmann::json(nullptr);
        j["p_value"] = v.p_value ? nlohmann::json(*v.p_value) : nlohmann::json(nullptr);
        if (!v.note.empty()) j["note"] = v.note;
        vars.push_back(std::move(j));
    }
    return {{"n", n}, {"n_alive", n_alive}, {"n_expired", n_expired}, {"variables", vars}, {"warnings", warnings}};
}

std::string CohortReport::to_text() const {
    std::ostringstream os;
    auto pcell = [](const std::optional<double>& p) -> std::string {
        if (!p) return "-";
        if (*p < 0.001) return "<0.001";
        return fixed(*p, 3);
    };
    auto pct = [](std::size_t k, std::size_t n) { return n ? fixed(100.0 * static_cast<double>(k) / n, 1) : "0.0"; };
    os << std::left << std::setw(34) << "Variable" << std::setw(9) << "Missing" << std::setw(20) << "Overall"
       << std::setw(20) << "Alive" << std::setw(20) << "Expired" << "P-Value\n";
    os << std::setw(34) << "n" << std::setw(9) << "" << std::setw(20) << n << std::setw(20) << n_alive
       << std::setw(20) << n_expired << "\n";
    for (const auto& v : variables) {
        if (is_continuous(v.kind)) {
            auto ms = [](const GroupStat& g) { return fixed(g.mean, 1) + " (" + fixed(g.sd, 1) + ")"; };
            os << std::setw(34) << (v.name + ", mean (SD)") << std::setw(9) << v.missing << std::setw(20)
               << ms(v.overall) << std::setw(20) << ms(v.alive) << std::setw(20) << ms(v.expired) << pcell(v.p_value)
               << "\n";
        } else {
            std::size_t tot = 0, ta = 0, te = 0;
            for (const auto& c : v.categories) {
                tot += c.overall;
                ta += c.alive;
                te += c.expired;
            }
            bool first = true;
            for (const auto& c : v.categories) {
                os << std::setw(34) << (first ? v.name + ", n (%) " + c.category : "  " + c.category) << std::setw(9)
                   << (first ? std::to_string(v.missing) : "") << std::setw(20)
                   << (std::to_string(c.overall) + " (" + pct(c.overall, tot) + ")") << std::setw(20)
                   << (std::to_string(c.alive) + " (" + pct(c.alive, ta) + ")") << std::setw(20)
                   << (std::to_string(c.expired) + " (" + pct(c.expired, te) + ")")
                   << (first ? pcell(v.p_value) : "") << "\n";
                first = false;
            }
        }
    }
    for (const auto& w : warnings) os << "warning: " << w << "\n";
    return os.str();
}

}  // namespace fuseclin::cohort
