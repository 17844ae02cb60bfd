#include "fuseclin/pipeline.hpp"

#include "fuseclin/attribution.hpp"
#include "fuseclin/error.hpp"
#include "fuseclin/evaluation.hpp"
#include "fuseclin/fusion.hpp"
#include "fuseclin/image_io.hpp"
#include "fuseclin/io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

namespace fuseclin::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";
const std::vector<std::string> kModels = {"ehr", "cxr", "fusion"};

std::uint64_t site_seed(std::uint64_t global, const std::string& name) {
    return Rng(global).derive("site:" + name).key();
}

json load_json(const fs::path& p) {
    try {
        return json::parse(io::read_file(p));
    } catch (const json::parse_error& e) {
        throw DataError(p.string() + ": " + e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

DataPaths DataPaths::under(const fs::path& dir) { return {dir / "ehr.csv", dir / "images", dir / "bboxes"}; }

json DataPaths::to_json() const {
    return {{"ehr", ehr.generic_string()}, {"images", images.generic_string()}, {"bboxes", bboxes.generic_string()}};
}

DataPaths DataPaths::from_json(const json& j) {
    DataPaths d;
    if (j.contains("dir")) d = under(j.at("dir").get<std::string>());
    if (j.contains("ehr")) d.ehr = j.at("ehr").get<std::string>();
    if (j.contains("images")) d.images = j.at("images").get<std::string>();
    if (j.contains("bboxes")) d.bboxes = j.at("bboxes").get<std::string>();
    if (d.ehr.empty()) throw PreconditionError("data paths need 'ehr' (or 'dir')");
    return d;
}

PipelineConfig PipelineConfig::from_json(const json& j) {
    static const std::set<std::string> known = {"seed",       "out",    "schema",     "data",      "sites",
                                                "synth",      "preprocess", "search", "cxr",       "evaluation",
                                                "explain"};
    if (!j.is_object()) throw PreconditionError("config must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) throw PreconditionError("unknown config key '" + key + "'");

    PipelineConfig c;
    c.seed = j.value("seed", c.seed);
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    if (j.contains("schema")) c.schema = fs::path(j.at("schema").get<std::string>());
    if (j.contains("data")) c.data = DataPaths::from_json(j.at("data"));
    if (j.contains("sites"))
        for (const auto& [name, v] : j.at("sites").items()) c.sites[name] = DataPaths::from_json(v);

    if (j.contains("synth")) {
        json s = j.at("synth");
        json site_list = s.contains("sites") ? s.at("sites") : json::array();
        s.erase("sites");
        c.synth_seed_explicit = s.contains("seed");
        if (!c.synth_seed_explicit) s["seed"] = c.seed;
        c.synth = synth::SynthSpec::from_json(s);
        for (const auto& site : site_list) {
            SynthSite ss;
            ss.name = site.at("name").get<std::string>();
            if (ss.name.empty() || ss.name == "dev" || ss.name.find('/') != std::string::npos)
                throw PreconditionError("invalid synthetic site name '" + ss.name + "'");
            json spec = c.synth.to_json();
            spec["id_prefix"] = ss.name;
            for (const auto& [k, v] : site.items())
                if (k != "name") spec[k] = v;
            ss.seed_explicit = site.contains("seed");
            if (!ss.seed_explicit) spec["seed"] = site_seed(c.seed, ss.name);
            ss.spec = synth::SynthSpec::from_json(spec);
            c.synth_sites.push_back(std::move(ss));
        }
    } else {
        c.synth.seed = c.seed;
    }

    if (j.contains("preprocess")) {
        const auto& p = j.at("preprocess");
        c.missing_threshold = p.value("missing_threshold", c.missing_threshold);
        if (p.contains("vital_ranges")) c.vital_ranges = cohort::VitalRanges::from_json(p.at("vital_ranges"));
        c.folds = p.value("folds", c.folds);
        if (c.folds < 2) throw PreconditionError("preprocess.folds must be at least 2");
    }
    if (j.contains("search")) {
        const auto& s = j.at("search");
        if (s.contains("space")) c.space = tabular::HyperSpace::from_json(s.at("space"));
        c.n_iter = s.value("n_iter", c.n_iter);
        c.floor = s.value("floor", c.floor);
        if (s.contains("threshold")) c.threshold = tabular::ThresholdPolicy::from_json(s.at("threshold"));
        if (c.n_iter < 1) throw PreconditionError("search.n_iter must be positive");
    }
    c.train.seed = c.seed;
    if (j.contains("cxr")) {
        const auto& x = j.at("cxr");
        c.extractor = x.value("extractor", c.extractor);
        if (c.extractor != "reference" && c.extractor != "teacher")
            throw PreconditionError("cxr.extractor must be 'reference' or 'teacher'");
        if (x.contains("input")) {
            const auto in = x.at("input").get<std::array<int, 2>>();
            c.input = {in[0], in[1]};
        }
        if (x.contains("teacher_weights")) c.teacher_weights = fs::path(x.at("teacher_weights").get<std::string>());
        if (x.contains("head")) c.head = cxrnet::HeadConfig::from_json(x.at("head"));
        if (x.contains("train")) {
            json t = x.at("train");
            if (!t.contains("seed")) t["seed"] = c.seed;
            c.train = cxrnet::TrainConfig::from_json(t);
        }
    }
    if (j.contains("evaluation")) {
        const auto& e = j.at("evaluation");
        c.bootstrap = e.value("bootstrap", c.bootstrap);
        if (e.contains("sites")) c.evaluate_sites = e.at("sites").get<std::vector<std::string>>();
        c.stratum = e.value("stratum", c.stratum);
    }
    if (j.contains("explain")) {
        const auto& e = j.at("explain");
        c.explain.background = e.value("background", c.explain.background);
        c.explain.exact_limit = e.value("exact_limit", c.explain.exact_limit);
        c.explain.n_permutations = e.value("n_permutations", c.explain.n_permutations);
        c.explain.max_rows = e.value("max_rows", c.explain.max_rows);
        c.explain.gradcam_threshold = e.value("gradcam_threshold", c.explain.gradcam_threshold);
    }
    return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
    if (!fs::exists(path)) throw PreconditionError("config file not found: " + path.string());
    return from_json(load_json(path));
}

json PipelineConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["out"] = out.generic_string();
    if (schema) j["schema"] = schema->generic_string();
    if (data) j["data"] = data->to_json();
    j["sites"] = json::object();
    for (const auto& [name, d] : sites) j["sites"][name] = d.to_json();
    json s = synth.to_json();
    s["sites"] = json::array();
    for (const auto& site : synth_sites) {
        json e = site.spec.to_json();
        e["name"] = site.name;
        s["sites"].push_back(std::move(e));
    }
    j["synth"] = std::move(s);
    j["preprocess"] = {{"missing_threshold", missing_threshold},
                       {"vital_ranges", vital_ranges.to_json()},
                       {"folds", folds}};
    j["search"] = {{"space", space.to_json()}, {"n_iter", n_iter}, {"floor", floor}, {"threshold", threshold.to_json()}};
    j["cxr"] = {{"extractor", extractor},
                {"input", {input.height, input.width}},
                {"head", head.to_json()},
                {"train", train.to_json()}};
    if (teacher_weights) j["cxr"]["teacher_weights"] = teacher_weights->generic_string();
    j["evaluation"] = {{"bootstrap", bootstrap}, {"sites", evaluate_sites}, {"stratum", stratum}};
    j["explain"] = {{"background", explain.background},
                    {"exact_limit", explain.exact_limit},
                    {"n_permutations", explain.n_permutations},
                    {"max_rows", explain.max_rows},
                    {"gradcam_threshold", explain.gradcam_threshold}};
    return j;
}

void PipelineConfig::set_seed(std::uint64_t s) {
    seed = s;
    if (!synth_seed_explicit) synth.seed = s;
    for (auto& site : synth_sites)
        if (!site.seed_explicit) site.spec.seed = site_seed(s, site.name);
    train.seed = s;
}

DataPaths PipelineConfig::dev_paths() const { return data ? *data : DataPaths::under(out / "data" / "dev"); }

DataPaths PipelineConfig::site_paths(const std::string& name) const {
    if (auto it = sites.find(name); it != sites.end()) return it->second;
    for (const auto& s : synth_sites)
        if (s.name == name) return DataPaths::under(out / "data" / name);
    throw PreconditionError("unknown site '" + name + "'");
}

std::vector<std::string> PipelineConfig::site_names() const {
    if (!evaluate_sites.empty()) return evaluate_sites;
    std::vector<std::string> names;
    for (const auto& [name, _] : sites) names.push_back(name);
    for (const auto& s : synth_sites)
        if (!sites.contains(s.name)) names.push_back(s.name);
    return names;
}

cohort::FeatureSchema PipelineConfig::feature_schema() const {
    if (!schema) return cohort::default_schema();
    if (!fs::exists(*schema)) throw PreconditionError("schema file not found: " + schema->string());
    return cohort::FeatureSchema::from_json(load_json(*schema));
}

// ---------------------------------------------------------------------------
// Stage plumbing

namespace {

class Stage {
public:
    Stage(std::string name, const PipelineConfig& cfg) : cfg_(cfg), out_(cfg.out) { result_.stage = std::move(name); }

    const PipelineConfig& cfg() const { return cfg_; }
    const fs::path& out() const { return out_; }
    StageResult& result() { return result_; }

    fs::path path(const fs::path& rel) const { return out_ / rel; }

    void write(const fs::path& rel, std::string_view content) {
        io::write_file_atomic(out_ / rel, content);
        record(rel);
    }
    void write_json(const fs::path& rel, const json& j) { write(rel, j.dump(2) + "\n"); }
    void record(const fs::path& rel) { result_.artifacts.push_back(rel); }
    void warn(std::string w) { result_.warnings.push_back(std::move(w)); }

    /// Upstream artifact `rel`, produced by `stage`.
    fs::path require(const fs::path& rel, const std::string& stage) const {
        const auto p = out_ / rel;
        if (!fs::exists(p))
            throw PreconditionError("missing " + rel.generic_string() + "; run `fuseclin " + stage + "` first");
        return p;
    }
    json require_json(const fs::path& rel, const std::string& stage) const { return load_json(require(rel, stage)); }
    std::string require_text(const fs::path& rel, const std::string& stage) const {
        return io::read_file(require(rel, stage));
    }

private:
    const PipelineConfig& cfg_;
    fs::path out_;
    StageResult result_;
};

std::string plan_hash(const Stage& st) { return io::sha256_file(st.require("plan.json", "preprocess")); }

/// Image ids available under a directory (file stems of .png/.jpg/.jpeg files).
std::map<std::string, fs::path> list_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw PreconditionError("image directory not found: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") continue;
        const auto id = e.path().stem().string();
        if (out.contains(id)) throw DataError("two images for patient '" + id + "' in " + dir.string());
        out[id] = e.path();
    }
    return out;
}

cohort::LoadResult load_dataset(const DataPaths& paths, const cohort::FeatureSchema& schema,
                                const std::map<std::string, fs::path>& images, const std::string& missing_hint) {
    if (!fs::exists(paths.ehr))
        throw PreconditionError("EHR file not found: " + paths.ehr.string() + missing_hint);
    cohort::LoadOptions opt;
    std::set<std::string> ids;
    for (const auto& [id, _] : images) ids.insert(id);
    opt.ids_with_cxr = std::move(ids);
    return cohort::load_cohort(paths.ehr, schema, opt);
}

/// Per-row value of `key` as text ("" when missing).
std::vector<std::string> stratum_values(const cohort::CohortTable& table, const std::vector<std::string>& ids,
                                        const std::string& key) {
    const auto idx = table.schema.index_of(key);
    if (!idx) throw PreconditionError("stratum column '" + key + "' is not in the schema");
    std::map<std::string, std::size_t> row_of;
    for (std::size_t r = 0; r < table.rows(); ++r) row_of[table.id(r)] = r;
    const auto& col = table.columns[*idx];
    const bool numeric = cohort::is_continuous(table.schema.columns()[*idx].kind) ||
                         table.schema.columns()[*idx].kind == cohort::ColumnKind::outcome;
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = row_of.find(id);
        if (it == row_of.end()) throw DataError("no cohort row for id '" + id + "'");
        if (numeric) {
            const auto& v = col.numbers[it->second];
            out.push_back(v ? io::format_double(*v) : "");
        } else {
            const auto& v = col.labels[it->second];
            out.push_back(v ? *v : "");
        }
    }
    return out;
}

cohort::CohortTable load_dev_table(const Stage& st) {
    cohort::LoadOptions opt;
    opt.max_excluded_age = -std::numeric_limits<double>::infinity();
    return cohort::load_cohort(st.require("cohort_dev.csv", "preprocess"), st.cfg().feature_schema(), opt).table;
}

/// Development features, checked against the current plan and fold assignment.
struct DevData {
    cohort::FeatureMatrix features;
    tabular::FoldAssignment folds;
    std::string plan_sha256;
};

DevData load_dev(const Stage& st) {
    DevData d;
    d.plan_sha256 = plan_hash(st);
    const auto meta = st.require_json("features_dev.json", "preprocess");
    if (meta.at("plan_sha256").get<std::string>() != d.plan_sha256)
        throw PreconditionError("features_dev.csv was built from a different plan.json; rerun `fuseclin preprocess`");
    d.features = cohort::FeatureMatrix::from_csv(st.require_text("features_dev.csv", "preprocess"));
    const auto fj = st.require_json("folds.json", "preprocess");
    d.folds = tabular::FoldAssignment::from_json(fj);
    if (fj.at("ids").get<std::vector<std::string>>() != d.features.ids)
        throw PreconditionError("folds.json does not match features_dev.csv; rerun `fuseclin preprocess`");
    for (int y : d.features.labels)
        if (y != 0 && y != 1) throw DataError("development features contain a row without an outcome");
    return d;
}

std::unique_ptr<cxrnet::FeatureExtractor> make_extractor(const PipelineConfig& cfg) {
    if (cfg.extractor == "reference") return std::make_unique<cxrnet::ReferencePatchExtractor>(cfg.input);
    if (!cfg.teacher_weights)
        throw PreconditionError("cxr.extractor 'teacher' needs cxr.teacher_weights (a conv extractor JSON)");
    if (!fs::exists(*cfg.teacher_weights))
        throw PreconditionError("teacher weights not found: " + cfg.teacher_weights->string());
    auto ext = cxrnet::extractor_from_json(load_json(*cfg.teacher_weights));
    if (!(ext->input_size() == cfg.input))
        throw PreconditionError("teacher weights expect a different input size than cxr.input");
    return ext;
}

evaluation::PredictionSet make_predictions(const std::vector<std::string>& ids, const std::vector<int>& labels,
                                           const std::vector<double>& scores, double threshold,
                                           std::vector<std::string> provenance, const std::string& stratum,
                                           std::vector<std::string> strata) {
    evaluation::PredictionSet p;
    p.ids = ids;
    p.labels = labels;
    p.scores = scores;
    p.threshold = threshold;
    p.provenance = std::move(provenance);
    p.strata[stratum] = std::move(strata);
    p.validate();
    return p;
}

std::vector<std::string> fold_provenance(const tabular::FoldAssignment& folds) {
    std::vector<std::string> out;
    out.reserve(folds.fold.size());
    for (int f : folds.fold) out.push_back("fold:" + std::to_string(f));
    return out;
}

void write_predictions(Stage& st, const std::string& name, const evaluation::PredictionSet& p, json meta) {
    st.write(fs::path("predictions") / (name + ".csv"), p.to_csv());
    meta["threshold"] = p.threshold;
    meta["seed"] = st.cfg().seed;
    st.write_json(fs::path("predictions") / (name + ".json"), meta);
}

evaluation::PredictionSet read_predictions(const Stage& st, const std::string& name, const std::string& stage) {
    const auto meta = st.require_json(fs::path("predictions") / (name + ".json"), stage);
    return evaluation::PredictionSet::from_csv(st.require_text(fs::path("predictions") / (name + ".csv"), stage),
                                               meta.at("threshold").get<double>());
}

tabular::TrainedModel load_model(const Stage& st, const fs::path& rel, const std::string& stage) {
    return tabular::TrainedModel::from_json(st.require_json(rel, stage));
}

json search_json(const tabular::CVRun& run, const PipelineConfig& cfg) {
    json j = run.search.to_json();
    j["n_iter"] = cfg.n_iter;
    j["space"] = cfg.space.to_json();
    j["fold_thresholds"] = run.fold_thresholds;
    j["threshold"] = run.model.threshold;
    j["seed"] = cfg.seed;
    return j;
}

// ---------------------------------------------------------------------------
// Stages

void stage_synth(Stage& st) {
    const auto& cfg = st.cfg();
    auto write_site = [&](const synth::SynthSpec& spec, const std::string& name) {
        const auto dir = fs::path("data") / name;
        const auto cohort = synth::generate_cohort(spec);
        for (const auto& p : synth::write_cohort(cohort, st.path(dir))) st.record(fs::relative(p, st.out()));
    };
    write_site(cfg.synth, "dev");
    for (const auto& site : cfg.synth_sites) write_site(site.spec, site.name);
    if (cfg.data) st.warn("config.data is set: the development set is read from there, not from data/dev");
}

void stage_preprocess(Stage& st) {
    const auto& cfg = st.cfg();
    const auto schema = cfg.feature_schema();
    const auto paths = cfg.dev_paths();
    const std::string hint = cfg.data ? "" : "; run `fuseclin synth` first";
    if (!fs::exists(paths.ehr)) throw PreconditionError("missing " + paths.ehr.string() + hint);
    const auto images = list_images(paths.images);
    auto loaded = load_dataset(paths, schema, images, hint);
    auto clipped = cohort::clip_vitals(loaded.table, cfg.vital_ranges);
    const auto& table = clipped.table;
    if (table.rows() < static_cast<std::size_t>(cfg.folds))
        throw DataError("too few retained rows for " + std::to_string(cfg.folds) + " folds");

    const auto plan = cohort::fit_preprocess(table, cfg.missing_threshold);
    const auto features = cohort::apply_preprocess(table, plan);
    const auto folds = tabular::make_stratified_folds(features.labels, cfg.folds, cfg.seed);

    st.write("plan.json", plan.serialize());
    const auto plan_sha = io::sha256_file(st.path("plan.json"));
    json fj = folds.to_json();
    fj["ids"] = features.ids;
    fj["positives_per_fold"] = folds.positives_per_fold(features.labels);
    st.write_json("folds.json", fj);
    json ex = loaded.excluded.to_json();
    ex["source"] = paths.ehr.generic_string();
    st.write_json("exclusions.json", ex);
    st.write_json("vital_clipping.json", {{"replaced", clipped.replaced}, {"ranges", cfg.vital_ranges.to_json()}});
    st.write("cohort_dev.csv", cohort::to_csv(table));
    st.write("features_dev.csv", features.to_csv());
    st.write_json("features_dev.json", {{"plan_sha256", plan_sha},
                                        {"rows", features.rows()},
                                        {"columns", features.columns},
                                        {"dropped", plan.dropped},
                                        {"seed", cfg.seed}});

    std::vector<imaging::ImageRecord> records;
    records.reserve(features.ids.size());
    for (const auto& id : features.ids) {
        imaging::ImageRecord rec;
        rec.patient_id = id;
        rec.image = imaging::read_image(images.at(id));
        const auto box_path = paths.bboxes / (id + ".json");
        if (!fs::exists(box_path)) throw DataError("missing bounding boxes for patient '" + id + "'");
        rec.boxes = imaging::BBoxSet::from_json(load_json(box_path));
        records.push_back(std::move(rec));
    }
    const auto store = imaging::precompute_variants(records, cfg.seed);
    for (const auto& p : store.save(st.path("store"))) st.record(fs::relative(p, st.out()));
    if (clipped.replaced > 0)
        st.warn(std::to_string(clipped.replaced) + " out-of-range vital values replaced with missing");
}

void stage_report(Stage& st) {
    const auto report = cohort::cohort_report(load_dev_table(st));
    json j = report.to_json();
    j["exclusions"] = st.require_json("exclusions.json", "preprocess");
    st.write_json("report.json", j);
    st.write("report.txt", report.to_text());
    for (const auto& w : report.warnings) st.warn(w);
}

void stage_train_ehr(Stage& st) {
    const auto& cfg = st.cfg();
    const auto dev = load_dev(st);
    const auto& f = dev.features;
    auto run = tabular::cross_validated_fit(f.x, f.labels, f.columns, dev.folds, cfg.space, cfg.n_iter, cfg.seed,
                                            cfg.floor, cfg.threshold);
    st.write_json("models/ehr_model.json", run.model.to_json());
    st.write_json("models/ehr_meta.json", {{"plan_sha256", dev.plan_sha256}, {"seed", cfg.seed}});
    st.write_json("search_ehr.json", search_json(run, cfg));
    const auto table = load_dev_table(st);
    const auto preds = make_predictions(f.ids, f.labels, run.oof_scores, run.model.threshold,
                                        fold_provenance(dev.folds), cfg.stratum,
                                        stratum_values(table, f.ids, cfg.stratum));
    write_predictions(st, "oof_ehr", preds, {{"model", "models/ehr_model.json"}, {"out_of_fold", true}});
    if (run.search.floor_warning)
        st.warn("EHR search: no configuration cleared the per-fold F1 floor of " + io::format_double(cfg.floor));
}

void stage_train_cxr(Stage& st) {
    const auto& cfg = st.cfg();
    const auto dev = load_dev(st);
    const auto& f = dev.features;
    st.require("store/index.json", "preprocess");
    const auto store = imaging::ImageStore::load(st.path("store"));
    const auto extractor = make_extractor(cfg);
    std::map<std::string, int> labels;
    for (std::size_t i = 0; i < f.ids.size(); ++i) labels[f.ids[i]] = f.labels[i];

    const Rng root(cfg.seed);
    fusion::ProbabilityMap oof, final_probs;
    std::vector<double> oof_scores(f.ids.size());
    double epoch_sum = 0.0;
    for (int k = 0; k < dev.folds.k; ++k) {
        cxrnet::FoldSplit split;
        for (auto i : dev.folds.train_indices(k)) split.train_ids.push_back(f.ids[i]);
        const auto valid = dev.folds.valid_indices(k);
        for (auto i : valid) split.valid_ids.push_back(f.ids[i]);
        auto tc = cfg.train;
        tc.seed = root.derive("cxr-fold:" + std::to_string(k)).key();
        const auto model = cxrnet::train_cxr(store, labels, *extractor, cfg.head, tc, split);
        for (auto i : valid) {
            const double p = cxrnet::predict_cxr(model, store.at(f.ids[i]).view(imaging::AugmentVariant::original));
            oof[f.ids[i]] = {p, k};
            oof_scores[i] = p;
        }
        epoch_sum += model.best_epoch + 1;
        const auto tag = "fold" + std::to_string(k);
        st.write_json("models/cxr_" + tag + ".json", model.to_json());
        st.write("history/cxr_" + tag + ".csv", model.history_csv());
    }

    // Full-data model: every development row, for the mean best epoch count of the folds.
    const int epochs = std::max(1, static_cast<int>(std::lround(epoch_sum / dev.folds.k)));
    auto tc = cfg.train;
    tc.seed = root.derive("cxr-final").key();
    tc.max_epochs = epochs;
    tc.patience = epochs;
    cxrnet::FoldSplit all{f.ids, f.ids};
    const auto final_model = cxrnet::train_cxr(store, labels, *extractor, cfg.head, tc, all);
    for (const auto& id : f.ids)
        final_probs[id] = {cxrnet::predict_cxr(final_model, store.at(id).view(imaging::AugmentVariant::original)),
                           -1};
    st.write_json("models/cxr_final.json", final_model.to_json());
    st.write("history/cxr_final.csv", final_model.history_csv());

    const double threshold = tabular::select_threshold(oof_scores, f.labels, cfg.threshold);
    st.write_json("cxr_probabilities.json", {{"threshold", threshold},
                                             {"final_epochs", epochs},
                                             {"plan_sha256", dev.plan_sha256},
                                             {"seed", cfg.seed},
                                             {"oof", fusion::provenance_json(oof)},
                                             {"final", fusion::provenance_json(final_probs)}});
    const auto table = load_dev_table(st);
    const auto preds = make_predictions(f.ids, f.labels, oof_scores, threshold, fold_provenance(dev.folds),
                                        cfg.stratum, stratum_values(table, f.ids, cfg.stratum));
    write_predictions(st, "oof_cxr", preds, {{"model", "models/cxr_fold*.json"}, {"out_of_fold", true}});
}

struct CxrProbabilities {
    double threshold = 0.5;
    fusion::ProbabilityMap oof, final_probs;
};

CxrProbabilities load_cxr_probabilities(const Stage& st, const std::string& plan_sha) {
    const auto j = st.require_json("cxr_probabilities.json", "train-cxr");
    if (j.at("plan_sha256").get<std::string>() != plan_sha)
        throw PreconditionError("cxr_probabilities.json is stale (plan.json changed); rerun `fuseclin train-cxr`");
    return {j.at("threshold").get<double>(), fusion::probabilities_from_json(j.at("oof")),
            fusion::probabilities_from_json(j.at("final"))};
}

void stage_train_fusion(Stage& st) {
    const auto& cfg = st.cfg();
    const auto dev = load_dev(st);
    const auto probs = load_cxr_probabilities(st, dev.plan_sha256);
    fusion::check_out_of_fold(dev.features.ids, dev.folds, probs.oof);
    const auto result = fusion::train_fusion(dev.features, probs.oof, probs.final_probs, dev.folds, cfg.space,
                                             cfg.n_iter, cfg.seed, cfg.floor, cfg.threshold);
    st.write_json("models/fusion_model.json", result.run.model.to_json());
    st.write_json("models/fusion_meta.json", {{"plan_sha256", dev.plan_sha256},
                                              {"cxr_model", "models/cxr_final.json"},
                                              {"seed", cfg.seed}});
    st.write_json("search_fusion.json", search_json(result.run, cfg));
    st.write_json("fusion_provenance.json", {{"search", fusion::provenance_json(probs.oof)},
                                             {"final", fusion::provenance_json(probs.final_probs)}});
    const auto& f = result.search_matrix;
    const auto table = load_dev_table(st);
    const auto preds = make_predictions(f.ids, f.labels, result.run.oof_scores, result.run.model.threshold,
                                        fold_provenance(dev.folds), cfg.stratum,
                                        stratum_values(table, f.ids, cfg.stratum));
    write_predictions(st, "oof_fusion", preds, {{"model", "models/fusion_model.json"}, {"out_of_fold", true}});
    if (result.run.search.floor_warning)
        st.warn("fusion search: no configuration cleared the per-fold F1 floor of " + io::format_double(cfg.floor));
}

json metrics_values_json(const evaluation::Metrics& m) {
    json j = json::object();
    for (auto id : evaluation::kAllMetrics) {
        const auto& v = m[id];
        j[std::string(evaluation::to_string(id))] = v ? json(*v) : json(nullptr);
    }
    return j;
}

/// Internal report plus per-fold and fold-mean metrics.
json internal_report(const evaluation::PredictionSet& p, const PipelineConfig& cfg,
                     evaluation::MetricsReport& report) {
    report = evaluation::metrics_report(p.labels, p.scores, p.threshold, cfg.bootstrap, cfg.seed);
    std::map<std::string, std::vector<std::size_t>> by_fold;
    for (std::size_t i = 0; i < p.size(); ++i) by_fold[p.provenance[i]].push_back(i);
    std::vector<evaluation::PredictionSet> folds;
    std::vector<std::string> names;
    for (const auto& [prov, rows] : by_fold) {
        evaluation::PredictionSet s;
        s.threshold = p.threshold;
        for (auto i : rows) {
            s.ids.push_back(p.ids[i]);
            s.labels.push_back(p.labels[i]);
            s.scores.push_back(p.scores[i]);
            s.provenance.push_back(prov);
        }
        folds.push_back(std::move(s));
        names.push_back(prov);
    }
    const auto pooled = evaluation::pool_folds(folds);
    json j = report.to_json();
    j["per_fold"] = json::array();
    for (std::size_t k = 0; k < names.size(); ++k)
        j["per_fold"].push_back({{"fold", names[k]}, {"metrics", metrics_values_json(pooled.per_fold[k])}});
    j["fold_mean"] = metrics_values_json(pooled.fold_mean);
    return j;
}

std::vector<fs::path> frozen_artifacts() {
    return {"plan.json", "models/ehr_model.json", "models/cxr_final.json", "models/fusion_model.json",
            "cxr_probabilities.json"};
}

std::map<std::string, std::string> hash_frozen(const Stage& st) {
    std::map<std::string, std::string> h;
    for (const auto& rel : frozen_artifacts())
        if (fs::exists(st.path(rel))) h[rel.generic_string()] = io::sha256_file(st.path(rel));
    return h;
}

void evaluate_site(Stage& st, const std::string& site, double dev_prevalence) {
    const auto& cfg = st.cfg();
    const auto before = hash_frozen(st);
    const auto plan = cohort::PreprocessPlan::parse(st.require_text("plan.json", "preprocess"));
    const auto plan_sha = plan_hash(st);
    const auto meta = st.require_json("models/ehr_meta.json", "train-ehr");
    if (meta.at("plan_sha256").get<std::string>() != plan_sha)
        throw PreconditionError("models/ehr_model.json is stale (plan.json changed); rerun `fuseclin train-ehr`");
    const auto ehr_model = load_model(st, "models/ehr_model.json", "train-ehr");
    const auto cxr_model = cxrnet::TrainedCXRModel::from_json(st.require_json("models/cxr_final.json", "train-cxr"));
    const auto cxr_meta = load_cxr_probabilities(st, plan_sha);
    const auto fusion_model = load_model(st, "models/fusion_model.json", "train-fusion");

    const auto paths = cfg.site_paths(site);
    const bool synthetic = !cfg.sites.contains(site);
    const std::string hint = synthetic ? "; run `fuseclin synth` first" : "";
    if (!fs::exists(paths.ehr)) throw PreconditionError("missing " + paths.ehr.string() + hint);
    const auto images = list_images(paths.images);
    auto loaded = load_dataset(paths, cfg.feature_schema(), images, hint);
    const auto table = cohort::clip_vitals(loaded.table, cfg.vital_ranges).table;
    const auto features = cohort::apply_preprocess(table, plan);
    if (features.columns != ehr_model.columns)
        throw DataError("site '" + site + "': feature columns do not match the EHR model");
    for (int y : features.labels)
        if (y != 0 && y != 1) throw DataError("site '" + site + "' contains a row without an outcome");
    if (features.rows() == 0) throw DataError("site '" + site + "' has no retained rows");

    fusion::ProbabilityMap probs;
    std::vector<double> cxr_scores;
    for (const auto& id : features.ids) {
        const double p = cxrnet::predict_cxr(cxr_model, imaging::read_image(images.at(id)));
        probs[id] = {p, -1};
        cxr_scores.push_back(p);
    }
    const auto fused = fusion::assemble_fusion_features(features, probs);
    if (fused.columns != fusion_model.columns)
        throw DataError("site '" + site + "': fusion columns do not match the fusion model");

    const std::map<std::string, std::pair<std::vector<double>, double>> scores = {
        {"ehr", {ehr_model.predict_proba(features.x), ehr_model.threshold}},
        {"cxr", {cxr_scores, cxr_meta.threshold}},
        {"fusion", {fusion_model.predict_proba(fused.x), fusion_model.threshold}}};
    const auto strata = stratum_values(table, features.ids, cfg.stratum);
    const std::vector<std::string> prov(features.rows(), "site:" + site);

    json summary;
    for (const auto& name : kModels) {
        const auto& [s, thr] = scores.at(name);
        const auto preds = make_predictions(features.ids, features.labels, s, thr, prov, cfg.stratum, strata);
        write_predictions(st, site + "_" + name, preds, {{"site", site}, {"frozen", true}});
        const auto report = evaluation::metrics_report(preds.labels, preds.scores, thr, cfg.bootstrap, cfg.seed);
        st.write_json("metrics_" + site + "_" + name + ".json", report.to_json());
        st.write("metrics_" + site + "_" + name + ".csv", report.to_csv());
        summary["models"][name] = report.to_json()["metrics"];
    }

    std::size_t pos = 0;
    for (int y : features.labels) pos += static_cast<std::size_t>(y);
    const double prevalence = static_cast<double>(pos) / static_cast<double>(features.rows());
    const bool shifted = std::abs(prevalence - dev_prevalence) > 0.05;
    const auto after = hash_frozen(st);
    summary["site"] = site;
    summary["n"] = features.rows();
    summary["positives"] = pos;
    summary["prevalence"] = prevalence;
    summary["development_prevalence"] = dev_prevalence;
    summary["prevalence_shift"] = shifted;
    summary["exclusions"] = loaded.excluded.to_json();
    summary["zero_filled"] = features.zero_filled;
    summary["unseen_categories"] = features.unseen_categories;
    summary["frozen_hashes"] = before;
    summary["frozen_unchanged"] = before == after;
    summary["seed"] = cfg.seed;
    st.write_json("evaluation_" + site + ".json", summary);
    if (shifted) {
        std::ostringstream os;
        os.precision(3);
        os << "site '" << site << "': outcome prevalence " << prevalence * 100.0 << "% differs from development "
           << dev_prevalence * 100.0 << "%";
        st.warn(os.str());
    }
    if (!features.zero_filled.empty())
        st.warn("site '" + site + "': " + std::to_string(features.zero_filled.size()) + " plan column(s) zero-filled");
    if (before != after) throw Error("frozen artifacts changed during external evaluation");
}

void stage_evaluate(Stage& st) {
    const auto& cfg = st.cfg();
    bool any = false;
    double dev_prevalence = 0.0;
    for (const auto& name : kModels) {
        const auto rel = fs::path("predictions") / ("oof_" + name + ".csv");
        if (!fs::exists(st.path(rel))) {
            st.warn("no out-of-fold predictions for '" + name + "'; run `fuseclin train-" + name + "`");
            continue;
        }
        any = true;
        const auto p = read_predictions(st, "oof_" + name, "train-" + name);
        evaluation::MetricsReport report;
        const auto j = internal_report(p, cfg, report);
        st.write_json("metrics_internal_" + name + ".json", j);
        st.write("metrics_internal_" + name + ".csv", report.to_csv());
        dev_prevalence = static_cast<double>(report.positives) / static_cast<double>(report.n);
    }
    if (!any) throw PreconditionError("no trained model to evaluate; run `fuseclin train-ehr` first");
    for (const auto& site : cfg.site_names()) evaluate_site(st, site, dev_prevalence);
}

/// Prediction sets present on disk: internal ("ehr") and per site ("<site>_ehr").
std::vector<std::pair<std::string, std::string>> prediction_sets(const Stage& st) {
    std::vector<std::pair<std::string, std::string>> out;  // (label, file stem)
    for (const auto& m : kModels)
        if (fs::exists(st.path(fs::path("predictions") / ("oof_" + m + ".csv")))) out.emplace_back(m, "oof_" + m);
    for (const auto& site : st.cfg().site_names())
        for (const auto& m : kModels)
            if (fs::exists(st.path(fs::path("predictions") / (site + "_" + m + ".csv"))))
                out.emplace_back(site + "_" + m, site + "_" + m);
    return out;
}

void stage_fairness(Stage& st) {
    const auto& cfg = st.cfg();
    const auto sets = prediction_sets(st);
    if (sets.empty()) throw PreconditionError("no predictions found; run `fuseclin train-ehr` first");
    for (const auto& [label, stem] : sets) {
        const auto p = read_predictions(st, stem, "train-ehr");
        if (!p.strata.contains(cfg.stratum))
            throw DataError("predictions/" + stem + ".csv has no '" + cfg.stratum + "' column");
        const auto groups = evaluation::fairness_report(p, cfg.stratum, cfg.bootstrap, cfg.seed);
        json j = {{"stratum", cfg.stratum}, {"threshold", p.threshold}, {"seed", cfg.seed}, {"groups", json::object()}};
        for (const auto& [value, report] : groups) {
            j["groups"][value.empty() ? "(missing)" : value] = report.to_json();
            if (report.positives == 0 || report.positives == report.n)
                st.warn(label + ": stratum " + cfg.stratum + "=" + value +
                        " has a single outcome class; some metrics are unavailable");
        }
        st.write_json("fairness_" + label + ".json", j);
    }
}

void write_shap(Stage& st, const std::string& name, const tabular::TrainedModel& model,
                const cohort::FeatureMatrix& m) {
    const auto& cfg = st.cfg();
    if (m.columns != model.columns) throw DataError(name + ": matrix columns do not match the model");
    attribution::ShapConfig sc;
    sc.background = attribution::sample_background(m.x, cfg.explain.background, Rng(cfg.seed).derive("background").key());
    sc.exact_limit = cfg.explain.exact_limit;
    sc.n_permutations = cfg.explain.n_permutations;
    sc.seed = cfg.seed;

    std::vector<std::size_t> rows(m.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    if (cfg.explain.max_rows > 0 && rows.size() > cfg.explain.max_rows) {
        Rng rng = Rng(cfg.seed).derive("explain-rows");
        rng.shuffle(rows);
        rows.resize(cfg.explain.max_rows);
        std::sort(rows.begin(), rows.end());
    }
    const auto sub = m.select_rows(rows);
    const attribution::ModelFn f = [&model](std::span<const double> x) { return model.predict_proba(x); };
    const auto shap = attribution::explain_rows(f, sub.x, sub.ids, sub.columns, sc);
    st.write("shap_" + name + ".csv", shap.to_csv());
    json summary = shap.summary_json();
    summary["seed"] = cfg.seed;
    summary["background_rows"] = sc.background.rows;
    summary["n_permutations"] = shap.exact ? 0 : sc.n_permutations;
    st.write_json("shap_" + name + "_summary.json", summary);
}

void stage_explain(Stage& st) {
    const auto& cfg = st.cfg();
    const auto dev = load_dev(st);
    const auto ehr_model = load_model(st, "models/ehr_model.json", "train-ehr");
    write_shap(st, "ehr", ehr_model, dev.features);

    const auto probs = load_cxr_probabilities(st, dev.plan_sha256);
    const auto fusion_model = load_model(st, "models/fusion_model.json", "train-fusion");
    write_shap(st, "fusion", fusion_model, fusion::assemble_fusion_features(dev.features, probs.final_probs));

    const auto cxr = cxrnet::TrainedCXRModel::from_json(st.require_json("models/cxr_final.json", "train-cxr"));
    if (!cxr.extractor->differentiable()) {
        st.warn("Grad-CAM skipped: the '" + cfg.extractor + "' extractor is not differentiable");
        return;
    }
    st.require("store/index.json", "preprocess");
    const auto store = imaging::ImageStore::load(st.path("store"));
    std::vector<imaging::ImageTensor> images;
    std::vector<double> p;
    for (const auto& id : dev.features.ids) {
        images.push_back(store.at(id).view(imaging::AugmentVariant::original));
        p.push_back(probs.final_probs.at(id).probability);
    }
    try {
        const auto heat = cxrnet::gradcam_mean(cxr, images, dev.features.labels, p, cfg.explain.gradcam_threshold);
        std::string csv;
        for (int y = 0; y < heat.height; ++y) {
            for (int x = 0; x < heat.width; ++x) {
                if (x) csv += ',';
                csv += io::format_double(heat.at(y, x));
            }
            csv += '\n';
        }
        st.write("gradcam_mean.csv", csv);
        st.write("gradcam_mean.png", imaging::encode_png(heat));
    } catch (const PreconditionError& e) {
        st.warn(std::string("Grad-CAM skipped: ") + e.what());
    }
}

void stage_roc(Stage& st) {
    const auto sets = prediction_sets(st);
    if (sets.empty()) throw PreconditionError("no predictions found; run `fuseclin train-ehr` first");
    json summary = json::object();
    for (const auto& [label, stem] : sets) {
        const auto p = read_predictions(st, stem, "train-ehr");
        std::string csv = "fpr,tpr\n";
        const auto pts = evaluation::roc_points(p.labels, p.scores);
        for (const auto& [fpr, tpr] : pts) csv += io::format_double(fpr) + "," + io::format_double(tpr) + "\n";
        st.write("roc_" + label + ".csv", csv);
        summary[label] = {{"points", pts.size()}, {"auroc", evaluation::trapezoid_area(pts)}, {"n", p.size()}};
    }
    st.write_json("roc_summary.json", summary);
}

// ---------------------------------------------------------------------------
// Manifest

json versions() {
    return {{"fuseclin", kVersion},
            {"compiler", __VERSION__},
            {"cxx", static_cast<long>(__cplusplus)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

void update_manifest(const PipelineConfig& cfg, const StageResult& r) {
    const auto path = cfg.out / "manifest.json";
    json m = fs::exists(path) ? load_json(path) : json::object();
    m["format"] = "fuseclin-manifest";
    m["version"] = 1;
    m["seed"] = cfg.seed;
    m["config"] = cfg.to_json();
    m["versions"] = versions();
    m["optimizers"] = {{"cxr", {{"name", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"epsilon", 1e-7}}},
                       {"logreg", {{"name", "fista"}, {"max_iter", 20000}, {"tolerance", 1e-6}}}};
    json artifacts = json::object();
    for (const auto& rel : r.artifacts) artifacts[rel.generic_string()] = io::sha256_file(cfg.out / rel);
    m["stages"][r.stage] = {{"artifacts", artifacts}, {"seconds", r.seconds}, {"warnings", r.warnings}};
    io::write_file_atomic(path, m.dump(2) + "\n");
}

}  // namespace

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"synth",    "preprocess", "report",   "train-ehr", "train-cxr",
                                                   "train-fusion", "evaluate", "fairness", "explain",   "roc"};
    return names;
}

StageResult run_stage(const std::string& name, const PipelineConfig& cfg) {
    Stage st(name, cfg);
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(cfg.out);
    if (name == "synth")
        stage_synth(st);
    else if (name == "preprocess")
        stage_preprocess(st);
    else if (name == "report")
        stage_report(st);
    else if (name == "train-ehr")
        stage_train_ehr(st);
    else if (name == "train-cxr")
        stage_train_cxr(st);
    else if (name == "train-fusion")
        stage_train_fusion(st);
    else if (name == "evaluate")
        stage_evaluate(st);
    else if (name == "fairness")
        stage_fairness(st);
    else if (name == "explain")
        stage_explain(st);
    else if (name == "roc")
        stage_roc(st);
    else
        throw PreconditionError("unknown command '" + name + "'");
    auto& r = st.result();
    std::sort(r.artifacts.begin(), r.artifacts.end());
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    update_manifest(cfg, r);
    return r;
}

std::vector<StageResult> run_all(const PipelineConfig& cfg) {
    std::vector<StageResult> out;
    for (const auto& name : stage_names()) {
        if (name == "synth" && cfg.data && cfg.synth_sites.empty()) continue;
        out.push_back(run_stage(name, cfg));
    }
    return out;
}

std::map<std::string, std::string> manifest_hashes(const fs::path& out) {
    const auto path = out / "manifest.json";
    if (!fs::exists(path)) throw PreconditionError("no manifest.json under " + out.string());
    const auto m = load_json(path);
    std::map<std::string, std::string> h;
    for (const auto& [stage, s] : m.at("stages").items())
        for (const auto& [rel, sha] : s.at("artifacts").items()) h[rel] = sha.get<std::string>();
    return h;
}

}  // namespace fuseclin::pipeline
