#pragma once

#include "fuseclin/cohort.hpp"
#include "fuseclin/cxrnet.hpp"
#include "fuseclin/synth.hpp"
#include "fuseclin/tabular.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fuseclin::pipeline {

/// Location of one dataset: EHR CSV, a directory of <id>.png/.jpg images and a directory of
/// <id>.json bounding-box files.
struct DataPaths {
    std::filesystem::path ehr;
    std::filesystem::path images;
    std::filesystem::path bboxes;

    static DataPaths under(const std::filesystem::path& dir);
    nlohmann::json to_json() const;
    static DataPaths from_json(const nlohmann::json& j);
};

/// Synthetic external site. Without an explicit seed the site's seed is derived from the
/// global seed and the site name.
struct SynthSite {
    std::string name;
    synth::SynthSpec spec;
    bool seed_explicit = false;
};

struct ExplainSettings {
    std::size_t background = 100;
    std::size_t exact_limit = 12;
    int n_permutations = 100;
    std::size_t max_rows = 100;  // 0 explains every development row
    double gradcam_threshold = 0.6;
};

struct PipelineConfig {
    std::uint64_t seed = 2020;
    std::filesystem::path out = "fuseclin_out";
    std::optional<std::filesystem::path> schema;  // JSON schema file; built-in schema otherwise
    std::optional<DataPaths> data;                // development data; <out>/data/dev otherwise
    std::map<std::string, DataPaths> sites;       // external sites by name

    synth::SynthSpec synth;
    bool synth_seed_explicit = false;
    std::vector<SynthSite> synth_sites;

    cohort::VitalRanges vital_ranges = cohort::VitalRanges::defaults();
    double missing_threshold = 0.5;
    int folds = 4;

    tabular::HyperSpace space;
    int n_iter = 60;
    double floor = 0.25;
    tabular::ThresholdPolicy threshold;

    std::string extractor = "reference";  // or "teacher"
    cxrnet::ImageSize input{64, 64};
    std::optional<std::filesystem::path> teacher_weights;
    cxrnet::HeadConfig head;
    cxrnet::TrainConfig train;

    int bootstrap = 1000;
    std::vector<std::string> evaluate_sites;  // empty: every configured or synthesized site
    std::string stratum = "sex";
    ExplainSettings explain;

    /// Unknown top-level keys raise PreconditionError.
    static PipelineConfig from_json(const nlohmann::json& j);
    static PipelineConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;

    /// Applies a global seed to every seeded component (synthetic data unless its seed was
    /// given explicitly, training, folds, search, bootstrap, attribution).
    void set_seed(std::uint64_t s);

    DataPaths dev_paths() const;
    DataPaths site_paths(const std::string& name) const;
    std::vector<std::string> site_names() const;
    cohort::FeatureSchema feature_schema() const;
};

struct StageResult {
    std::string stage;
    std::vector<std::filesystem::path> artifacts;  // relative to the output directory
    std::vector<std::string> warnings;
    double seconds = 0.0;
};

/// Commands in pipeline order.
const std::vector<std::string>& stage_names();

/// Runs one stage and records it in <out>/manifest.json. Missing upstream artifacts raise
/// PreconditionError naming the stage to run first.
StageResult run_stage(const std::string& stage, const PipelineConfig& cfg);

/// Every stage in order.
std::vector<StageResult> run_all(const PipelineConfig& cfg);

/// Artifact path -> SHA-256 over every stage recorded in the manifest.
std::map<std::string, std::string> manifest_hashes(const std::filesystem::path& out);

}  // namespace fuseclin::pipeline
