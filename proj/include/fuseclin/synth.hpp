#pragma once

#include "fuseclin/cohort.hpp"
#include "fuseclin/imaging.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fuseclin::synth {

struct SynthSpec {
    std::size_t n = 600;
    double pos_rate = 0.15;
    std::uint64_t seed = 2020;
    /// Scale of the class-conditional shifts on EHR variables (in standard deviations for the
    /// strongest variable, age).
    double ehr_effect = 1.0;
    /// Intensity added to lung opacity blobs of positive patients.
    double img_effect = 0.12;
    int image_size = 64;
    double missing_rate = 0.05;
    /// Fraction of rows failing each exclusion rule (under age, no admission time, no CXR,
    /// no outcome).
    double exclusion_rate = 0.01;
    double out_of_range_rate = 0.005;
    std::string id_prefix = "P";

    void validate() const;
    nlohmann::json to_json() const;
    static SynthSpec from_json(const nlohmann::json& j);
};

struct Blob {
    std::string lung;  // "left" or "right"
    double cx = 0.0, cy = 0.0, rx = 0.0, ry = 0.0;
    double amplitude = 0.0;
};

struct SynthCohort {
    SynthSpec spec;
    cohort::CohortTable table;                    // raw rows, before exclusions
    std::vector<imaging::ImageRecord> images;     // patients with an admission CXR
    std::map<std::string, std::vector<Blob>> blobs;
    std::map<std::string, int> labels;            // patients with an observed outcome
};

/// Fully seeded cohort: labels ~ Bernoulli(pos_rate); EHR variables with class-conditional
/// shifts; images built from a smooth background, anatomy and elliptical opacity blobs inside
/// the lung boxes, brighter for positives by img_effect. Pixel values are 8-bit levels.
SynthCohort generate_cohort(const SynthSpec& spec);

/// Writes <dir>/ehr.csv, <dir>/images/<id>.png, <dir>/bboxes/<id>.json and <dir>/synth.json.
std::vector<std::filesystem::path> write_cohort(const SynthCohort& cohort, const std::filesystem::path& dir);

}  // namespace fuseclin::synth
