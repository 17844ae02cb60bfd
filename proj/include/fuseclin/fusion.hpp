#pragma once

#include "fuseclin/cohort.hpp"
#include "fuseclin/tabular.hpp"

#include <json.hpp>

#include <map>
#include <string>
#include <string_view>

namespace fuseclin::fusion {

inline constexpr std::string_view kCxrColumn = "cxr_probability";

/// A CXR probability tagged with the model that produced it. `source_fold` is the validation
/// fold of that model, or -1 for the model trained on every development row.
struct CxrProbability {
    double probability = 0.0;
    int source_fold = -1;
};

using ProbabilityMap = std::map<std::string, CxrProbability>;

/// Appends "cxr_probability" to the EHR matrix by joining on patient id. Every row needs
/// exactly one probability in [0, 1] and the map may hold no other ids.
cohort::FeatureMatrix assemble_fusion_features(const cohort::FeatureMatrix& ehr, const ProbabilityMap& probs);

/// Internal-validation guard: each row's probability must come from the CXR model whose
/// validation fold is the row's own fold. Throws DataError naming the first offending id.
void check_out_of_fold(const std::vector<std::string>& ids, const tabular::FoldAssignment& folds,
                       const ProbabilityMap& probs);

/// Sidecar describing where each probability came from.
nlohmann::json provenance_json(const ProbabilityMap& probs);
ProbabilityMap probabilities_from_json(const nlohmann::json& j);

struct FusionResult {
    tabular::CVRun run;
    cohort::FeatureMatrix search_matrix;  // out-of-fold CXR column
    cohort::FeatureMatrix final_matrix;   // CXR column from the full-data CXR model
};

/// Tunes the tabular zoo on EHR features plus out-of-fold CXR probabilities, then refits the
/// winner with the full-data CXR model's probabilities.
FusionResult train_fusion(const cohort::FeatureMatrix& ehr, const ProbabilityMap& oof_probs,
                          const ProbabilityMap& final_probs, const tabular::FoldAssignment& folds,
                          const tabular::HyperSpace& space, int n_iter, std::uint64_t seed, double floor = 0.25,
                          const tabular::ThresholdPolicy& policy = {});

}  // namespace fuseclin::fusion
