#include "fuseclin/fusion.hpp"

#include "fuseclin/error.hpp"

#include <cmath>
#include <set>

namespace fuseclin::fusion {

cohort::FeatureMatrix assemble_fusion_features(const cohort::FeatureMatrix& ehr, const ProbabilityMap& probs) {
    if (ehr.column_index(kCxrColumn)) throw PreconditionError("EHR matrix already has a cxr_probability column");
    std::set<std::string> used;
    cohort::FeatureMatrix out;
    out.columns = ehr.columns;
    out.columns.emplace_back(kCxrColumn);
    out.labels = ehr.labels;
    out.ids = ehr.ids;
    out.zero_filled = ehr.zero_filled;
    out.unseen_categories = ehr.unseen_categories;
    out.x = Matrix(ehr.rows(), ehr.x.cols + 1);
    for (std::size_t r = 0; r < ehr.rows(); ++r) {
        const auto& id = ehr.ids[r];
        auto it = probs.find(id);
        if (it == probs.end()) throw DataError("no CXR probability for patient '" + id + "'");
        const double p = it->second.probability;
        if (!(p >= 0.0 && p <= 1.0)) throw DataError("CXR probability for patient '" + id + "' lies outside [0, 1]");
        used.insert(id);
        auto src = ehr.x.row(r);
        auto dst = out.x.row(r);
        std::copy(src.begin(), src.end(), dst.begin());
        dst[ehr.x.cols] = p;
    }
    for (const auto& [id, p] : probs)
        if (!used.contains(id)) throw DataError("CXR probability for unknown patient '" + id + "'");
    return out;
}

void check_out_of_fold(const std::vector<std::string>& ids, const tabular::FoldAssignment& folds,
                       const ProbabilityMap& probs) {
    if (ids.size() != folds.fold.size()) throw PreconditionError("ids do not match the fold assignment");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = probs.find(ids[i]);
        if (it == probs.end()) throw DataError("no CXR probability for patient '" + ids[i] + "'");
        if (it->second.source_fold != folds.fold[i])
            throw DataError("leakage: CXR probability for patient '" + ids[i] + "' (fold " +
                            std::to_string(folds.fold[i]) + ") comes from " +
                            (it->second.source_fold < 0 ? std::string("the full-data model")
                                                        : "the fold-" + std::to_string(it->second.source_fold) + " model"));
    }
}

nlohmann::json provenance_json(const ProbabilityMap& probs) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, p] : probs) j[id] = {{"probability", p.probability}, {"source_fold", p.source_fold}};
    return {{"column", kCxrColumn}, {"probabilities", j}};
}

ProbabilityMap probabilities_from_json(const nlohmann::json& j) {
    ProbabilityMap out;
    for (const auto& [id, v] : j.at("probabilities").items())
        out[id] = {v.at("probability").get<double>(), v.at("source_fold").get<int>()};
    return out;
}

FusionResult train_fusion(const cohort::FeatureMatrix& ehr, const ProbabilityMap& oof_probs,
                          const ProbabilityMap& final_probs, const tabular::FoldAssignment& folds,
                          const tabular::HyperSpace& space, int n_iter, std::uint64_t seed, double floor,
                          const tabular::ThresholdPolicy& policy) {
    check_out_of_fold(ehr.ids, folds, oof_probs);
    for (const auto& [id, p] : final_probs)
        if (p.source_fold != -1) throw DataError("final CXR probability for '" + id + "' is not from the full-data model");
    for (int y : ehr.labels)
        if (y != 0 && y != 1) throw PreconditionError("fusion training rows need observed outcomes");
    FusionResult r;
    r.search_matrix = assemble_fusion_features(ehr, oof_probs);
    r.final_matrix = assemble_fusion_features(ehr, final_probs);
    r.run = tabular::cross_validated_fit(r.search_matrix.x, r.search_matrix.labels, r.search_matrix.columns, folds, space,
                                         n_iter, seed, floor, policy, &r.final_matrix.x);
    return r;
}

}  // namespace fuseclin::fusion
