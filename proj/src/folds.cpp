#include "fuseclin/error.hpp"
#include "fuseclin/tabular.hpp"

namespace fuseclin::tabular {

FoldAssignment make_stratified_folds(std::span<const int> labels, int k, std::uint64_t seed) {
    if (k < 2) throw PreconditionError("need at least 2 folds");
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1)
            pos.push_back(i);
        else if (labels[i] == 0)
            neg.push_back(i);
        else
            throw DataError("fold labels must be 0 or 1");
    }
    if (pos.size() < static_cast<std::size_t>(k) || neg.size() < static_cast<std::size_t>(k))
        throw PreconditionError("each class needs at least " + std::to_string(k) + " rows for " + std::to_string(k) +
                                "-fold splitting (positives " + std::to_string(pos.size()) + ", negatives " +
                                std::to_string(neg.size()) + ")");
    const Rng root(seed);
    Rng rp = root.derive("positives");
    Rng rn = root.derive("negatives");
    rp.shuffle(pos);
    rn.shuffle(neg);

    FoldAssignment out;
    out.k = k;
    out.seed = seed;
    out.fold.assign(labels.size(), -1);
    std::size_t slot = 0;
    for (auto i : pos) out.fold[i] = static_cast<int>(slot++ % k);
    for (auto i : neg) out.fold[i] = static_cast<int>(slot++ % k);
    return out;
}

std::vector<std::size_t> FoldAssignment::train_indices(int f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold.size(); ++i)
        if (fold[i] != f) out.push_back(i);
    return out;
}

std::vector<std::size_t> FoldAssignment::valid_indices(int f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold.size(); ++i)
        if (fold[i] == f) out.push_back(i);
    return out;
}

std::vector<std::size_t> FoldAssignment::positives_per_fold(std::span<const int> labels) const {
    if (labels.size() != fold.size()) throw PreconditionError("labels do not match the fold assignment");
    std::vector<std::size_t> out(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < fold.size(); ++i)
        if (labels[i] == 1) ++out[static_cast<std::size_t>(fold[i])];
    return out;
}

nlohmann::json FoldAssignment::to_json() const { return {{"k", k}, {"seed", seed}, {"fold", fold}}; }

FoldAssignment FoldAssignment::from_json(const nlohmann::json& j) {
    FoldAssignment f;
    f.k = j.at("k").get<int>();
    f.seed = j.at("seed").get<std::uint64_t>();
    f.fold = j.at("fold").get<std::vector<int>>();
    for (int v : f.fold)
        if (v < 0 || v >= f.k) throw DataError("fold index out of range");
    return f;
}

}  // namespace fuseclin::tabular
