#include "fuseclin/error.hpp"
#include "fuseclin/tabular.hpp"

#include <algorithm>
#include <cmath>

namespace fuseclin::tabular {

namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::array<E, N>& values, const char* what) {
    for (auto v : values)
        if (to_string(v) == s) return v;
    throw DataError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

constexpr std::array kPenalties = {Penalty::l1, Penalty::l2, Penalty::elasticnet};
constexpr std::array kLosses = {GBLoss::deviance, GBLoss::exponential};
constexpr std::array kCriteria = {Criterion::friedman_mse, Criterion::mse, Criterion::mae};
constexpr std::array kMaxFeatures = {MaxFeatures::all, MaxFeatures::sqrt, MaxFeatures::log2};
constexpr std::array kKinds = {LearnerKind::logreg_elasticnet, LearnerKind::grad_boost_trees,
                               LearnerKind::random_forest};

int draw_int(Rng& rng, std::array<int, 2> range) { return static_cast<int>(rng.uniform_int(range[0], range[1])); }

bool in(int v, std::array<int, 2> r) { return v >= r[0] && v <= r[1]; }
bool in(double v, double lo, double hi) { return v >= lo && v <= hi; }

double f1_at(std::span<const double> scores, std::span<const int> labels, double threshold) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool p = scores[i] >= threshold;
        if (labels[i] == 1)
            (p ? tp : fn) += 1;
        else if (p)
            ++fp;
    }
    return tp == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
}

}  // namespace

std::string_view to_string(Penalty p) {
    switch (p) {
        case Penalty::l1: return "l1";
        case Penalty::l2: return "l2";
        case Penalty::elasticnet: return "elasticnet";
    }
    return "?";
}

std::string_view to_string(GBLoss l) { return l == GBLoss::deviance ? "deviance" : "exponential"; }

std::string_view to_string(Criterion c) {
    switch (c) {
        case Criterion::friedman_mse: return "friedman_mse";
        case Criterion::mse: return "mse";
        case Criterion::mae: return "mae";
    }
    return "?";
}

std::string_view to_string(MaxFeatures m) {
    switch (m) {
        case MaxFeatures::all: return "all";
        case MaxFeatures::sqrt: return "sqrt";
        case MaxFeatures::log2: return "log2";
    }
    return "?";
}

std::string_view to_string(LearnerKind k) {
    switch (k) {
        case LearnerKind::logreg_elasticnet: return "logreg_elasticnet";
        case LearnerKind::grad_boost_trees: return "grad_boost_trees";
        case LearnerKind::random_forest: return "random_forest";
    }
    return "?";
}

LearnerKind parse_learner_kind(std::string_view s) { return parse_enum(s, kKinds, "learner kind"); }

// ---------------------------------------------------------------------------
// Specs and fitted models

nlohmann::json LearnerSpec::to_json() const {
    nlohmann::json p;
    if (const auto* lr = std::get_if<LogregParams>(&params)) {
        p = {{"alpha", lr->alpha},
             {"penalty", to_string(lr->penalty)},
             {"l1_ratio", lr->l1_ratio},
             {"max_iter", lr->max_iter},
             {"tolerance", lr->tolerance}};
    } else if (const auto* gb = std::get_if<GBParams>(&params)) {
        p = {{"loss", to_string(gb->loss)},
             {"learning_rate", gb->learning_rate},
             {"n_estimators", gb->n_estimators},
             {"subsample", gb->subsample},
             {"criterion", to_string(gb->criterion)},
             {"min_samples_split", gb->min_samples_split},
             {"min_samples_leaf", gb->min_samples_leaf},
             {"max_depth", gb->max_depth},
             {"max_features", to_string(gb->max_features)}};
    } else {
        const auto& rf = std::get<RFParams>(params);
        p = {{"n_estimators", rf.n_estimators},
             {"bootstrap", rf.bootstrap},
             {"max_depth", rf.max_depth},
             {"max_features", to_string(rf.max_features)},
             {"min_samples_split", rf.min_samples_split},
             {"min_samples_leaf", rf.min_samples_leaf}};
    }
    return {{"kind", to_string(kind)}, {"seed", seed}, {"params", p}};
}

LearnerSpec LearnerSpec::from_json(const nlohmann::json& j) {
    LearnerSpec s;
    s.kind = parse_learner_kind(j.at("kind").get<std::string>());
    s.seed = j.value("seed", std::uint64_t{2020});
    const auto p = j.value("params", nlohmann::json::object());
    switch (s.kind) {
        case LearnerKind::logreg_elasticnet: {
            LogregParams lr;
            lr.alpha = p.value("alpha", lr.alpha);
            lr.penalty = parse_enum(p.value("penalty", std::string(to_string(lr.penalty))), kPenalties, "penalty");
            lr.l1_ratio = p.value("l1_ratio", lr.l1_ratio);
            lr.max_iter = p.value("max_iter", lr.max_iter);
            lr.tolerance = p.value("tolerance", lr.tolerance);
            s.params = lr;
            break;
        }
        case LearnerKind::grad_boost_trees: {
            GBParams gb;
            gb.loss = parse_enum(p.value("loss", std::string(to_string(gb.loss))), kLosses, "loss");
            gb.learning_rate = p.value("learning_rate", gb.learning_rate);
            gb.n_estimators = p.value("n_estimators", gb.n_estimators);
            gb.subsample = p.value("subsample", gb.subsample);
            gb.criterion = parse_enum(p.value("criterion", std::string(to_string(gb.criterion))), kCriteria, "criterion");
            gb.min_samples_split = p.value("min_samples_split", gb.min_samples_split);
            gb.min_samples_leaf = p.value("min_samples_leaf", gb.min_samples_leaf);
            gb.max_depth = p.value("max_depth", gb.max_depth);
            gb.max_features =
                parse_enum(p.value("max_features", std::string(to_string(gb.max_features))), kMaxFeatures, "max_features");
            s.params = gb;
            break;
        }
        case LearnerKind::random_forest: {
            RFParams rf;
            rf.n_estimators = p.value("n_estimators", rf.n_estimators);
            rf.bootstrap = p.value("bootstrap", rf.bootstrap);
            rf.max_depth = p.value("max_depth", rf.max_depth);
            rf.max_features =
                parse_enum(p.value("max_features", std::string(to_string(rf.max_features))), kMaxFeatures, "max_features");
            rf.min_samples_split = p.value("min_samples_split", rf.min_samples_split);
            rf.min_samples_leaf = p.value("min_samples_leaf", rf.min_samples_leaf);
            s.params = rf;
            break;
        }
    }
    return s;
}

double TrainedModel::predict_proba(std::span<const double> x) const {
    if (x.size() != columns.size() && !columns.empty())
        throw PreconditionError("model expects " + std::to_string(columns.size()) + " features, got " +
                                std::to_string(x.size()));
    return std::visit([&](const auto& m) { return m.predict_proba(x); }, model);
}

std::vector<double> TrainedModel::predict_proba(const Matrix& x) const {
    std::vector<double> out(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) out[i] = predict_proba(x.row(i));
    return out;
}

nlohmann::json TrainedModel::to_json() const {
    nlohmann::json m;
    if (const auto* lr = std::get_if<LogregModel>(&model)) {
        m = {{"weights", lr->weights}, {"intercept", lr->intercept}, {"iterations", lr->iterations},
             {"converged", lr->converged}};
    } else if (const auto* gb = std::get_if<GBModel>(&model)) {
        nlohmann::json trees = nlohmann::json::array();
        for (const auto& t : gb->trees) trees.push_back(t.to_json());
        m = {{"init", gb->init}, {"trees", trees}};
    } else {
        nlohmann::json trees = nlohmann::json::array();
        for (const auto& t : std::get<RFModel>(model).trees) trees.push_back(t.to_json());
        m = {{"trees", trees}};
    }
    return {{"format", "fuseclin-tabular-model"}, {"version", 1},         {"spec", spec.to_json()},
            {"columns", columns},                 {"threshold", threshold}, {"model", m}};
}

TrainedModel TrainedModel::from_json(const nlohmann::json& j) {
    if (j.value("format", std::string{}) != "fuseclin-tabular-model") throw DataError("not a tabular model file");
    TrainedModel t;
    t.spec = LearnerSpec::from_json(j.at("spec"));
    t.columns = j.at("columns").get<std::vector<std::string>>();
    t.threshold = j.at("threshold").get<double>();
    const auto& m = j.at("model");
    switch (t.spec.kind) {
        case LearnerKind::logreg_elasticnet: {
            LogregModel lr;
            lr.params = std::get<LogregParams>(t.spec.params);
            lr.weights = m.at("weights").get<std::vector<double>>();
            lr.intercept = m.at("intercept").get<double>();
            lr.iterations = m.at("iterations").get<int>();
            lr.converged = m.at("converged").get<bool>();
            if (lr.weights.size() != t.columns.size()) throw DataError("logreg weights do not match the column list");
            t.model = lr;
            break;
        }
        case LearnerKind::grad_boost_trees: {
            GBModel gb;
            gb.params = std::get<GBParams>(t.spec.params);
            gb.init = m.at("init").get<double>();
            for (const auto& tj : m.at("trees")) gb.trees.push_back(Tree::from_json(tj));
            t.model = gb;
            break;
        }
        case LearnerKind::random_forest: {
            RFModel rf;
            rf.params = std::get<RFParams>(t.spec.params);
            for (const auto& tj : m.at("trees")) rf.trees.push_back(Tree::from_json(tj));
            if (rf.trees.empty()) throw DataError("random forest has no trees");
            t.model = rf;
            break;
        }
    }
    return t;
}

TrainedModel fit_learner(const LearnerSpec& spec, const Matrix& x, std::span<const int> y,
                         std::vector<std::string> columns) {
    TrainedModel t;
    t.spec = spec;
    if (columns.empty())
        for (std::size_t j = 0; j < x.cols; ++j) columns.push_back("x" + std::to_string(j));
    if (columns.size() != x.cols) throw PreconditionError("column names do not match the feature matrix");
    t.columns = std::move(columns);
    switch (spec.kind) {
        case LearnerKind::logreg_elasticnet:
            t.model = fit_logreg_elasticnet(x, y, std::get<LogregParams>(spec.params), spec.seed);
            break;
        case LearnerKind::grad_boost_trees:
            t.model = fit_gbtrees(x, y, std::get<GBParams>(spec.params), spec.seed);
            break;
        case LearnerKind::random_forest:
            t.model = fit_random_forest(x, y, std::get<RFParams>(spec.params), spec.seed);
            break;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Hyperparameter space

LearnerSpec HyperSpace::sample(LearnerKind kind, Rng& rng) const {
    LearnerSpec s;
    s.kind = kind;
    switch (kind) {
        case LearnerKind::logreg_elasticnet: {
            LogregParams p;
            p.alpha = rng.uniform(0.0001, 0.001);
            p.penalty = kPenalties[rng.index(kPenalties.size())];
            p.l1_ratio = rng.uniform(0.01, 0.30);
            s.params = p;
            break;
        }
        case LearnerKind::grad_boost_trees: {
            GBParams p;
            p.loss = kLosses[rng.index(kLosses.size())];
            p.learning_rate = rng.uniform(0.003, 0.3);
            p.n_estimators = draw_int(rng, n_estimators);
            p.subsample = rng.uniform(0.1, 1.0);
            p.criterion = kCriteria[rng.index(kCriteria.size())];
            p.min_samples_split = draw_int(rng, {2, 12});
            p.min_samples_leaf = draw_int(rng, {2, 12});
            p.max_depth = draw_int(rng, max_depth);
            p.max_features = rng.bernoulli(0.5) ? MaxFeatures::sqrt : MaxFeatures::log2;
            s.params = p;
            break;
        }
        case LearnerKind::random_forest: {
            RFParams p;
            p.bootstrap = rng.bernoulli(0.5);
            p.max_depth = draw_int(rng, max_depth);
            p.max_features = MaxFeatures::sqrt;  // 'auto' and 'sqrt' coincide for classifiers
            p.min_samples_split = draw_int(rng, {2, 12});
            p.min_samples_leaf = draw_int(rng, {2, 12});
            p.n_estimators = draw_int(rng, n_estimators);
            s.params = p;
            break;
        }
    }
    s.seed = rng.next_u64();
    return s;
}

bool HyperSpace::contains(const LearnerSpec& spec) const {
    if (std::find(kinds.begin(), kinds.end(), spec.kind) == kinds.end()) return false;
    if (const auto* p = std::get_if<LogregParams>(&spec.params))
        return spec.kind == LearnerKind::logreg_elasticnet && in(p->alpha, 0.0001, 0.001) &&
               in(p->l1_ratio, 0.01, 0.30);
    if (const auto* p = std::get_if<GBParams>(&spec.params))
        return spec.kind == LearnerKind::grad_boost_trees && in(p->learning_rate, 0.003, 0.3) &&
               in(p->n_estimators, n_estimators) && in(p->subsample, 0.1, 1.0) && in(p->min_samples_split, {2, 12}) &&
               in(p->min_samples_leaf, {2, 12}) && in(p->max_depth, max_depth) &&
               (p->max_features == MaxFeatures::sqrt || p->max_features == MaxFeatures::log2);
    const auto& p = std::get<RFParams>(spec.params);
    return spec.kind == LearnerKind::random_forest && in(p.n_estimators, n_estimators) && in(p.max_depth, max_depth) &&
           in(p.min_samples_split, {2, 12}) && in(p.min_samples_leaf, {2, 12}) && p.max_features == MaxFeatures::sqrt;
}

nlohmann::json HyperSpace::to_json() const {
    std::vector<std::string> k;
    for (auto kind : kinds) k.emplace_back(to_string(kind));
    return {{"kinds", k}, {"n_estimators", n_estimators}, {"max_depth", max_depth}};
}

HyperSpace HyperSpace::from_json(const nlohmann::json& j) {
    HyperSpace s;
    if (j.contains("kinds")) {
        s.kinds.clear();
        for (const auto& k : j.at("kinds")) s.kinds.push_back(parse_learner_kind(k.get<std::string>()));
    }
    if (j.contains("n_estimators")) s.n_estimators = j.at("n_estimators").get<std::array<int, 2>>();
    if (j.contains("max_depth")) s.max_depth = j.at("max_depth").get<std::array<int, 2>>();
    if (s.kinds.empty()) throw PreconditionError("hyperparameter space has no learner kinds");
    if (s.n_estimators[0] < 1 || s.n_estimators[0] > s.n_estimators[1] || s.max_depth[0] < 1 ||
        s.max_depth[0] > s.max_depth[1])
        throw PreconditionError("invalid tree range in hyperparameter space");
    return s;
}

// ---------------------------------------------------------------------------
// Thresholds and search

nlohmann::json ThresholdPolicy::to_json() const {
    if (kind == Kind::fixed) return {{"kind", "fixed"}, {"value", value}};
    return {{"kind", "max_f1"}};
}

ThresholdPolicy ThresholdPolicy::from_json(const nlohmann::json& j) {
    ThresholdPolicy p;
    const auto k = j.value("kind", std::string("max_f1"));
    if (k == "fixed") {
        p.kind = Kind::fixed;
        p.value = j.at("value").get<double>();
        if (!(p.value >= 0.0 && p.value <= 1.0)) throw PreconditionError("fixed threshold must lie in [0, 1]");
    } else if (k != "max_f1") {
        throw DataError("unknown threshold policy '" + k + "'");
    }
    return p;
}

double select_threshold(std::span<const double> scores, std::span<const int> labels, const ThresholdPolicy& policy) {
    if (policy.kind == ThresholdPolicy::Kind::fixed) return policy.value;
    if (scores.size() != labels.size() || scores.empty()) throw PreconditionError("select_threshold: bad input sizes");
    std::vector<std::pair<double, int>> v;
    v.reserve(scores.size());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        v.emplace_back(scores[i], labels[i]);
        pos += labels[i] == 1;
    }
    if (pos == 0 || pos == scores.size()) throw PreconditionError("select_threshold: max_f1 needs both classes");
    std::sort(v.begin(), v.end());

    // Walk unique values from high to low, accumulating TP/FP for "score >= value".
    std::vector<std::pair<double, double>> cand;  // (threshold, f1), ascending
    std::size_t tp = 0, fp = 0;
    std::vector<double> uniq;
    std::vector<std::pair<std::size_t, std::size_t>> counts;
    for (std::size_t i = v.size(); i-- > 0;) {
        tp += v[i].second == 1;
        fp += v[i].second == 0;
        if (i == 0 || v[i - 1].first != v[i].first) {
            uniq.push_back(v[i].first);
            counts.emplace_back(tp, fp);
        }
    }
    std::reverse(uniq.begin(), uniq.end());
    std::reverse(counts.begin(), counts.end());
    double best_t = uniq.front(), best_f1 = -1.0;
    for (std::size_t k = 0; k < uniq.size(); ++k) {
        double t = uniq[k];
        if (k > 0) {
            t = 0.5 * (uniq[k - 1] + uniq[k]);
            if (!(t > uniq[k - 1])) t = uniq[k];
        }
        const auto [ctp, cfp] = counts[k];
        const std::size_t fn = pos - ctp;
        const double f1 = ctp == 0 ? 0.0 : static_cast<double>(2 * ctp) / static_cast<double>(2 * ctp + cfp + fn);
        if (f1 > best_f1) {
            best_f1 = f1;
            best_t = t;
        }
    }
    return best_t;
}

SearchResult rank_entries(std::vector<SearchEntry> entries, double floor) {
    if (entries.empty()) throw PreconditionError("search produced no entries");
    for (auto& e : entries) {
        if (e.fold_f1.empty()) throw PreconditionError("search entry without fold scores");
        double sum = 0.0, lo = e.fold_f1.front();
        for (double f : e.fold_f1) {
            sum += f;
            lo = std::min(lo, f);
        }
        e.mean_f1 = sum / static_cast<double>(e.fold_f1.size());
        e.floor_pass = lo > floor;
    }
    std::stable_sort(entries.begin(), entries.end(), [](const SearchEntry& a, const SearchEntry& b) {
        if (a.floor_pass != b.floor_pass) return a.floor_pass;
        return a.mean_f1 > b.mean_f1;
    });
    SearchResult r;
    r.floor = floor;
    r.floor_warning = !entries.front().floor_pass;
    r.ranked = std::move(entries);
    return r;
}

SearchResult random_search_cv(const HyperSpace& space, const Matrix& x, std::span<const int> y,
                              const FoldAssignment& folds, int n_iter, std::uint64_t seed, double floor) {
    if (n_iter < 1) throw PreconditionError("n_iter must be at least 1");
    if (space.kinds.empty()) throw PreconditionError("hyperparameter space has no learner kinds");
    if (folds.fold.size() != x.rows || y.size() != x.rows) throw PreconditionError("folds, X and y differ in length");

    std::vector<std::vector<std::size_t>> train(static_cast<std::size_t>(folds.k)), valid(train.size());
    std::vector<Matrix> xtrain(train.size()), xvalid(train.size());
    std::vector<std::vector<int>> ytrain(train.size()), yvalid(train.size());
    for (int f = 0; f < folds.k; ++f) {
        const auto fi = static_cast<std::size_t>(f);
        train[fi] = folds.train_indices(f);
        valid[fi] = folds.valid_indices(f);
        xtrain[fi] = x.select_rows(train[fi]);
        xvalid[fi] = x.select_rows(valid[fi]);
        for (auto i : train[fi]) ytrain[fi].push_back(y[i]);
        for (auto i : valid[fi]) yvalid[fi].push_back(y[i]);
    }

    const Rng root(seed);
    std::vector<SearchEntry> entries;
    for (auto kind : space.kinds) {
        Rng rng = root.derive(to_string(kind));
        for (int it = 0; it < n_iter; ++it) {
            SearchEntry e;
            e.spec = space.sample(kind, rng);
            for (std::size_t f = 0; f < train.size(); ++f) {
                const auto model = fit_learner(e.spec, xtrain[f], ytrain[f]);
                const auto scores = model.predict_proba(xvalid[f]);
                const double t = select_threshold(scores, yvalid[f], {});
                e.fold_f1.push_back(f1_at(scores, yvalid[f], t));
            }
            entries.push_back(std::move(e));
        }
    }
    return rank_entries(std::move(entries), floor);
}

CVRun cross_validated_fit(const Matrix& x, std::span<const int> y, const std::vector<std::string>& columns,
                          const FoldAssignment& folds, const HyperSpace& space, int n_iter, std::uint64_t seed,
                          double floor, const ThresholdPolicy& policy, const Matrix* final_x) {
    if (final_x && (final_x->rows != x.rows || final_x->cols != x.cols))
        throw PreconditionError("final feature matrix differs in shape from the search matrix");
    CVRun run;
    run.search = random_search_cv(space, x, y, folds, n_iter, seed, floor);
    const auto& spec = run.search.winner().spec;
    run.oof_scores.assign(x.rows, 0.0);
    for (int f = 0; f < folds.k; ++f) {
        const auto tr = folds.train_indices(f);
        const auto va = folds.valid_indices(f);
        const auto ytr = select(std::vector<int>(y.begin(), y.end()), tr);
        const auto yva = select(std::vector<int>(y.begin(), y.end()), va);
        const auto model = fit_learner(spec, x.select_rows(tr), ytr, columns);
        const auto scores = model.predict_proba(x.select_rows(va));
        for (std::size_t i = 0; i < va.size(); ++i) run.oof_scores[va[i]] = scores[i];
        run.fold_thresholds.push_back(select_threshold(scores, yva, policy));
    }
    run.model = fit_learner(spec, final_x ? *final_x : x, y, columns);
    run.model.threshold = select_threshold(run.oof_scores, y, policy);
    return run;
}

nlohmann::json SearchResult::to_json() const {
    nlohmann::json board = nlohmann::json::array();
    for (const auto& e : ranked)
        board.push_back(
            {{"spec", e.spec.to_json()}, {"fold_f1", e.fold_f1}, {"mean_f1", e.mean_f1}, {"floor_pass", e.floor_pass}});
    return {{"floor", floor}, {"floor_warning", floor_warning}, {"leaderboard", board}};
}

}  // namespace fuseclin::tabular
