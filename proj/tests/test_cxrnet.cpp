#include "fuseclin/cxrnet.hpp"
#include "fuseclin/error.hpp"
#include "fuseclin/synth.hpp"

#include <doctest.h>

#include <cmath>

using namespace fuseclin;
using namespace fuseclin::cxrnet;

TEST_CASE("calculated output bias") {
    HeadConfig cfg;
    auto h = init_head(cfg, 10, 189, 1439, 1);
    CHECK(h.output_bias() == doctest::Approx(std::log(189.0 / 1439.0)));
    CHECK(h.output_bias() == doctest::Approx(-2.030).epsilon(1e-3));
    CHECK(init_head(cfg, 10, 50, 50, 1).output_bias() == 0.0);
    cfg.bias_init = BiasInit::none;
    CHECK(init_head(cfg, 10, 189, 1439, 1).output_bias() == 0.0);
}

TEST_CASE("head initialization ranges") {
    HeadConfig cfg;
    cfg.hidden_layers = {32};
    const auto h = init_head(cfg, 100, 1, 1, 3);
    const double hl = std::sqrt(6.0 / 100.0), ol = std::sqrt(3.0 / 32.0);
    for (double w : h.hidden[0].weights) CHECK(std::abs(w) <= hl);
    for (double w : h.output.weights) CHECK(std::abs(w) <= ol);
    for (double b : h.hidden[0].bias) CHECK(b == 0.0);
}

TEST_CASE("weighted binary cross-entropy") {
    CHECK(weighted_bce_from_logit(0.0, 1, 1.0, 1.0) == doctest::Approx(std::log(2.0)));
    CHECK(weighted_bce_from_logit(0.0, 0, 1.0, 1.0) == doctest::Approx(std::log(2.0)));
    CHECK(weighted_bce_from_logit(50.0, 1, 1.0, 1.0) < 1e-20);
    CHECK(weighted_bce_from_logit(0.0, 1, 0.56, 4.47) == doctest::Approx(4.47 * std::log(2.0)));
    CHECK(weighted_bce_from_logit(0.0, 0, 0.56, 4.47) == doctest::Approx(0.56 * std::log(2.0)));
    CHECK(std::isfinite(weighted_bce_from_logit(-800.0, 1, 1.0, 1.0)));
}

TEST_CASE("zero-weight head predicts sigmoid of its bias") {
    HeadConfig cfg;
    cfg.hidden_layers = {};
    auto h = init_head(cfg, 8, 1, 3, 1);
    for (auto p : h.parameters())
        for (double& v : p) v = 0.0;
    h.output.bias[0] = 0.7;
    std::vector<double> f(8, 0.3);
    CHECK(sigmoid(head_forward(h, f)) == doctest::Approx(1.0 / (1.0 + std::exp(-0.7))));
}

TEST_CASE("head gradients match finite differences") {
    Rng rng(17);
    HeadConfig cfg;
    cfg.hidden_layers = {7, 5};
    cfg.weight_negative = 0.56;
    cfg.weight_positive = 4.47;
    Matrix x(6, 9);
    for (double& v : x.values) v = rng.normal();
    std::vector<int> y = {1, 0, 0, 1, 0, 0};
    auto head = init_head(cfg, 9, 2, 4, 5);
    const auto g = bce_gradients(head, x, y, 0.56, 4.47);
    auto params = head.parameters();
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t k = 0; k < params[p].size(); ++k) {
            const double keep = params[p][k];
            params[p][k] = keep + 1e-6;
            const double up = forward_bce(head, x, y, 0.56, 4.47).loss;
            params[p][k] = keep - 1e-6;
            const double down = forward_bce(head, x, y, 0.56, 4.47).loss;
            params[p][k] = keep;
            CHECK(g[p][k] == doctest::Approx((up - down) / 2e-6).epsilon(1e-5).scale(1e-3));
        }
}

TEST_CASE("inverted dropout keeps the expected activation") {
    HeadConfig cfg;
    cfg.hidden_layers = {64};
    cfg.dropout = 0.5;
    const auto head = init_head(cfg, 4, 1, 1, 2);
    Rng rng(8);
    std::vector<double> f = {0.5, -0.2, 1.0, 0.3};
    HeadTrace t;
    head_forward(head, f, &rng, &t);
    REQUIRE(t.dropout_scale.size() == 64);
    for (double s : t.dropout_scale) CHECK((s == 0.0 || s == 2.0));
    head_forward(head, f, nullptr, &t);
    CHECK(t.dropout_scale.empty());
}

TEST_CASE("Adam first step moves each parameter by the learning rate") {
    std::vector<double> w = {1.0, -2.0, 0.5};
    std::vector<std::span<double>> params = {w};
    Adam adam(params);
    adam.step(params, {{0.3, -4.0, 1e-3}}, 0.01);
    // With bias correction the first update is lr * g / (|g| + eps').
    CHECK(w[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(w[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
    CHECK(w[2] == doctest::Approx(0.5 - 0.01 * 1e-3 / (1e-3 + 1e-7)).epsilon(1e-9));
}

TEST_CASE("learning-rate decay and early stopping") {
    CHECK(learning_rate(0.002, 0.96, 0) == 0.002);
    CHECK(learning_rate(0.002, 0.96, 3) == doctest::Approx(0.002 * 0.96 * 0.96 * 0.96));

    EarlyStopping improving(2);
    for (int e = 0; e < 30; ++e) {
        CHECK(improving.update(1.0 / (e + 1)));
        CHECK_FALSE(improving.should_stop());
    }
    CHECK(improving.best_epoch() == 29);

    EarlyStopping es(2);
    es.update(1.0);
    es.update(0.9);
    es.update(0.95);
    CHECK_FALSE(es.should_stop());
    es.update(0.91);
    CHECK(es.should_stop());
    CHECK(es.best_epoch() == 1);
    CHECK(es.best_loss() == 0.9);
}

TEST_CASE("configuration validation") {
    HeadConfig h;
    h.dropout = 1.0;
    CHECK_THROWS_AS(h.validate(), PreconditionError);
    TrainConfig t;
    t.batch_size = 0;
    CHECK_THROWS_AS(t.validate(), PreconditionError);
    CHECK(HeadConfig::from_json(HeadConfig{}.to_json()).to_json() == HeadConfig{}.to_json());
    CHECK(TrainConfig::from_json(TrainConfig{}.to_json()).to_json() == TrainConfig{}.to_json());
}

TEST_CASE("reference extractor") {
    ReferencePatchExtractor ext({64, 64});
    imaging::ImageTensor img(64, 64, 0.4);
    const auto f = ext.extract(img);
    CHECK(f.size() == 1024);
    for (double v : f) CHECK(v == 0.0);  // standardized constant image
    CHECK_FALSE(ext.differentiable());
    CHECK_THROWS_AS(ext.extract(imaging::ImageTensor(32, 32)), PreconditionError);
    CHECK(extractor_from_json(ext.to_json())->to_json() == ext.to_json());
}

TEST_CASE("conv extractor gradients match finite differences") {
    auto ext = ConvTeacherExtractor::random({12, 12}, {3, 4}, -1, 0, 99);
    CHECK(ext.feature_dim() == 4 * 3 * 3);
    Rng rng(4);
    imaging::ImageTensor img(12, 12);
    for (double& v : img.values) v = rng.uniform();
    std::vector<double> r(ext.feature_dim());
    for (double& v : r) v = rng.normal();
    auto objective = [&] {
        const auto f = ext.extract(img);
        double s = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * r[i];
        return s;
    };
    auto params = ext.trainable_parameters();
    for (double& b : params[1]) b = rng.normal(0.0, 0.1);  // keep pre-activations off the ReLU kink
    for (double& b : params[3]) b = rng.normal(0.0, 0.1);
    auto grads = ext.zero_gradients();
    ext.backward(ext.forward(img), r, grads);
    REQUIRE(params.size() == 4);
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t k = 0; k < params[p].size(); ++k) {
            const double keep = params[p][k];
            params[p][k] = keep + 1e-6;
            const double up = objective();
            params[p][k] = keep - 1e-6;
            const double down = objective();
            params[p][k] = keep;
            CHECK(grads[p][k] == doctest::Approx((up - down) / 2e-6).epsilon(1e-5).scale(1e-4));
        }

    auto frozen = ConvTeacherExtractor::random({12, 12}, {3, 4}, -1, 1, 99);
    CHECK(frozen.trainable_parameters().size() == 2);
    CHECK(extractor_from_json(ext.to_json())->extract(img) == ext.extract(img));
}

namespace {

struct Toy {
    imaging::ImageStore store;
    std::map<std::string, int> labels;
    FoldSplit split;
    std::vector<std::string> ids;
};

Toy toy_cohort(std::size_t n, double img_effect) {
    synth::SynthSpec spec;
    spec.n = n;
    spec.pos_rate = 0.3;
    spec.seed = 11;
    spec.img_effect = img_effect;
    spec.exclusion_rate = 0.0;
    const auto c = synth::generate_cohort(spec);
    Toy t;
    t.store = imaging::precompute_variants(c.images, 11);
    for (const auto& rec : c.images) {
        t.labels[rec.patient_id] = c.labels.at(rec.patient_id);
        t.ids.push_back(rec.patient_id);
        (t.ids.size() % 4 == 0 ? t.split.valid_ids : t.split.train_ids).push_back(rec.patient_id);
    }
    return t;
}

}  // namespace

TEST_CASE("training is deterministic and beats the always-positive baseline") {
    const auto toy = toy_cohort(240, 0.2);
    ReferencePatchExtractor ext({64, 64});
    HeadConfig head;
    TrainConfig train;
    train.max_epochs = 12;
    train.patience = 3;
    const auto a = train_cxr(toy.store, toy.labels, ext, head, train, toy.split);
    const auto b = train_cxr(toy.store, toy.labels, ext, head, train, toy.split);
    CHECK(a.to_json().dump() == b.to_json().dump());
    CHECK(a.history_csv() == b.history_csv());
    REQUIRE_FALSE(a.history.empty());

    std::size_t tp = 0, fp = 0, fn = 0, pos = 0;
    for (const auto& id : toy.split.valid_ids) {
        const double p = predict_cxr(a, toy.store.at(id).view(imaging::AugmentVariant::original));
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        const int y = toy.labels.at(id);
        pos += static_cast<std::size_t>(y);
        const bool pred = p >= 0.5;
        tp += pred && y;
        fp += pred && !y;
        fn += !pred && y;
    }
    const double prevalence = static_cast<double>(pos) / toy.split.valid_ids.size();
    const double baseline = 2.0 * prevalence / (prevalence + 1.0);
    const double f1 = tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    CHECK(f1 > baseline);

    const auto back = TrainedCXRModel::from_json(a.to_json());
    const auto& img = toy.store.at(toy.ids[0]).view(imaging::AugmentVariant::original);
    CHECK(predict_cxr(back, img) == predict_cxr(a, img));
    CHECK(back.history_csv() == a.history_csv());
}

TEST_CASE("training preconditions") {
    const auto toy = toy_cohort(60, 0.2);
    ReferencePatchExtractor ext({64, 64});
    FoldSplit bad = toy.split;
    bad.train_ids.push_back("nobody");
    CHECK_THROWS(train_cxr(toy.store, toy.labels, ext, HeadConfig{}, TrainConfig{}, bad));
    FoldSplit empty;
    CHECK_THROWS_AS(train_cxr(toy.store, toy.labels, ext, HeadConfig{}, TrainConfig{}, empty), PreconditionError);
}

TEST_CASE("Grad-CAM") {
    const auto toy = toy_cohort(60, 0.3);
    ReferencePatchExtractor ref({64, 64});
    TrainConfig train;
    train.max_epochs = 1;
    const auto ref_model = train_cxr(toy.store, toy.labels, ref, HeadConfig{}, train, toy.split);
    const auto& img0 = toy.store.at(toy.ids[0]).view(imaging::AugmentVariant::original);
    CHECK_THROWS_AS(gradcam(ref_model, img0), CapabilityError);

    auto conv = ConvTeacherExtractor::random({32, 32}, {4, 6}, -1, 2, 5);
    HeadConfig head;
    head.hidden_layers = {8};
    const auto model = train_cxr(toy.store, toy.labels, conv, head, train, toy.split);
    const auto heat = gradcam(model, img0);
    CHECK(heat.height == 32);
    double mx = 0.0;
    for (double v : heat.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mx = std::max(mx, v);
    }
    CHECK((mx == 1.0 || mx == 0.0));

    std::vector<imaging::ImageTensor> one = {img0};
    std::vector<int> pos = {1};
    std::vector<double> p = {0.9};
    const auto mean1 = gradcam_mean(model, one, pos, p, 0.6);
    CHECK(mean1 == heat);
    std::vector<imaging::ImageTensor> two = {img0, img0};
    std::vector<int> pos2 = {1, 1};
    std::vector<double> p2 = {0.9, 0.95};
    const auto mean2 = gradcam_mean(model, two, pos2, p2, 0.6);
    for (std::size_t i = 0; i < heat.values.size(); ++i) CHECK(mean2.values[i] == doctest::Approx(heat.values[i]));
    std::vector<double> low = {0.1};
    CHECK_THROWS_AS(gradcam_mean(model, one, pos, low, 0.6), PreconditionError);
}
