#include "fuseclin/cxrnet.hpp"

#include "fuseclin/error.hpp"
#include "fuseclin/evaluation.hpp"
#include "fuseclin/io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fuseclin::cxrnet {

namespace {

void require_size(const ImageTensor& img, ImageSize want) {
    if (img.height != want.height || img.width != want.width)
        throw PreconditionError("extractor expects " + std::to_string(want.height) + "x" + std::to_string(want.width) +
                                " input, got " + std::to_string(img.height) + "x" + std::to_string(img.width));
}

nlohmann::json size_json(ImageSize s) { return {s.height, s.width}; }

ImageSize size_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 2) throw DataError("image size must be [height, width]");
    ImageSize s{j[0].get<int>(), j[1].get<int>()};
    if (s.height < 8 || s.width < 8) throw DataError("extractor input must be at least 8x8");
    return s;
}

void append_stats(std::vector<double>& out, const ImageTensor& img, const imaging::BBox& box) {
    double sum = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int y = box.y0; y < box.y1; ++y)
        for (int x = box.x0; x < box.x1; ++x) {
            const double v = img.at(y, x);
            sum += v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const double n = static_cast<double>(box.area());
    const double mean = sum / n;
    double ss = 0.0;
    for (int y = box.y0; y < box.y1; ++y)
        for (int x = box.x0; x < box.x1; ++x) ss += (img.at(y, x) - mean) * (img.at(y, x) - mean);
    out.insert(out.end(), {mean, std::sqrt(ss / n), lo, hi});
}

double activate(Activation a, double slope, double z) {
    if (z > 0.0) return z;
    return a == Activation::leaky_relu ? slope * z : 0.0;
}

double activate_grad(Activation a, double slope, double z) {
    if (z > 0.0) return 1.0;
    return a == Activation::leaky_relu ? slope : 0.0;
}

std::string activation_name(Activation a) { return a == Activation::relu ? "relu" : "leaky_relu"; }

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "leaky_relu") return Activation::leaky_relu;
    throw DataError("unknown activation '" + s + "'");
}

nlohmann::json layer_json(const DenseLayer& l) {
    return {{"in", l.in}, {"out", l.out}, {"weights", io::encode_doubles(l.weights)}, {"bias", io::encode_doubles(l.bias)}};
}

DenseLayer layer_from_json(const nlohmann::json& j) {
    DenseLayer l;
    l.in = j.at("in").get<std::size_t>();
    l.out = j.at("out").get<std::size_t>();
    l.weights = io::decode_doubles(j.at("weights").get<std::string>());
    l.bias = io::decode_doubles(j.at("bias").get<std::string>());
    if (l.weights.size() != l.in * l.out || l.bias.size() != l.out) throw DataError("dense layer shape mismatch");
    return l;
}

void check_finite(std::span<const double> v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(what) + " contains a non-finite value");
}

EpochMetrics epoch_metrics(std::span<const int> labels, std::span<const double> probs, double loss) {
    auto m = evaluation::compute_metrics(labels, probs, 0.5);
    auto get = [&](evaluation::MetricId id) { return m[id].value_or(0.0); };
    EpochMetrics e;
    e.loss = loss;
    e.recall = get(evaluation::MetricId::sensitivity);
    e.precision = get(evaluation::MetricId::ppv);
    e.accuracy = get(evaluation::MetricId::accuracy);
    e.auroc = get(evaluation::MetricId::auroc);
    e.f1 = get(evaluation::MetricId::f1);
    return e;
}

nlohmann::json metrics_json(const EpochMetrics& m) {
    return {{"loss", m.loss},         {"recall", m.recall}, {"precision", m.precision},
            {"accuracy", m.accuracy}, {"auroc", m.auroc},   {"f1", m.f1}};
}

EpochMetrics metrics_from_json(const nlohmann::json& j) {
    return {j.at("loss").get<double>(),     j.at("recall").get<double>(), j.at("precision").get<double>(),
            j.at("accuracy").get<double>(), j.at("auroc").get<double>(),  j.at("f1").get<double>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Extractors

std::unique_ptr<FeatureExtractor> extractor_from_json(const nlohmann::json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "reference") return std::make_unique<ReferencePatchExtractor>(size_from_json(j.at("input")));
    if (kind == "conv") {
        std::vector<ConvBlock> blocks;
        for (const auto& b : j.at("blocks")) {
            ConvBlock block;
            block.in_channels = b.at("in_channels").get<int>();
            block.out_channels = b.at("out_channels").get<int>();
            block.pool = b.at("pool").get<bool>();
            block.weights = io::decode_doubles(b.at("weights").get<std::string>());
            block.bias = io::decode_doubles(b.at("bias").get<std::string>());
            blocks.push_back(std::move(block));
        }
        return std::make_unique<ConvTeacherExtractor>(size_from_json(j.at("input")), std::move(blocks),
                                                      j.at("feature_layer").get<int>(),
                                                      j.at("frozen_prefix").get<std::size_t>());
    }
    throw DataError("unknown extractor kind '" + kind + "'");
}

ReferencePatchExtractor::ReferencePatchExtractor(ImageSize input) : input_(input) {
    if (input.height < static_cast<int>(kGrid) || input.width < static_cast<int>(kGrid))
        throw PreconditionError("reference extractor input must be at least 16x16");
}

std::vector<double> ReferencePatchExtractor::extract(const ImageTensor& raw) const {
    require_size(raw, input_);
    // Per-image standardization; a constant image maps to all zeros.
    ImageTensor img = raw;
    {
        double mean = 0.0, sq = 0.0;
        for (double v : raw.values) mean += v;
        mean /= static_cast<double>(raw.size());
        for (double v : raw.values) sq += (v - mean) * (v - mean);
        const double sd = std::sqrt(sq / static_cast<double>(raw.size()));
        for (double& v : img.values) v = sd > 1e-12 ? (v - mean) / sd : 0.0;
    }
    std::vector<double> base;
    base.reserve(kGrid * kGrid + 20);
    const int h = img.height, w = img.width;
    for (std::size_t gy = 0; gy < kGrid; ++gy) {
        const int y0 = static_cast<int>(gy * h / kGrid), y1 = static_cast<int>((gy + 1) * h / kGrid);
        for (std::size_t gx = 0; gx < kGrid; ++gx) {
            const int x0 = static_cast<int>(gx * w / kGrid), x1 = static_cast<int>((gx + 1) * w / kGrid);
            double sum = 0.0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) sum += img.at(y, x);
            base.push_back(sum / static_cast<double>((y1 - y0) * (x1 - x0)));
        }
    }
    const auto anatomy = imaging::canonical_anatomy(h, w);
    append_stats(base, img, {0, 0, w, h});
    append_stats(base, img, anatomy.left_lung);
    append_stats(base, img, anatomy.right_lung);
    append_stats(base, img, anatomy.mediastinum);
    append_stats(base, img, anatomy.trachea);

    std::vector<double> out(kFeatureDim);
    for (std::size_t i = 0; i < kFeatureDim; ++i) out[i] = base[i % base.size()];
    return out;
}

nlohmann::json ReferencePatchExtractor::to_json() const { return {{"kind", "reference"}, {"input", size_json(input_)}}; }

std::unique_ptr<FeatureExtractor> ReferencePatchExtractor::clone() const {
    return std::make_unique<ReferencePatchExtractor>(*this);
}

ConvTeacherExtractor::ConvTeacherExtractor(ImageSize input, std::vector<ConvBlock> blocks, int feature_layer,
                                           std::size_t frozen_prefix)
    : input_(input), blocks_(std::move(blocks)), feature_layer_(feature_layer), frozen_prefix_(frozen_prefix) {
    const int n = static_cast<int>(blocks_.size());
    if (n == 0) throw PreconditionError("conv extractor needs at least one block");
    if (feature_layer >= 0 || feature_layer < -n)
        throw PreconditionError("feature_layer must lie in [-" + std::to_string(n) + ", -1]");
    feature_block_ = static_cast<std::size_t>(n + feature_layer);
    if (frozen_prefix > blocks_.size()) throw PreconditionError("frozen_prefix exceeds the number of blocks");

    int channels = 1, h = input.height, w = input.width;
    for (std::size_t b = 0; b <= feature_block_; ++b) {
        const auto& blk = blocks_[b];
        if (blk.in_channels != channels) throw DataError("conv block " + std::to_string(b) + ": channel mismatch");
        if (blk.weights.size() != static_cast<std::size_t>(blk.out_channels * blk.in_channels * 9) ||
            blk.bias.size() != static_cast<std::size_t>(blk.out_channels))
            throw DataError("conv block " + std::to_string(b) + ": weight shape mismatch");
        channels = blk.out_channels;
        if (blk.pool) {
            h /= 2;
            w /= 2;
        }
        if (h < 1 || w < 1) throw PreconditionError("conv stack pools the input below 1x1");
    }
    feature_shape_ = {channels, h, w, {}};
    feature_dim_ = static_cast<std::size_t>(channels) * h * w;
}

ConvTeacherExtractor ConvTeacherExtractor::random(ImageSize input, const std::vector<int>& channels, int feature_layer,
                                                  std::size_t frozen_prefix, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ConvBlock> blocks;
    int in = 1;
    for (int out : channels) {
        if (out <= 0) throw PreconditionError("channel counts must be positive");
        ConvBlock b{in, out, true, std::vector<double>(static_cast<std::size_t>(out * in * 9)),
                    std::vector<double>(static_cast<std::size_t>(out), 0.0)};
        const double limit = std::sqrt(6.0 / (in * 9));
        for (double& v : b.weights) v = rng.uniform(-limit, limit);
        blocks.push_back(std::move(b));
        in = out;
    }
    return ConvTeacherExtractor(input, std::move(blocks), feature_layer, frozen_prefix);
}

ConvTeacherExtractor::Trace ConvTeacherExtractor::forward(const ImageTensor& img) const {
    require_size(img, input_);
    Trace t;
    FeatureMaps x{1, img.height, img.width, img.values};
    for (std::size_t b = 0; b <= feature_block_; ++b) {
        const auto& blk = blocks_[b];
        FeatureMaps r{blk.out_channels, x.height, x.width,
                      std::vector<double>(static_cast<std::size_t>(blk.out_channels) * x.height * x.width)};
        for (int o = 0; o < blk.out_channels; ++o) {
            for (int y = 0; y < x.height; ++y)
                for (int xx = 0; xx < x.width; ++xx) r.at(o, y, xx) = blk.bias[o];
            for (int i = 0; i < blk.in_channels; ++i) {
                const double* k = &blk.weights[(static_cast<std::size_t>(o) * blk.in_channels + i) * 9];
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const double wv = k[ky * 3 + kx];
                        const int dy = ky - 1, dx = kx - 1;
                        for (int y = std::max(0, -dy); y < std::min(x.height, x.height - dy); ++y)
                            for (int xx = std::max(0, -dx); xx < std::min(x.width, x.width - dx); ++xx)
                                r.at(o, y, xx) += wv * x.at(i, y + dy, xx + dx);
                    }
            }
        }
        for (double& v : r.values) v = std::max(v, 0.0);
        FeatureMaps next = r;
        if (blk.pool) {
            next = {r.channels, r.height / 2, r.width / 2,
                    std::vector<double>(static_cast<std::size_t>(r.channels) * (r.height / 2) * (r.width / 2))};
            for (int c = 0; c < r.channels; ++c)
                for (int y = 0; y < next.height; ++y)
                    for (int xx = 0; xx < next.width; ++xx)
                        next.at(c, y, xx) = (r.at(c, 2 * y, 2 * xx) + r.at(c, 2 * y, 2 * xx + 1) +
                                             r.at(c, 2 * y + 1, 2 * xx) + r.at(c, 2 * y + 1, 2 * xx + 1)) /
                                            4.0;
        }
        t.inputs.push_back(std::move(x));
        t.relu.push_back(std::move(r));
        x = std::move(next);
    }
    t.features = std::move(x);
    return t;
}

std::vector<double> ConvTeacherExtractor::extract(const ImageTensor& img) const { return forward(img).features.values; }

std::vector<std::span<double>> ConvTeacherExtractor::trainable_parameters() {
    std::vector<std::span<double>> out;
    for (std::size_t b = frozen_prefix_; b <= feature_block_ && b < blocks_.size(); ++b) {
        out.emplace_back(blocks_[b].weights);
        out.emplace_back(blocks_[b].bias);
    }
    return out;
}

std::vector<std::vector<double>> ConvTeacherExtractor::zero_gradients() const {
    std::vector<std::vector<double>> out;
    for (std::size_t b = frozen_prefix_; b <= feature_block_ && b < blocks_.size(); ++b) {
        out.emplace_back(blocks_[b].weights.size(), 0.0);
        out.emplace_back(blocks_[b].bias.size(), 0.0);
    }
    return out;
}

void ConvTeacherExtractor::backward(const Trace& trace, std::span<const double> grad_features,
                                    std::vector<std::vector<double>>& grads) const {
    if (!has_trainable_tail()) return;
    if (grad_features.size() != feature_dim_) throw PreconditionError("feature gradient has the wrong length");
    std::vector<double> g_out(grad_features.begin(), grad_features.end());
    for (std::size_t b = feature_block_ + 1; b-- > frozen_prefix_;) {
        const auto& blk = blocks_[b];
        const auto& in = trace.inputs[b];
        const auto& r = trace.relu[b];
        // gradient with respect to the ReLU output, before pooling
        std::vector<double> g(r.values.size(), 0.0);
        if (blk.pool) {
            const int ph = r.height / 2, pw = r.width / 2;
            for (int c = 0; c < r.channels; ++c)
                for (int y = 0; y < ph; ++y)
                    for (int x = 0; x < pw; ++x) {
                        const double v = g_out[(static_cast<std::size_t>(c) * ph + y) * pw + x] / 4.0;
                        for (int a = 0; a < 2; ++a)
                            for (int bb = 0; bb < 2; ++bb)
                                g[(static_cast<std::size_t>(c) * r.height + 2 * y + a) * r.width + 2 * x + bb] = v;
                    }
        } else {
            g = g_out;
        }
        for (std::size_t i = 0; i < g.size(); ++i)
            if (r.values[i] <= 0.0) g[i] = 0.0;

        const std::size_t slot = 2 * (b - frozen_prefix_);
        auto& gw = grads[slot];
        auto& gb = grads[slot + 1];
        const bool need_input_grad = b > frozen_prefix_;
        std::vector<double> g_in(need_input_grad ? in.values.size() : 0, 0.0);
        const int H = in.height, W = in.width;
        for (int o = 0; o < blk.out_channels; ++o) {
            const double* go = &g[static_cast<std::size_t>(o) * H * W];
            double sum = 0.0;
            for (int p = 0; p < H * W; ++p) sum += go[p];
            gb[o] += sum;
            for (int i = 0; i < blk.in_channels; ++i) {
                const std::size_t kbase = (static_cast<std::size_t>(o) * blk.in_channels + i) * 9;
                const double* xi = &in.values[static_cast<std::size_t>(i) * H * W];
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const int dy = ky - 1, dx = kx - 1;
                        const double wv = blk.weights[kbase + ky * 3 + kx];
                        double acc = 0.0;
                        for (int y = std::max(0, -dy); y < std::min(H, H - dy); ++y)
                            for (int x = std::max(0, -dx); x < std::min(W, W - dx); ++x) {
                                const double gv = go[y * W + x];
                                acc += gv * xi[(y + dy) * W + x + dx];
                                if (need_input_grad)
                                    g_in[(static_cast<std::size_t>(i) * H + y + dy) * W + x + dx] += wv * gv;
                            }
                        gw[kbase + ky * 3 + kx] += acc;
                    }
            }
        }
        g_out = std::move(g_in);
    }
}

nlohmann::json ConvTeacherExtractor::to_json() const {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : blocks_)
        blocks.push_back({{"in_channels", b.in_channels},
                          {"out_channels", b.out_channels},
                          {"pool", b.pool},
                          {"weights", io::encode_doubles(b.weights)},
                          {"bias", io::encode_doubles(b.bias)}});
    return {{"kind", "conv"},
            {"input", size_json(input_)},
            {"feature_layer", feature_layer_},
            {"frozen_prefix", frozen_prefix_},
            {"blocks", blocks}};
}

std::unique_ptr<FeatureExtractor> ConvTeacherExtractor::clone() const {
    return std::make_unique<ConvTeacherExtractor>(*this);
}

// ---------------------------------------------------------------------------
// Head

void HeadConfig::validate() const {
    for (int w : hidden_layers)
        if (w <= 0) throw PreconditionError("hidden layer widths must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw PreconditionError("dropout must lie in [0, 1)");
    if (!(leaky_slope >= 0.0)) throw PreconditionError("leaky slope must be non-negative");
    if (!(weight_negative > 0.0 && weight_positive > 0.0)) throw PreconditionError("class weights must be positive");
}

nlohmann::json HeadConfig::to_json() const {
    return {{"hidden_layers", hidden_layers},
            {"activation", activation_name(activation)},
            {"leaky_slope", leaky_slope},
            {"dropout", dropout},
            {"bias_init", bias_init == BiasInit::calculated ? "calculated" : "none"},
            {"class_weights", {weight_negative, weight_positive}}};
}

HeadConfig HeadConfig::from_json(const nlohmann::json& j) {
    HeadConfig c;
    if (j.contains("hidden_layers")) c.hidden_layers = j.at("hidden_layers").get<std::vector<int>>();
    if (j.contains("activation")) c.activation = parse_activation(j.at("activation").get<std::string>());
    if (j.contains("leaky_slope")) c.leaky_slope = j.at("leaky_slope").get<double>();
    if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
    if (j.contains("bias_init")) {
        const auto s = j.at("bias_init").get<std::string>();
        if (s == "calculated")
            c.bias_init = BiasInit::calculated;
        else if (s == "none")
            c.bias_init = BiasInit::none;
        else
            throw DataError("unknown bias_init '" + s + "'");
    }
    if (j.contains("class_weights")) {
        const auto w = j.at("class_weights").get<std::vector<double>>();
        if (w.size() != 2) throw DataError("class_weights must be [negative, positive]");
        c.weight_negative = w[0];
        c.weight_positive = w[1];
    }
    c.validate();
    return c;
}

std::vector<std::span<double>> HeadWeights::parameters() {
    std::vector<std::span<double>> out;
    for (auto& l : hidden) {
        out.emplace_back(l.weights);
        out.emplace_back(l.bias);
    }
    out.emplace_back(output.weights);
    out.emplace_back(output.bias);
    return out;
}

std::vector<std::span<const double>> HeadWeights::parameters() const {
    std::vector<std::span<const double>> out;
    for (const auto& l : hidden) {
        out.emplace_back(l.weights);
        out.emplace_back(l.bias);
    }
    out.emplace_back(output.weights);
    out.emplace_back(output.bias);
    return out;
}

std::vector<std::vector<double>> HeadWeights::zero_gradients() const {
    std::vector<std::vector<double>> out;
    for (auto p : parameters()) out.emplace_back(p.size(), 0.0);
    return out;
}

HeadWeights init_head(const HeadConfig& cfg, std::size_t feature_dim, std::size_t pos_count, std::size_t neg_count,
                      std::uint64_t seed) {
    cfg.validate();
    if (feature_dim == 0) throw PreconditionError("feature_dim must be positive");
    HeadWeights h;
    h.activation = cfg.activation;
    h.leaky_slope = cfg.leaky_slope;
    h.dropout = cfg.dropout;
    Rng rng(seed);
    std::size_t in = feature_dim;
    for (int width : cfg.hidden_layers) {
        DenseLayer l{in, static_cast<std::size_t>(width), std::vector<double>(in * width),
                     std::vector<double>(width, 0.0)};
        const double limit = std::sqrt(6.0 / static_cast<double>(in));
        for (double& w : l.weights) w = rng.uniform(-limit, limit);
        h.hidden.push_back(std::move(l));
        in = static_cast<std::size_t>(width);
    }
    h.output = {in, 1, std::vector<double>(in), {0.0}};
    const double limit = std::sqrt(3.0 / static_cast<double>(in));
    for (double& w : h.output.weights) w = rng.uniform(-limit, limit);
    if (cfg.bias_init == BiasInit::calculated) {
        if (pos_count == 0 || neg_count == 0)
            throw PreconditionError("calculated output bias needs positive and negative counts");
        h.output.bias[0] = std::log(static_cast<double>(pos_count) / static_cast<double>(neg_count));
    }
    return h;
}

double head_forward(const HeadWeights& head, std::span<const double> features, Rng* dropout_rng, HeadTrace* trace) {
    if (features.size() != head.feature_dim()) throw PreconditionError("feature vector has the wrong length");
    std::vector<double> x(features.begin(), features.end());
    if (trace) {
        trace->layer_inputs.clear();
        trace->pre_activation.clear();
        trace->dropout_scale.clear();
    }
    for (std::size_t li = 0; li < head.hidden.size(); ++li) {
        const auto& l = head.hidden[li];
        std::vector<double> z(l.out);
        for (std::size_t o = 0; o < l.out; ++o) {
            const double* w = &l.weights[o * l.in];
            double acc = l.bias[o];
            for (std::size_t i = 0; i < l.in; ++i) acc += w[i] * x[i];
            z[o] = acc;
        }
        std::vector<double> a(l.out);
        for (std::size_t o = 0; o < l.out; ++o) a[o] = activate(head.activation, head.leaky_slope, z[o]);
        if (li + 1 == head.hidden.size() && dropout_rng && head.dropout > 0.0) {
            std::vector<double> scale(l.out);
            const double keep = 1.0 - head.dropout;
            for (std::size_t o = 0; o < l.out; ++o) {
                scale[o] = dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
                a[o] *= scale[o];
            }
            if (trace) trace->dropout_scale = std::move(scale);
        }
        if (trace) {
            trace->layer_inputs.push_back(std::move(x));
            trace->pre_activation.push_back(std::move(z));
        }
        x = std::move(a);
    }
    double logit = head.output.bias[0];
    for (std::size_t i = 0; i < head.output.in; ++i) logit += head.output.weights[i] * x[i];
    if (trace) {
        trace->layer_inputs.push_back(std::move(x));
        trace->logit = logit;
    }
    return logit;
}

void head_backward(const HeadWeights& head, const HeadTrace& trace, double grad_logit,
                   std::vector<std::vector<double>>& grads, std::vector<double>* grad_features) {
    const std::size_t nh = head.hidden.size();
    const auto& x_out = trace.layer_inputs.at(nh);
    auto& gw_out = grads[2 * nh];
    for (std::size_t i = 0; i < head.output.in; ++i) gw_out[i] += grad_logit * x_out[i];
    grads[2 * nh + 1][0] += grad_logit;

    std::vector<double> dx(head.output.in);
    for (std::size_t i = 0; i < head.output.in; ++i) dx[i] = grad_logit * head.output.weights[i];

    for (std::size_t li = nh; li-- > 0;) {
        const auto& l = head.hidden[li];
        if (li + 1 == nh && !trace.dropout_scale.empty())
            for (std::size_t o = 0; o < l.out; ++o) dx[o] *= trace.dropout_scale[o];
        const auto& z = trace.pre_activation[li];
        const auto& in = trace.layer_inputs[li];
        auto& gw = grads[2 * li];
        auto& gb = grads[2 * li + 1];
        const bool need_input = li > 0 || grad_features != nullptr;
        std::vector<double> dx_in(need_input ? l.in : 0, 0.0);
        for (std::size_t o = 0; o < l.out; ++o) {
            const double dz = dx[o] * activate_grad(head.activation, head.leaky_slope, z[o]);
            if (dz == 0.0) continue;
            gb[o] += dz;
            const double* w = &l.weights[o * l.in];
            double* g = &gw[o * l.in];
            for (std::size_t i = 0; i < l.in; ++i) g[i] += dz * in[i];
            if (need_input)
                for (std::size_t i = 0; i < l.in; ++i) dx_in[i] += dz * w[i];
        }
        dx = std::move(dx_in);
    }
    if (grad_features) *grad_features = std::move(dx);
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double weighted_bce_from_logit(double logit, int label, double w_neg, double w_pos) {
    const double w = label == 1 ? w_pos : w_neg;
    return w * (std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit))));
}

BceResult forward_bce(const HeadWeights& head, const Matrix& features, std::span<const int> labels, double w_neg,
                      double w_pos) {
    if (labels.size() != features.rows) throw PreconditionError("features and labels differ in length");
    if (features.rows == 0) throw PreconditionError("empty batch");
    check_finite(features.values, "feature batch");
    BceResult r;
    r.probabilities.reserve(features.rows);
    for (std::size_t i = 0; i < features.rows; ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw PreconditionError("labels must be 0 or 1");
        const double z = head_forward(head, features.row(i));
        r.probabilities.push_back(sigmoid(z));
        r.loss += weighted_bce_from_logit(z, labels[i], w_neg, w_pos);
    }
    r.loss /= static_cast<double>(features.rows);
    return r;
}

std::vector<std::vector<double>> bce_gradients(const HeadWeights& head, const Matrix& features,
                                               std::span<const int> labels, double w_neg, double w_pos) {
    if (labels.size() != features.rows) throw PreconditionError("features and labels differ in length");
    if (features.rows == 0) throw PreconditionError("empty batch");
    auto grads = head.zero_gradients();
    HeadTrace trace;
    const double n = static_cast<double>(features.rows);
    for (std::size_t i = 0; i < features.rows; ++i) {
        const double z = head_forward(head, features.row(i), nullptr, &trace);
        const double w = labels[i] == 1 ? w_pos : w_neg;
        head_backward(head, trace, w * (sigmoid(z) - labels[i]) / n, grads);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Optimisation

Adam::Adam(const std::vector<std::span<double>>& params, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    for (auto p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step(const std::vector<std::span<double>>& params, const std::vector<std::vector<double>>& grads,
                double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw PreconditionError("Adam: parameter layout changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k];
        const auto& g = grads[k];
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
        }
    }
}

double learning_rate(double initial_lr, double decay, int epoch) { return initial_lr * std::pow(decay, epoch); }

EarlyStopping::EarlyStopping(int patience) : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
    if (patience < 1) throw PreconditionError("patience must be at least 1");
}

bool EarlyStopping::update(double loss) {
    ++epoch_;
    if (loss < best_) {
        best_ = loss;
        best_epoch_ = epoch_;
        stale_ = 0;
        return true;
    }
    ++stale_;
    return false;
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw PreconditionError("batch_size must be at least 1");
    if (!(initial_lr > 0.0)) throw PreconditionError("initial_lr must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw PreconditionError("lr_decay must lie in (0, 1]");
    if (max_epochs < 1) throw PreconditionError("max_epochs must be at least 1");
    if (patience < 1) throw PreconditionError("patience must be at least 1");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"batch_size", batch_size}, {"initial_lr", initial_lr},     {"lr_decay", lr_decay},
            {"max_epochs", max_epochs}, {"patience", patience},         {"seed", seed},
            {"augment_bbox", augment_bbox}, {"online_augment", online_augment}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("initial_lr")) c.initial_lr = j.at("initial_lr").get<double>();
    if (j.contains("lr_decay")) c.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<int>();
    if (j.contains("patience")) c.patience = j.at("patience").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("augment_bbox")) c.augment_bbox = j.at("augment_bbox").get<bool>();
    if (j.contains("online_augment")) c.online_augment = j.at("online_augment").get<bool>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Training

nlohmann::json TrainedCXRModel::to_json() const {
    nlohmann::json hidden = nlohmann::json::array();
    std::vector<std::size_t> widths;
    for (const auto& l : head.hidden) {
        hidden.push_back(layer_json(l));
        widths.push_back(l.out);
    }
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : history)
        hist.push_back({{"epoch", r.epoch}, {"lr", r.lr}, {"train", metrics_json(r.train)}, {"valid", metrics_json(r.valid)}});
    return {{"extractor", extractor->to_json()},
            {"head",
             {{"feature_dim", head.feature_dim()},
              {"hidden_layers", widths},
              {"activation", activation_name(head.activation)},
              {"leaky_slope", head.leaky_slope},
              {"dropout", head.dropout},
              {"bias", head.output_bias()},
              {"hidden", hidden},
              {"output", layer_json(head.output)}}},
            {"history", hist},
            {"best_epoch", best_epoch}};
}

TrainedCXRModel TrainedCXRModel::from_json(const nlohmann::json& j) {
    TrainedCXRModel m;
    m.extractor = extractor_from_json(j.at("extractor"));
    const auto& h = j.at("head");
    m.head.activation = parse_activation(h.at("activation").get<std::string>());
    m.head.leaky_slope = h.at("leaky_slope").get<double>();
    m.head.dropout = h.at("dropout").get<double>();
    for (const auto& l : h.at("hidden")) m.head.hidden.push_back(layer_from_json(l));
    m.head.output = layer_from_json(h.at("output"));
    if (m.head.output.out != 1) throw DataError("head output layer must have one unit");
    std::size_t in = m.extractor->feature_dim();
    for (const auto& l : m.head.hidden) {
        if (l.in != in) throw DataError("head layer input width mismatch");
        in = l.out;
    }
    if (m.head.output.in != in) throw DataError("head output input width mismatch");
    for (const auto& r : j.at("history"))
        m.history.push_back({r.at("epoch").get<int>(), r.at("lr").get<double>(), metrics_from_json(r.at("train")),
                             metrics_from_json(r.at("valid"))});
    m.best_epoch = j.at("best_epoch").get<int>();
    return m;
}

std::string TrainedCXRModel::history_csv() const {
    std::string out =
        "epoch,lr,train_loss,valid_loss,train_recall,valid_recall,train_precision,valid_precision,"
        "train_accuracy,valid_accuracy,train_auroc,valid_auroc,train_f1,valid_f1\n";
    for (const auto& r : history) {
        const std::vector<std::string> f = {std::to_string(r.epoch),
                                            io::format_double(r.lr),
                                            io::format_double(r.train.loss),
                                            io::format_double(r.valid.loss),
                                            io::format_double(r.train.recall),
                                            io::format_double(r.valid.recall),
                                            io::format_double(r.train.precision),
                                            io::format_double(r.valid.precision),
                                            io::format_double(r.train.accuracy),
                                            io::format_double(r.valid.accuracy),
                                            io::format_double(r.train.auroc),
                                            io::format_double(r.valid.auroc),
                                            io::format_double(r.train.f1),
                                            io::format_double(r.valid.f1)};
        out += io::csv_line(f);
    }
    return out;
}

namespace {

std::vector<int> labels_for(const std::vector<std::string>& ids, const std::map<std::string, int>& labels,
                            const char* partition) {
    std::vector<int> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = labels.find(id);
        if (it == labels.end()) throw PreconditionError(std::string(partition) + " id '" + id + "' has no label");
        out.push_back(it->second);
    }
    const auto pos = std::count(out.begin(), out.end(), 1);
    if (pos == 0 || pos == static_cast<long>(out.size()))
        throw PreconditionError(std::string(partition) + " partition must contain both classes");
    return out;
}

ImageTensor prepared(const ImageTensor& img, ImageSize size) { return imaging::resize(img, size.height, size.width); }

}  // namespace

TrainedCXRModel train_cxr(const imaging::ImageStore& store, const std::map<std::string, int>& labels,
                          const FeatureExtractor& extractor, const HeadConfig& head_cfg, const TrainConfig& train_cfg,
                          const FoldSplit& split) {
    head_cfg.validate();
    train_cfg.validate();
    const auto train_y = labels_for(split.train_ids, labels, "train");
    const auto valid_y = labels_for(split.valid_ids, labels, "valid");
    const std::size_t pos = static_cast<std::size_t>(std::count(train_y.begin(), train_y.end(), 1));

    auto ext_owned = extractor.clone();
    auto* conv = dynamic_cast<ConvTeacherExtractor*>(ext_owned.get());
    const bool tune_tail = conv && conv->has_trainable_tail();
    const ImageSize in_size = ext_owned->input_size();

    const Rng root(train_cfg.seed);
    HeadWeights head = init_head(head_cfg, ext_owned->feature_dim(), pos, train_y.size() - pos, root.derive("head").key());

    auto collect_params = [&]() {
        auto params = head.parameters();
        if (tune_tail)
            for (auto p : conv->trainable_parameters()) params.push_back(p);
        return params;
    };
    Adam adam(collect_params());

    // Frozen extractors on un-augmented inputs give fixed features: compute them once.
    auto feature_rows = [&](const std::vector<std::string>& ids) {
        Matrix m(ids.size(), ext_owned->feature_dim());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            auto f = ext_owned->extract(prepared(store.at(ids[i]).view(imaging::AugmentVariant::original), in_size));
            std::copy(f.begin(), f.end(), m.row(i).begin());
        }
        return m;
    };
    const bool cache_train = !tune_tail && !train_cfg.augment_bbox && !train_cfg.online_augment;
    Matrix train_cache = cache_train ? feature_rows(split.train_ids) : Matrix{};
    Matrix valid_cache = tune_tail ? Matrix{} : feature_rows(split.valid_ids);

    TrainedCXRModel result;
    HeadWeights best_head = head;
    std::unique_ptr<FeatureExtractor> best_ext = ext_owned->clone();
    EarlyStopping stopper(train_cfg.patience);
    std::vector<std::size_t> order(split.train_ids.size());

    for (int epoch = 0; epoch < train_cfg.max_epochs; ++epoch) {
        const double lr = learning_rate(train_cfg.initial_lr, train_cfg.lr_decay, epoch);
        Rng rng = root.derive(static_cast<std::uint64_t>(epoch) + 1);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);

        std::vector<double> train_probs(order.size());
        double train_loss = 0.0;
        HeadTrace htrace;
        std::vector<double> grad_features;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train_cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(train_cfg.batch_size));
            const double bn = static_cast<double>(end - start);
            auto grads = head.zero_gradients();
            auto conv_grads = tune_tail ? conv->zero_gradients() : std::vector<std::vector<double>>{};
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t idx = order[b];
                const int y = train_y[idx];
                std::vector<double> feats;
                ConvTeacherExtractor::Trace ctrace;
                if (cache_train) {
                    auto row = train_cache.row(idx);
                    feats.assign(row.begin(), row.end());
                } else {
                    const auto& view = imaging::sample_training_view(store, split.train_ids[idx], train_cfg.augment_bbox, rng);
                    ImageTensor img = train_cfg.online_augment ? imaging::online_augment(view, rng) : view;
                    img = prepared(img, in_size);
                    if (tune_tail) {
                        ctrace = conv->forward(img);
                        feats = ctrace.features.values;
                    } else {
                        feats = ext_owned->extract(img);
                    }
                }
                const double z = head_forward(head, feats, &rng, &htrace);
                const double loss = weighted_bce_from_logit(z, y, head_cfg.weight_negative, head_cfg.weight_positive);
                if (!std::isfinite(loss))
                    throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", patient '" +
                                       split.train_ids[idx] + "' (logit " + std::to_string(z) + ")");
                train_loss += loss;
                train_probs[idx] = sigmoid(z);
                const double w = y == 1 ? head_cfg.weight_positive : head_cfg.weight_negative;
                const double g = w * (sigmoid(z) - y) / bn;
                head_backward(head, htrace, g, grads, tune_tail ? &grad_features : nullptr);
                if (tune_tail) conv->backward(ctrace, grad_features, conv_grads);
            }
            for (auto& cg : conv_grads) grads.push_back(std::move(cg));
            adam.step(collect_params(), grads, lr);
        }
        train_loss /= static_cast<double>(order.size());

        // Validation: evaluation mode, original views, unweighted loss.
        std::vector<double> valid_probs(split.valid_ids.size());
        double valid_loss = 0.0;
        for (std::size_t i = 0; i < split.valid_ids.size(); ++i) {
            double z;
            if (tune_tail) {
                auto f = conv->extract(prepared(store.at(split.valid_ids[i]).view(imaging::AugmentVariant::original), in_size));
                z = head_forward(head, f);
            } else {
                z = head_forward(head, valid_cache.row(i));
            }
            valid_probs[i] = sigmoid(z);
            valid_loss += weighted_bce_from_logit(z, valid_y[i], 1.0, 1.0);
        }
        valid_loss /= static_cast<double>(split.valid_ids.size());
        if (!std::isfinite(valid_loss))
            throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));

        result.history.push_back({epoch, lr, epoch_metrics(train_y, train_probs, train_loss),
                                  epoch_metrics(valid_y, valid_probs, valid_loss)});
        if (stopper.update(valid_loss)) {
            best_head = head;
            best_ext = ext_owned->clone();
        }
        if (stopper.should_stop()) break;
    }
    result.head = std::move(best_head);
    result.extractor = std::shared_ptr<const FeatureExtractor>(std::move(best_ext));
    result.best_epoch = stopper.best_epoch();
    return result;
}

double predict_cxr(const TrainedCXRModel& model, const ImageTensor& img) {
    img.validate();
    const auto size = model.extractor->input_size();
    auto feats = model.extractor->extract(prepared(img, size));
    if (feats.size() != model.head.feature_dim()) throw DataError("extractor output does not match the head width");
    return sigmoid(head_forward(model.head, feats));
}

ImageTensor gradcam(const TrainedCXRModel& model, const ImageTensor& img) {
    const auto* conv = dynamic_cast<const ConvTeacherExtractor*>(model.extractor.get());
    if (!conv || !conv->differentiable())
        throw CapabilityError("Grad-CAM needs a differentiable convolutional extractor");
    const auto size = conv->input_size();
    const auto trace = conv->forward(prepared(img, size));
    const auto& A = trace.features;

    HeadTrace htrace;
    head_forward(model.head, A.values, nullptr, &htrace);
    auto scratch = model.head.zero_gradients();
    std::vector<double> dA;
    head_backward(model.head, htrace, 1.0, scratch, &dA);

    const std::size_t hw = static_cast<std::size_t>(A.height) * A.width;
    std::vector<double> cam(hw, 0.0);
    for (int c = 0; c < A.channels; ++c) {
        double alpha = 0.0;
        for (std::size_t p = 0; p < hw; ++p) alpha += dA[c * hw + p];
        alpha /= static_cast<double>(hw);
        for (std::size_t p = 0; p < hw; ++p) cam[p] += alpha * A.values[c * hw + p];
    }
    for (double& v : cam) v = std::max(v, 0.0);

    ImageTensor out(size.height, size.width);
    out.values = imaging::resample_bilinear(cam, A.height, A.width, size.height, size.width);
    const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
    const double min = *lo, range = *hi - *lo;
    if (!(range > 0.0)) {
        std::fill(out.values.begin(), out.values.end(), 0.0);
        return out;
    }
    for (double& v : out.values) v = (v - min) / range;
    return out;
}

ImageTensor gradcam_mean(const TrainedCXRModel& model, const std::vector<ImageTensor>& images,
                         std::span<const int> labels, std::span<const double> probabilities, double threshold) {
    if (!model.extractor->differentiable())
        throw CapabilityError("Grad-CAM needs a differentiable convolutional extractor");
    if (images.size() != labels.size() || images.size() != probabilities.size())
        throw PreconditionError("gradcam_mean: images, labels and probabilities differ in length");
    const auto size = model.extractor->input_size();
    ImageTensor sum(size.height, size.width);
    std::size_t count = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (labels[i] != 1 || !(probabilities[i] > threshold)) continue;
        const auto map = gradcam(model, images[i]);
        for (std::size_t p = 0; p < map.values.size(); ++p) sum.values[p] += map.values[p];
        ++count;
    }
    if (count == 0) throw PreconditionError("gradcam_mean: no expired patient with probability above the threshold");
    for (double& v : sum.values) v /= static_cast<double>(count);
    return sum;
}

}  // namespace fuseclin::cxrnet
