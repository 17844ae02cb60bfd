#include "fuseclin/synth.hpp"

#include "fuseclin/error.hpp"
#include "fuseclin/image_io.hpp"
#include "fuseclin/io.hpp"
#include "fuseclin/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace fuseclin::synth {

namespace {

/// Marginal model of one continuous EHR variable. Log-normal variables are generated on the
/// log scale. `shift` is the positive-class mean shift in SDs at ehr_effect = 1.
struct Variable {
    const char* name;
    double mean;
    double sd;
    bool lognormal;
    double shift;
    double lo;
    double hi;
};

constexpr Variable kVariables[] = {
    {"age", 62.0, 15.0, false, 1.0, 18.0, 100.0},
    {"ldh", 5.75, 0.35, true, 0.5, 0.0, 1e9},
    {"hemoglobin", 13.5, 1.7, false, -0.15, 3.0, 22.0},
    {"mcv", 89.0, 5.5, false, 0.0, 50.0, 130.0},
    {"neutrophil_pct", 72.0, 11.0, false, 0.3, 0.0, 100.0},
    {"neutrophil", 1.6, 0.45, true, 0.25, 0.0, 1e9},
    {"lymphocyte_pct", 19.0, 9.0, false, -0.3, 0.0, 100.0},
    {"lymphocyte", 0.0, 0.5, true, -0.4, 0.0, 1e9},
    {"leukocyte", 1.9, 0.4, true, 0.2, 0.0, 1e9},
    {"mpv", 10.2, 1.1, false, 0.0, 4.0, 20.0},
    {"platelet", 5.3, 0.4, true, -0.1, 0.0, 1e9},
    {"crp", 4.0, 1.0, true, 0.45, 0.0, 1e9},
    {"mch", 29.5, 2.2, false, 0.0, 15.0, 45.0},
    {"ast", 3.6, 0.55, true, 0.15, 0.0, 1e9},
    {"alt", 3.4, 0.7, true, 0.0, 0.0, 1e9},
    {"aptt", 31.0, 4.5, false, 0.1, 10.0, 120.0},
    {"d_dimer", 6.6, 0.9, true, 0.35, 0.0, 1e9},
    {"prothrombin_activity", 88.0, 13.0, false, -0.15, 5.0, 150.0},
    {"inr", 0.12, 0.12, true, 0.1, 0.0, 1e9},
    {"glucose", 4.75, 0.3, true, 0.2, 0.0, 1e9},
    {"sodium", 138.0, 3.8, false, 0.05, 110.0, 170.0},
    {"potassium", 4.1, 0.5, false, 0.1, 2.0, 8.0},
    {"bun", 2.9, 0.55, true, 0.4, 0.0, 1e9},
    {"creatinine", 0.0, 0.4, true, 0.3, 0.0, 1e9},
    {"ferritin", 6.3, 0.9, true, 0.2, 0.0, 1e9},
    {"temperature", 37.2, 0.8, false, 0.05, 34.0, 42.0},
    {"spo2", 94.0, 3.5, false, -0.45, 60.0, 100.0},
    {"heart_rate", 88.0, 15.0, false, 0.15, 35.0, 180.0},
    {"systolic_bp", 127.0, 19.0, false, -0.1, 60.0, 220.0},
};

/// Base rate and positive-class odds multiplier at ehr_effect = 1.
struct Condition {
    const char* name;
    double rate;
    double odds_ratio;
};

constexpr Condition kConditions[] = {
    {"diabetes", 0.18, 1.4},  {"hyperlipidemia", 0.30, 1.1},        {"hypertension", 0.42, 1.6},
    {"ischemic_heart_disease", 0.09, 1.5}, {"chronic_kidney_disease", 0.07, 2.0}, {"copd", 0.07, 1.5},
    {"asthma", 0.06, 0.9},    {"cancer", 0.08, 1.6},                {"chronic_liver_disease", 0.03, 1.3},
    {"stroke", 0.05, 1.6},    {"chf", 0.06, 2.0},                   {"dementia", 0.05, 2.4},
};

double adjust_rate(double rate, double odds_ratio) {
    const double odds = rate / (1.0 - rate) * odds_ratio;
    return odds / (1.0 + odds);
}


std::string admission_time(Rng& rng) {
    const int day = static_cast<int>(rng.uniform_int(0, 60));
    const int month = day < 31 ? 3 : 4;
    const int dom = day < 31 ? day + 1 : day - 30;
    char buf[32];
    std::snprintf(buf, sizeof buf, "2020-%02d-%02dT%02d:%02d", month, dom, static_cast<int>(rng.uniform_int(0, 23)),
                  static_cast<int>(rng.uniform_int(0, 59)));
    return buf;
}

imaging::BBoxSet jittered_anatomy(int size, Rng& rng) {
    auto boxes = imaging::canonical_anatomy(size, size);
    const int j = std::max(1, static_cast<int>(std::lround(0.03 * size)));
    const int dx = static_cast<int>(rng.uniform_int(-j, j));
    const int dy = static_cast<int>(rng.uniform_int(-j, j));
    for (auto* b : {&boxes.left_lung, &boxes.right_lung, &boxes.mediastinum, &boxes.trachea}) {
        b->x0 = std::clamp(b->x0 + dx, 0, size - 2);
        b->x1 = std::clamp(b->x1 + dx, b->x0 + 1, size);
        b->y0 = std::clamp(b->y0 + dy, 0, size - 2);
        b->y1 = std::clamp(b->y1 + dy, b->y0 + 1, size);
    }
    return boxes;
}

double ellipse_d2(double x, double y, double cx, double cy, double rx, double ry) {
    const double u = (x - cx) / rx, v = (y - cy) / ry;
    return u * u + v * v;
}

double box_ellipse_d2(const imaging::BBox& b, double x, double y) {
    return ellipse_d2(x, y, 0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1), 0.5 * (b.x1 - b.x0), 0.5 * (b.y1 - b.y0));
}

imaging::ImageTensor render_image(int size, const imaging::BBoxSet& boxes, const std::vector<Blob>& blobs, Rng& rng) {
    imaging::ImageTensor img(size, size);
    struct Wave {
        double fx, fy, phase, amp;
    };
    Wave waves[3];
    for (auto& w : waves) w = {rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.0, 2.0 * M_PI), rng.uniform(0.01, 0.03)};
    const double exposure = rng.normal(0.0, 0.04);
    const double c = 0.5 * size;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            double v = ellipse_d2(px, py, c, 0.55 * size, 0.49 * size, 0.52 * size) <= 1.0 ? 0.52 : 0.08;
            if (box_ellipse_d2(boxes.left_lung, px, py) <= 1.0 || box_ellipse_d2(boxes.right_lung, px, py) <= 1.0) v = 0.24;
            if (box_ellipse_d2(boxes.mediastinum, px, py) <= 1.0) v = 0.62;
            const auto& t = boxes.trachea;
            const double tw = 0.25 * (t.x1 - t.x0);
            if (t.contains(x, y) && std::abs(px - 0.5 * (t.x0 + t.x1)) <= tw) v = 0.2;
            for (const auto& w : waves) v += w.amp * std::sin(2.0 * M_PI * (w.fx * px + w.fy * py) / size + w.phase);
            for (const auto& b : blobs) {
                const double d2 = ellipse_d2(px, py, b.cx, b.cy, b.rx, b.ry);
                if (d2 < 1.0) v += b.amplitude * (1.0 - d2);
            }
            v += exposure + rng.normal(0.0, 0.02);
            img.at(y, x) = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
        }
    }
    return img;
}

std::vector<Blob> draw_blobs(const imaging::BBoxSet& boxes, int label, double img_effect, Rng& rng) {
    std::vector<Blob> out;
    for (const bool left : {true, false}) {
        const auto& box = left ? boxes.left_lung : boxes.right_lung;
        const double bw = box.x1 - box.x0, bh = box.y1 - box.y0;
        Blob b;
        b.lung = left ? "left" : "right";
        b.rx = rng.uniform(0.25, 0.35) * bw;
        b.ry = rng.uniform(0.2, 0.3) * bh;
        b.cx = rng.uniform(box.x0 + b.rx, box.x1 - b.rx);
        b.cy = rng.uniform(box.y0 + b.ry, box.y1 - b.ry);
        b.amplitude = std::max(0.0, 0.1 + img_effect * label + rng.normal(0.0, 0.04));
        out.push_back(b);
    }
    return out;
}

}  // namespace

void SynthSpec::validate() const {
    if (!(pos_rate > 0.0 && pos_rate < 1.0)) throw PreconditionError("pos_rate must lie in (0, 1)");
    if (image_size < 64) throw PreconditionError("image_size must be at least 64");
    if (static_cast<double>(n) * pos_rate < 8.0)
        throw PreconditionError("infeasible synthetic spec: n * pos_rate must be at least 8");
    if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw PreconditionError("missing_rate must lie in [0, 1)");
    if (!(exclusion_rate >= 0.0 && exclusion_rate < 0.2)) throw PreconditionError("exclusion_rate must lie in [0, 0.2)");
    if (!(out_of_range_rate >= 0.0 && out_of_range_rate < 0.2))
        throw PreconditionError("out_of_range_rate must lie in [0, 0.2)");
    if (id_prefix.empty()) throw PreconditionError("id_prefix must not be empty");
}

nlohmann::json SynthSpec::to_json() const {
    return {{"n", n},
            {"pos_rate", pos_rate},
            {"seed", seed},
            {"ehr_effect", ehr_effect},
            {"img_effect", img_effect},
            {"image_size", image_size},
            {"missing_rate", missing_rate},
            {"exclusion_rate", exclusion_rate},
            {"out_of_range_rate", out_of_range_rate},
            {"id_prefix", id_prefix}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
    SynthSpec s;
    s.n = j.value("n", s.n);
    s.pos_rate = j.value("pos_rate", s.pos_rate);
    s.seed = j.value("seed", s.seed);
    s.ehr_effect = j.value("ehr_effect", s.ehr_effect);
    s.img_effect = j.value("img_effect", s.img_effect);
    s.image_size = j.value("image_size", s.image_size);
    s.missing_rate = j.value("missing_rate", s.missing_rate);
    s.exclusion_rate = j.value("exclusion_rate", s.exclusion_rate);
    s.out_of_range_rate = j.value("out_of_range_rate", s.out_of_range_rate);
    s.id_prefix = j.value("id_prefix", s.id_prefix);
    s.validate();
    return s;
}

SynthCohort generate_cohort(const SynthSpec& spec) {
    spec.validate();
    const auto schema = cohort::default_schema();
    const auto& cols = schema.columns();
    SynthCohort out;
    out.spec = spec;
    out.table.schema = schema;
    out.table.columns.resize(cols.size());
    out.table.provenance = "synthetic:" + spec.id_prefix + ":" + std::to_string(spec.seed);

    const Rng root(spec.seed);
    Rng label_rng = root.derive("labels");
    const int width = static_cast<int>(std::to_string(spec.n).size());

    for (std::size_t i = 0; i < spec.n; ++i) {
        std::string num = std::to_string(i + 1);
        const std::string id = spec.id_prefix + "-" + std::string(static_cast<std::size_t>(width) - num.size(), '0') + num;
        const int y = label_rng.bernoulli(spec.pos_rate) ? 1 : 0;
        Rng rng = Rng(patient_seed(spec.seed, id)).derive("ehr");

        // exclusion rule drawn per patient: 0 none, 1 under age, 2 no admission, 3 no CXR, 4 no outcome
        int excluded = 0;
        for (int rule = 1; rule <= 4; ++rule)
            if (excluded == 0 && rng.bernoulli(spec.exclusion_rate)) excluded = rule;

        std::map<std::string, std::optional<double>> nums;
        std::map<std::string, std::optional<std::string>> labels;
        for (const auto& v : kVariables) {
            double z = rng.normal() + spec.ehr_effect * v.shift * y;
            double value = v.lognormal ? std::exp(v.mean + v.sd * z) : v.mean + v.sd * z;
            value = std::clamp(value, v.lo, v.hi);
            std::optional<double> cell = value;
            const bool is_ferritin = std::string_view(v.name) == "ferritin";
            const double miss = is_ferritin ? 0.6 : (std::string_view(v.name) == "age" ? 0.0 : spec.missing_rate);
            if (rng.bernoulli(miss)) cell.reset();
            nums[v.name] = cell;
        }
        if (excluded == 1) nums["age"] = static_cast<double>(rng.uniform_int(5, 16));
        // a few implausible vital readings (device errors, wrong units)
        if (rng.bernoulli(spec.out_of_range_rate)) nums["temperature"] = rng.uniform(96.0, 101.0);
        if (rng.bernoulli(spec.out_of_range_rate)) nums["spo2"] = 0.0;
        if (rng.bernoulli(spec.out_of_range_rate)) nums["heart_rate"] = rng.uniform(320.0, 400.0);

        const double age = nums["age"].value_or(62.0);
        labels["sex"] = rng.bernoulli(0.55 + 0.05 * spec.ehr_effect * y) ? "M" : "F";
        for (const auto& c : kConditions) {
            // comorbidity prevalence rises with age and, for positives, with the planted effect
            double rate = adjust_rate(c.rate, std::exp((age - 62.0) / 30.0));
            rate = adjust_rate(rate, std::pow(c.odds_ratio, spec.ehr_effect * y));
            labels[c.name] = rng.bernoulli(rate) ? "1" : "0";
        }
        labels["patient_id"] = id;
        labels["admission_time"] = admission_time(rng);
        if (excluded == 2) labels["admission_time"].reset();
        nums["expired_30d"] = static_cast<double>(y);
        if (excluded == 4) nums["expired_30d"].reset();

        for (std::size_t c = 0; c < cols.size(); ++c) {
            const auto& name = cols[c].name;
            const auto kind = cols[c].kind;
            if (kind == cohort::ColumnKind::numeric || kind == cohort::ColumnKind::vital ||
                kind == cohort::ColumnKind::outcome) {
                auto& cell = nums[name];
                // round to plausible reporting precision
                if (cell && kind != cohort::ColumnKind::outcome)
                    cell = std::round(*cell * 100.0) / 100.0;
                out.table.columns[c].numbers.push_back(cell);
            } else {
                out.table.columns[c].labels.push_back(labels[name]);
            }
        }
        if (excluded != 4) out.labels[id] = y;
        if (excluded == 3) continue;

        Rng img_rng = Rng(patient_seed(spec.seed, id)).derive("image");
        auto boxes = jittered_anatomy(spec.image_size, img_rng);
        auto blobs = draw_blobs(boxes, y, spec.img_effect, img_rng);
        auto img = render_image(spec.image_size, boxes, blobs, img_rng);
        out.images.push_back({id, std::move(img), boxes});
        out.blobs[id] = std::move(blobs);
    }
    const auto positives = std::count_if(out.labels.begin(), out.labels.end(), [](const auto& kv) { return kv.second == 1; });
    if (positives < 8) throw PreconditionError("synthetic cohort drew fewer than 8 positives; increase n or pos_rate");
    return out;
}

std::vector<std::filesystem::path> write_cohort(const SynthCohort& cohort, const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> written;
    io::write_file_atomic(dir / "ehr.csv", cohort::to_csv(cohort.table));
    written.push_back(dir / "ehr.csv");
    for (const auto& rec : cohort.images) {
        auto img_path = dir / "images" / (rec.patient_id + ".png");
        io::write_file_atomic(img_path, imaging::encode_png(rec.image));
        written.push_back(img_path);
        auto box_path = dir / "bboxes" / (rec.patient_id + ".json");
        io::write_file_atomic(box_path, rec.boxes->to_json().dump(2) + "\n");
        written.push_back(box_path);
    }
    const auto positives = std::count_if(cohort.labels.begin(), cohort.labels.end(), [](const auto& kv) { return kv.second == 1; });
    nlohmann::json meta = {{"spec", cohort.spec.to_json()},
                           {"rows", cohort.table.rows()},
                           {"images", cohort.images.size()},
                           {"labelled", cohort.labels.size()},
                           {"positives", positives}};
    io::write_file_atomic(dir / "synth.json", meta.dump(2) + "\n");
    written.push_back(dir / "synth.json");
    return written;
}

}  // namespace fuseclin::synth
