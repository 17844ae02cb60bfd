#include "fuseclin/imaging.hpp"

#include "fuseclin/error.hpp"
#include "fuseclin/image_io.hpp"
#include "fuseclin/io.hpp"

#include <algorithm>
#include <cmath>

namespace fuseclin::imaging {

namespace {

constexpr std::string_view kVariantNames[] = {"original", "trachea_zero", "trachea_noise", "bg_trachea_zero",
                                              "bg_trachea_noise"};

nlohmann::json box_json(const BBox& b) { return {b.x0, b.y0, b.x1, b.y1}; }

BBox box_from_json(const nlohmann::json& j, const char* name) {
    if (!j.contains(name)) throw DataError(std::string("bbox set lacks '") + name + "'");
    const auto& a = j.at(name);
    if (!a.is_array() || a.size() != 4) throw DataError(std::string("bbox '") + name + "' must be [x0,y0,x1,y1]");
    return {a[0].get<int>(), a[1].get<int>(), a[2].get<int>(), a[3].get<int>()};
}

void check_box(const BBox& b, const char* name, int width, int height) {
    if (!(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= width && 0 <= b.y0 && b.y0 < b.y1 && b.y1 <= height))
        throw DataError(std::string("bbox '") + name + "' [" + std::to_string(b.x0) + "," + std::to_string(b.y0) +
                        "," + std::to_string(b.x1) + "," + std::to_string(b.y1) + "] outside image bounds " +
                        std::to_string(width) + "x" + std::to_string(height));
}

}  // namespace

void ImageTensor::validate() const {
    if (height < 8 || width < 8)
        throw DataError("image must be at least 8x8, got " + std::to_string(height) + "x" + std::to_string(width));
    if (values.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
        throw DataError("image buffer size does not match its dimensions");
    for (double v : values)
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("image intensity outside [0,1]");
}

void BBoxSet::validate(int width, int height) const {
    check_box(left_lung, "left_lung", width, height);
    check_box(right_lung, "right_lung", width, height);
    check_box(mediastinum, "mediastinum", width, height);
    check_box(trachea, "trachea", width, height);
}

nlohmann::json BBoxSet::to_json() const {
    return {{"left_lung", box_json(left_lung)},
            {"right_lung", box_json(right_lung)},
            {"mediastinum", box_json(mediastinum)},
            {"trachea", box_json(trachea)}};
}

BBoxSet BBoxSet::from_json(const nlohmann::json& j) {
    return {box_from_json(j, "left_lung"), box_from_json(j, "right_lung"), box_from_json(j, "mediastinum"),
            box_from_json(j, "trachea")};
}

std::string_view to_string(AugmentVariant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

AugmentVariant parse_variant(std::string_view s) {
    for (auto v : kAllVariants)
        if (to_string(v) == s) return v;
    throw DataError("unknown augmentation variant '" + std::string(s) + "'");
}

std::vector<bool> affected_mask(const BBoxSet& boxes, AugmentVariant v, int height, int width) {
    std::vector<bool> mask(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), false);
    if (v == AugmentVariant::original) return mask;
    const bool background = v == AugmentVariant::bg_trachea_zero || v == AugmentVariant::bg_trachea_noise;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            bool hit = boxes.trachea.contains(x, y);
            if (background && !hit)
                hit = !(boxes.left_lung.contains(x, y) || boxes.right_lung.contains(x, y) ||
                        boxes.mediastinum.contains(x, y));
            mask[static_cast<std::size_t>(y) * width + x] = hit;
        }
    }
    return mask;
}

ImageTensor apply_bbox_variant(const ImageTensor& img, const BBoxSet& boxes, AugmentVariant v, std::uint64_t seed) {
    boxes.validate(img.width, img.height);
    ImageTensor out = img;
    if (v == AugmentVariant::original) return out;
    const bool noise = v == AugmentVariant::trachea_noise || v == AugmentVariant::bg_trachea_noise;
    const auto mask = affected_mask(boxes, v, img.height, img.width);
    Rng rng(seed);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        out.values[i] = noise ? static_cast<double>(rng.uniform_int(0, 255)) / 255.0 : 0.0;
    }
    return out;
}

std::uint64_t variant_seed(std::uint64_t global_seed, std::string_view patient_id, AugmentVariant v) {
    return splitmix64_mix(patient_seed(global_seed, patient_id) + static_cast<std::uint64_t>(v));
}

const StoreEntry& ImageStore::at(const std::string& patient_id) const {
    auto it = entries.find(patient_id);
    if (it == entries.end()) throw PreconditionError("image store has no patient '" + patient_id + "'");
    return it->second;
}

ImageStore precompute_variants(const std::vector<ImageRecord>& records, std::uint64_t global_seed) {
    ImageStore store;
    store.global_seed = global_seed;
    for (const auto& rec : records) {
        if (!rec.boxes) throw PreconditionError("missing bbox set for patient '" + rec.patient_id + "'");
        if (store.entries.contains(rec.patient_id))
            throw DataError("duplicate patient '" + rec.patient_id + "' in image records");
        try {
            rec.boxes->validate(rec.image.width, rec.image.height);
        } catch (const DataError& e) {
            throw DataError("patient '" + rec.patient_id + "': " + e.what());
        }
        StoreEntry entry;
        entry.boxes = *rec.boxes;
        for (auto v : kAllVariants)
            entry.views[static_cast<std::size_t>(v)] =
                apply_bbox_variant(rec.image, *rec.boxes, v, variant_seed(global_seed, rec.patient_id, v));
        store.entries.emplace(rec.patient_id, std::move(entry));
    }
    return store;
}

std::vector<std::filesystem::path> ImageStore::save(const std::filesystem::path& dir) const {
    std::vector<std::filesystem::path> written;
    nlohmann::json index = {{"global_seed", global_seed}, {"variants", nlohmann::json::array()}};
    for (auto v : kAllVariants) index["variants"].push_back(std::string(to_string(v)));
    nlohmann::json patients = nlohmann::json::object();
    for (const auto& [id, entry] : entries) {
        for (auto v : kAllVariants) {
            auto path = dir / id / (std::string(to_string(v)) + ".png");
            io::write_file_atomic(path, encode_png(entry.view(v)));
            written.push_back(path);
        }
        patients[id] = entry.boxes.to_json();
    }
    index["patients"] = patients;
    auto index_path = dir / "index.json";
    io::write_file_atomic(index_path, index.dump(2) + "\n");
    written.push_back(index_path);
    return written;
}

ImageStore ImageStore::load(const std::filesystem::path& dir) {
    auto index = nlohmann::json::parse(io::read_file(dir / "index.json"));
    ImageStore store;
    store.global_seed = index.at("global_seed").get<std::uint64_t>();
    for (const auto& [id, boxes] : index.at("patients").items()) {
        StoreEntry entry;
        entry.boxes = BBoxSet::from_json(boxes);
        for (auto v : kAllVariants)
            entry.views[static_cast<std::size_t>(v)] = read_image(dir / id / (std::string(to_string(v)) + ".png"));
        const auto& orig = entry.view(AugmentVariant::original);
        for (const auto& view : entry.views)
            if (view.height != orig.height || view.width != orig.width)
                throw DataError("image store: variant dimensions differ for patient '" + id + "'");
        store.entries.emplace(id, std::move(entry));
    }
    return store;
}

const ImageTensor& sample_training_view(const ImageStore& store, const std::string& patient_id, bool augment_bbox,
                                        Rng& rng) {
    const auto& entry = store.at(patient_id);
    if (!augment_bbox) return entry.view(AugmentVariant::original);
    return entry.views[rng.index(kAllVariants.size())];
}

OnlineAugmentParams draw_online_augment(Rng& rng) {
    OnlineAugmentParams p;
    p.flip = rng.bernoulli(0.5);
    p.brightness = rng.uniform(0.0, 0.05);
    return p;
}

ImageTensor flip_left_right(const ImageTensor& img) {
    ImageTensor out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) out.at(y, x) = img.at(y, img.width - 1 - x);
    return out;
}

ImageTensor apply_online_augment(const ImageTensor& img, const OnlineAugmentParams& params) {
    ImageTensor out = params.flip ? flip_left_right(img) : img;
    if (params.brightness != 0.0)
        for (double& v : out.values) v = std::clamp(v + params.brightness, 0.0, 1.0);
    return out;
}

ImageTensor online_augment(const ImageTensor& img, Rng& rng) { return apply_online_augment(img, draw_online_augment(rng)); }

BBoxSet canonical_anatomy(int height, int width) {
    auto sx = [width](double f) { return static_cast<int>(std::lround(f * width)); };
    auto sy = [height](double f) { return static_cast<int>(std::lround(f * height)); };
    BBoxSet b;
    b.right_lung = {sx(0.08), sy(0.16), sx(0.44), sy(0.84)};
    b.left_lung = {sx(0.56), sy(0.16), sx(0.92), sy(0.84)};
    b.mediastinum = {sx(0.40), sy(0.22), sx(0.60), sy(0.86)};
    b.trachea = {sx(0.45), sy(0.03), sx(0.55), sy(0.30)};
    return b;
}

std::vector<double> resample_bilinear(std::span<const double> values, int height, int width, int out_height,
                                      int out_width) {
    std::vector<double> out(static_cast<std::size_t>(out_height) * static_cast<std::size_t>(out_width));
    auto src = [&](int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; };
    const double sy = out_height > 1 ? static_cast<double>(height - 1) / (out_height - 1) : 0.0;
    const double sx = out_width > 1 ? static_cast<double>(width - 1) / (out_width - 1) : 0.0;
    for (int y = 0; y < out_height; ++y) {
        const double fy = y * sy;
        const int y0 = std::min(static_cast<int>(fy), height - 1);
        const int y1 = std::min(y0 + 1, height - 1);
        const double ty = fy - y0;
        for (int x = 0; x < out_width; ++x) {
            const double fx = x * sx;
            const int x0 = std::min(static_cast<int>(fx), width - 1);
            const int x1 = std::min(x0 + 1, width - 1);
            const double tx = fx - x0;
            const double top = src(y0, x0) + tx * (src(y0, x1) - src(y0, x0));
            const double bottom = src(y1, x0) + tx * (src(y1, x1) - src(y1, x0));
            out[static_cast<std::size_t>(y) * out_width + x] = top + ty * (bottom - top);
        }
    }
    return out;
}

ImageTensor resize(const ImageTensor& img, int height, int width) {
    if (height <= 0 || width <= 0) throw PreconditionError("resize: zero-area target");
    if (height < 8 || width < 8) throw PreconditionError("resize: target must be at least 8x8");
    if (height == img.height && width == img.width) return img;
    ImageTensor out(height, width);
    out.values = resample_bilinear(img.values, img.height, img.width, height, width);
    for (double& v : out.values) v = std::clamp(v, 0.0, 1.0);
    return out;
}

}  // namespace fuseclin::imaging
