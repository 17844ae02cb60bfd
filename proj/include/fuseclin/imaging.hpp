#pragma once

#include "fuseclin/rng.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fuseclin::imaging {

/// Grayscale image, row-major, intensities in [0, 1].
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    ImageTensor() = default;
    ImageTensor(int h, int w, double fill = 0.0)
        : height(h), width(w), values(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

    double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return values.size(); }

    /// Throws DataError unless height, width >= 8 and every value lies in [0, 1].
    void validate() const;

    friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

/// Half-open pixel box [x0, x1) x [y0, y1).
struct BBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    long area() const { return static_cast<long>(x1 - x0) * (y1 - y0); }
    friend bool operator==(const BBox&, const BBox&) = default;
};

struct BBoxSet {
    BBox left_lung, right_lung, mediastinum, trachea;

    /// Throws DataError naming the offending box when it falls outside width x height.
    void validate(int width, int height) const;
    nlohmann::json to_json() const;
    static BBoxSet from_json(const nlohmann::json& j);
    friend bool operator==(const BBoxSet&, const BBoxSet&) = default;
};

enum class AugmentVariant : std::uint8_t { original, trachea_zero, trachea_noise, bg_trachea_zero, bg_trachea_noise };

inline constexpr std::array<AugmentVariant, 5> kAllVariants = {
    AugmentVariant::original, AugmentVariant::trachea_zero, AugmentVariant::trachea_noise,
    AugmentVariant::bg_trachea_zero, AugmentVariant::bg_trachea_noise};

std::string_view to_string(AugmentVariant v);
AugmentVariant parse_variant(std::string_view s);

/// Pixels a variant rewrites: the trachea box for the trachea variants; the complement of
/// (left lung U right lung U mediastinum) together with the trachea box for the background
/// variants; nothing for the original.
std::vector<bool> affected_mask(const BBoxSet& boxes, AugmentVariant v, int height, int width);

/// Zero or seeded-noise fill of the variant's affected region; every other pixel is copied
/// unchanged. Noise values are uniform over the 256 8-bit levels k/255 so that stored
/// variants stay exact under 8-bit lossless encoding.
ImageTensor apply_bbox_variant(const ImageTensor& img, const BBoxSet& boxes, AugmentVariant v, std::uint64_t seed);

struct ImageRecord {
    std::string patient_id;
    ImageTensor image;
    std::optional<BBoxSet> boxes;
};

struct StoreEntry {
    std::array<ImageTensor, 5> views;  // indexed by AugmentVariant
    BBoxSet boxes;

    const ImageTensor& view(AugmentVariant v) const { return views[static_cast<std::size_t>(v)]; }
};

/// Original plus the four pre-computed bounding-box variants per patient.
struct ImageStore {
    std::uint64_t global_seed = 2020;
    std::map<std::string, StoreEntry> entries;

    std::size_t view_count() const { return entries.size() * kAllVariants.size(); }
    const StoreEntry& at(const std::string& patient_id) const;

    /// Layout: <dir>/<patient>/<variant>.png plus <dir>/index.json. Returns written files.
    std::vector<std::filesystem::path> save(const std::filesystem::path& dir) const;
    static ImageStore load(const std::filesystem::path& dir);
};

/// Per-image noise seed for a variant: derived from (global seed, patient id, variant).
std::uint64_t variant_seed(std::uint64_t global_seed, std::string_view patient_id, AugmentVariant v);

ImageStore precompute_variants(const std::vector<ImageRecord>& records, std::uint64_t global_seed = 2020);

/// Uniform draw over the five stored views when augment_bbox is set, otherwise the original.
const ImageTensor& sample_training_view(const ImageStore& store, const std::string& patient_id, bool augment_bbox,
                                        Rng& rng);

struct OnlineAugmentParams {
    bool flip = false;
    double brightness = 0.0;
};

/// Left-right mirror with probability 0.5, then one additive brightness delta in [0, 0.05].
OnlineAugmentParams draw_online_augment(Rng& rng);
ImageTensor apply_online_augment(const ImageTensor& img, const OnlineAugmentParams& params);
ImageTensor online_augment(const ImageTensor& img, Rng& rng);
ImageTensor flip_left_right(const ImageTensor& img);

/// Plausible frontal-view anatomy layout scaled to the image size (patient right lung on
/// the image left).
BBoxSet canonical_anatomy(int height, int width);

/// Corner-aligned bilinear resampling of an arbitrary real-valued grid (no clamping).
std::vector<double> resample_bilinear(std::span<const double> values, int height, int width, int out_height,
                                      int out_width);

/// Bilinear resize with corner-aligned sampling; corners map onto corners.
ImageTensor resize(const ImageTensor& img, int height, int width);

}  // namespace fuseclin::imaging
