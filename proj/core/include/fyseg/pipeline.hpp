#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fyseg/detector.hpp"
#include "fyseg/geometry.hpp"
#include "fyseg/image_io.hpp"
#include "fyseg/mask.hpp"
#include "fyseg/segmenter.hpp"

namespace fyseg {

struct LabeledSample {
    ImageU8 image;
    PixelMask mask;
    std::vector<BoundingBox> boxes;  // derived from the mask
    std::string stem;
};

// Everything needed to map segmenter-space pixels back to the source image:
// crop rectangle in source pixels, symmetric zero-pad to a square, resize to
// the segmenter extents.
struct CropRecord {
    std::size_t source_width = 0, source_height = 0;
    std::size_t crop_x = 0, crop_y = 0;        // top-left of the crop in the source
    std::size_t crop_width = 0, crop_height = 0;
    std::size_t pad_left = 0, pad_top = 0;
    std::size_t padded_side = 0;               // square side after padding
    std::size_t target_width = 0, target_height = 0;
};

struct SynthSpec {
    std::size_t sample_count = 100;
    std::size_t image_side = 64;
    std::size_t lesion_count_min = 1;
    std::size_t lesion_count_max = 2;
    double radius_min = 6.0;   // pixels
    double radius_max = 13.0;
    double irregularity = 0.25;  // boundary amplitude a in r(theta) = r0*(1 + a*sin(k*theta + phi))
    bool hair = true;
    bool frame = true;
    bool ruler = true;
    bool bubbles = true;
    double noise = 8.0;          // uniform per-pixel amplitude, 8-bit units
    double split_ratio = 0.7;
    std::uint64_t seed = 1;
    // Optional appearance shift for transfer experiments.
    double lesion_red_shift = 0.0;
};

// Nearest keeps masks binary, bilinear for images. Identical extents return
// the input bit-for-bit.
enum class ResizeMode { Bilinear, Nearest };
ImageU8 resize(const ImageU8& raster, std::size_t target_width, std::size_t target_height,
               ResizeMode mode);
PixelMask resize_mask(const PixelMask& mask, std::size_t target_width,
                      std::size_t target_height);

// 4-connected components; per component the tight pixel box in normalized
// center form. Components under 9 pixels are dropped as noise.
std::vector<BoundingBox> derive_box(const PixelMask& mask);

// PPM images and PGM masks matched by stem; any malformed or unpaired file
// is collected into the thrown DataError.
std::vector<LabeledSample> load_dataset(const std::string& image_dir,
                                        const std::string& mask_dir);

// Seeded shuffle, then prefix split of floor(n * ratio) training samples.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_dataset(const std::vector<T>& samples,
                                                        double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0))
        throw std::invalid_argument("split_dataset: ratio must be in (0,1)");
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    // floor of the mathematical product; guard the representation error of
    // ratios like 0.7 that are just below their decimal value.
    const auto train_count = static_cast<std::size_t>(
        std::floor(static_cast<long double>(samples.size()) * ratio + 1e-9L));
    std::pair<std::vector<T>, std::vector<T>> out;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < train_count ? out.first : out.second).push_back(samples[order[i]]);
    return out;
}

// Expands the box by margin_fraction per side, clamps to the image, crops,
// zero-pads to a square of the larger crop side, resizes to the target.
std::pair<ImageU8, CropRecord> crop_and_pad(const ImageU8& image, const BoundingBox& box,
                                            double margin_fraction, std::size_t target_width,
                                            std::size_t target_height);

// Mask view of the same transform (nearest resize).
std::pair<PixelMask, CropRecord> crop_and_pad_mask(const PixelMask& mask, const BoundingBox& box,
                                                   double margin_fraction,
                                                   std::size_t target_width,
                                                   std::size_t target_height);

// Maps a target-space pixel back to source coordinates through the record.
std::pair<std::int64_t, std::int64_t> map_patch_pixel_to_source(const CropRecord& record,
                                                                std::size_t px, std::size_t py);

// Inverse of crop_and_pad for masks: nearest un-resize, strip the pad bands,
// place into a zero canvas at the crop rectangle.
PixelMask map_mask_back(const PixelMask& seg_mask, const CropRecord& record);

struct PipelineResult {
    std::vector<Detection> detections;
    std::vector<PixelMask> per_detection_masks;  // source resolution
    PixelMask merged_mask;                       // pixel-wise OR
    bool no_detections = false;
};

struct PipelineConfig {
    double crop_margin = 0.1;
    std::optional<double> confidence_floor;  // overrides the detector config when set
};

// Two-phase inference: resize to the detector input, decode + NMS, drop weak
// detections, then crop/pad/segment/map-back per surviving detection.
// Never touches ground truth.
PipelineResult run_pipeline(const DetectorModel& detector, const SegmenterModel& segmenter,
                            const ImageU8& image, const PipelineConfig& cfg);

struct SynthSampleInfo {
    std::string stem;
    std::vector<BoundingBox> intended_boxes;  // analytic bounds from the generator
    bool train_split = false;
};

// Writes images/, masks/, labels/ and manifest.txt under out_dir;
// bit-identical for identical spec and seed.
std::vector<SynthSampleInfo> generate_synthetic(const SynthSpec& spec,
                                                const std::string& out_dir);

// In-memory single sample; used by generate_synthetic and by tests.
struct SynthSample {
    ImageU8 image;
    PixelMask mask;
    std::vector<BoundingBox> intended_boxes;
};
SynthSample generate_sample(const SynthSpec& spec, std::size_t index);

// manifest.txt: one "stem train|val" line per sample.
struct ManifestEntry {
    std::string stem;
    bool train_split = false;
};
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace fyseg
