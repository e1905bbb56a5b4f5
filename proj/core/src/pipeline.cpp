#include "fyseg/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "fyseg/errors.hpp"
#include "fyseg/labels.hpp"

namespace fs = std::filesystem;

namespace fyseg {

namespace {

std::size_t nearest_source(std::size_t dst, std::size_t dst_extent, std::size_t src_extent) {
    // floor((dst + 0.5) * src / dst_extent) in integer arithmetic
    const std::size_t v = ((2 * dst + 1) * src_extent) / (2 * dst_extent);
    return std::min(v, src_extent - 1);
}

}  // namespace

ImageU8 resize(const ImageU8& raster, std::size_t target_width, std::size_t target_height,
               ResizeMode mode) {
    if (target_width == 0 || target_height == 0)
        throw std::invalid_argument("resize: target extents must be positive");
    if (target_width == raster.width && target_height == raster.height) return raster;

    ImageU8 out(target_width, target_height, raster.channels);
    if (mode == ResizeMode::Nearest) {
        for (std::size_t y = 0; y < target_height; ++y) {
            const std::size_t sy = nearest_source(y, target_height, raster.height);
            for (std::size_t x = 0; x < target_width; ++x) {
                const std::size_t sx = nearest_source(x, target_width, raster.width);
                for (std::size_t c = 0; c < raster.channels; ++c)
                    out.at(x, y, c) = raster.at(sx, sy, c);
            }
        }
        return out;
    }

    const double xscale = static_cast<double>(raster.width) / static_cast<double>(target_width);
    const double yscale = static_cast<double>(raster.height) / static_cast<double>(target_height);
    for (std::size_t y = 0; y < target_height; ++y) {
        const double sy = (static_cast<double>(y) + 0.5) * yscale - 0.5;
        const double fy = sy - std::floor(sy);
        const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
        const std::size_t ya = static_cast<std::size_t>(std::clamp<std::int64_t>(
            y0, 0, static_cast<std::int64_t>(raster.height) - 1));
        const std::size_t yb = static_cast<std::size_t>(std::clamp<std::int64_t>(
            y0 + 1, 0, static_cast<std::int64_t>(raster.height) - 1));
        for (std::size_t x = 0; x < target_width; ++x) {
            const double sx = (static_cast<double>(x) + 0.5) * xscale - 0.5;
            const double fx = sx - std::floor(sx);
            const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
            const std::size_t xa = static_cast<std::size_t>(std::clamp<std::int64_t>(
                x0, 0, static_cast<std::int64_t>(raster.width) - 1));
            const std::size_t xb = static_cast<std::size_t>(std::clamp<std::int64_t>(
                x0 + 1, 0, static_cast<std::int64_t>(raster.width) - 1));
            for (std::size_t c = 0; c < raster.channels; ++c) {
                const double top = (1.0 - fx) * raster.at(xa, ya, c) + fx * raster.at(xb, ya, c);
                const double bot = (1.0 - fx) * raster.at(xa, yb, c) + fx * raster.at(xb, yb, c);
                const double v = (1.0 - fy) * top + fy * bot;
                out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

PixelMask resize_mask(const PixelMask& mask, std::size_t target_width,
                      std::size_t target_height) {
    if (target_width == 0 || target_height == 0)
        throw std::invalid_argument("resize_mask: target extents must be positive");
    if (target_width == mask.width && target_height == mask.height) return mask;
    PixelMask out(target_width, target_height);
    for (std::size_t y = 0; y < target_height; ++y) {
        const std::size_t sy = nearest_source(y, target_height, mask.height);
        for (std::size_t x = 0; x < target_width; ++x)
            out.at(x, y) = mask.at(nearest_source(x, target_width, mask.width), sy);
    }
    return out;
}

std::vector<BoundingBox> derive_box(const PixelMask& mask) {
    constexpr std::size_t kMinComponentPixels = 9;
    const std::size_t w = mask.width, h = mask.height;
    std::vector<std::uint8_t> seen(w * h, 0);
    std::vector<BoundingBox> boxes;
    std::vector<std::size_t> stack;

    for (std::size_t start = 0; start < w * h; ++start) {
        if (!mask.labels[start] || seen[start]) continue;
        std::size_t min_x = w, max_x = 0, min_y = h, max_y = 0, count = 0;
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const std::size_t x = p % w, y = p / w;
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_y = std::min(min_y, y);
            max_y = std::max(max_y, y);
            ++count;
            const std::size_t neighbors[4][2] = {
                {x > 0 ? x - 1 : x, y}, {x + 1 < w ? x + 1 : x, y},
                {x, y > 0 ? y - 1 : y}, {x, y + 1 < h ? y + 1 : y}};
            for (const auto& nb : neighbors) {
                const std::size_t q = nb[1] * w + nb[0];
                if (q != p && mask.labels[q] && !seen[q]) {
                    seen[q] = 1;
                    stack.push_back(q);
                }
            }
        }
        if (count < kMinComponentPixels) continue;
        boxes.push_back(BoundingBox::from_corners(
            static_cast<double>(min_x) / static_cast<double>(w),
            static_cast<double>(min_y) / static_cast<double>(h),
            static_cast<double>(max_x + 1) / static_cast<double>(w),
            static_cast<double>(max_y + 1) / static_cast<double>(h)));
    }
    return boxes;
}

std::vector<LabeledSample> load_dataset(const std::string& image_dir,
                                        const std::string& mask_dir) {
    if (!fs::is_directory(image_dir)) throw DataError(image_dir + ": not a directory");
    if (!fs::is_directory(mask_dir)) throw DataError(mask_dir + ": not a directory");

    std::map<std::string, fs::path> images, masks;
    for (const auto& e : fs::directory_iterator(image_dir))
        if (e.is_regular_file() && e.path().extension() == ".ppm")
            images[e.path().stem().string()] = e.path();
    for (const auto& e : fs::directory_iterator(mask_dir))
        if (e.is_regular_file() && e.path().extension() == ".pgm")
            masks[e.path().stem().string()] = e.path();

    std::vector<std::string> errors;
    std::vector<LabeledSample> samples;
    for (const auto& [stem, ipath] : images) {
        const auto mi = masks.find(stem);
        if (mi == masks.end()) {
            errors.push_back(stem + ": image without mask");
            continue;
        }
        try {
            LabeledSample s;
            s.stem = stem;
            s.image = read_pnm(ipath.string());
            s.mask = read_mask(mi->second.string());
            if (s.image.width != s.mask.width || s.image.height != s.mask.height) {
                errors.push_back(stem + ": image and mask extents differ");
                continue;
            }
            s.boxes = derive_box(s.mask);
            samples.push_back(std::move(s));
        } catch (const DataError& e) {
            errors.push_back(e.what());
        }
    }
    for (const auto& [stem, mpath] : masks)
        if (images.find(stem) == images.end()) errors.push_back(stem + ": mask without image");

    if (!errors.empty()) {
        std::string joined = "load_dataset: " + std::to_string(errors.size()) + " problem(s):";
        for (const std::string& e : errors) joined += "\n  " + e;
        throw DataError(joined);
    }
    return samples;
}

namespace {

struct PixelRect {
    std::size_t x = 0, y = 0, w = 0, h = 0;
};

PixelRect expanded_pixel_rect(const BoundingBox& box, double margin_fraction,
                              std::size_t width, std::size_t height) {
    const double mx = margin_fraction * box.w;
    const double my = margin_fraction * box.h;
    const double px1 = (box.x1() - mx) * static_cast<double>(width);
    const double py1 = (box.y1() - my) * static_cast<double>(height);
    const double px2 = (box.x2() + mx) * static_cast<double>(width);
    const double py2 = (box.y2() + my) * static_cast<double>(height);

    const auto x1 = static_cast<std::int64_t>(std::floor(px1));
    const auto y1 = static_cast<std::int64_t>(std::floor(py1));
    const auto x2 = static_cast<std::int64_t>(std::ceil(px2));
    const auto y2 = static_cast<std::int64_t>(std::ceil(py2));
    const std::int64_t cx1 = std::clamp<std::int64_t>(x1, 0, static_cast<std::int64_t>(width));
    const std::int64_t cy1 = std::clamp<std::int64_t>(y1, 0, static_cast<std::int64_t>(height));
    const std::int64_t cx2 = std::clamp<std::int64_t>(x2, 0, static_cast<std::int64_t>(width));
    const std::int64_t cy2 = std::clamp<std::int64_t>(y2, 0, static_cast<std::int64_t>(height));
    if (cx2 <= cx1 || cy2 <= cy1)
        throw std::invalid_argument("crop_and_pad: box does not intersect the image");
    PixelRect r;
    r.x = static_cast<std::size_t>(cx1);
    r.y = static_cast<std::size_t>(cy1);
    r.w = static_cast<std::size_t>(cx2 - cx1);
    r.h = static_cast<std::size_t>(cy2 - cy1);
    return r;
}

CropRecord make_record(const PixelRect& rect, std::size_t src_w, std::size_t src_h,
                       std::size_t target_w, std::size_t target_h) {
    CropRecord rec;
    rec.source_width = src_w;
    rec.source_height = src_h;
    rec.crop_x = rect.x;
    rec.crop_y = rect.y;
    rec.crop_width = rect.w;
    rec.crop_height = rect.h;
    rec.padded_side = std::max(rect.w, rect.h);
    rec.pad_left = (rec.padded_side - rect.w) / 2;
    rec.pad_top = (rec.padded_side - rect.h) / 2;
    rec.target_width = target_w;
    rec.target_height = target_h;
    return rec;
}

}  // namespace

std::pair<ImageU8, CropRecord> crop_and_pad(const ImageU8& image, const BoundingBox& box,
                                            double margin_fraction, std::size_t target_width,
                                            std::size_t target_height) {
    const PixelRect rect = expanded_pixel_rect(box, margin_fraction, image.width, image.height);
    const CropRecord rec = make_record(rect, image.width, image.height, target_width,
                                       target_height);
    ImageU8 padded(rec.padded_side, rec.padded_side, image.channels);
    for (std::size_t y = 0; y < rect.h; ++y)
        for (std::size_t x = 0; x < rect.w; ++x)
            for (std::size_t c = 0; c < image.channels; ++c)
                padded.at(rec.pad_left + x, rec.pad_top + y, c) =
                    image.at(rect.x + x, rect.y + y, c);
    return {resize(padded, target_width, target_height, ResizeMode::Bilinear), rec};
}

std::pair<PixelMask, CropRecord> crop_and_pad_mask(const PixelMask& mask, const BoundingBox& box,
                                                   double margin_fraction,
                                                   std::size_t target_width,
                                                   std::size_t target_height) {
    const PixelRect rect = expanded_pixel_rect(box, margin_fraction, mask.width, mask.height);
    const CropRecord rec = make_record(rect, mask.width, mask.height, target_width,
                                       target_height);
    PixelMask padded(rec.padded_side, rec.padded_side);
    for (std::size_t y = 0; y < rect.h; ++y)
        for (std::size_t x = 0; x < rect.w; ++x)
            padded.at(rec.pad_left + x, rec.pad_top + y) = mask.at(rect.x + x, rect.y + y);
    return {resize_mask(padded, target_width, target_height), rec};
}

std::pair<std::int64_t, std::int64_t> map_patch_pixel_to_source(const CropRecord& record,
                                                                std::size_t px, std::size_t py) {
    const std::size_t ux = std::min(
        ((2 * px + 1) * record.padded_side) / (2 * record.target_width), record.padded_side - 1);
    const std::size_t uy = std::min(
        ((2 * py + 1) * record.padded_side) / (2 * record.target_height), record.padded_side - 1);
    const std::int64_t sx = static_cast<std::int64_t>(record.crop_x) +
                            (static_cast<std::int64_t>(ux) -
                             static_cast<std::int64_t>(record.pad_left));
    const std::int64_t sy = static_cast<std::int64_t>(record.crop_y) +
                            (static_cast<std::int64_t>(uy) -
                             static_cast<std::int64_t>(record.pad_top));
    return {sx, sy};
}

PixelMask map_mask_back(const PixelMask& seg_mask, const CropRecord& record) {
    if (seg_mask.width != record.target_width || seg_mask.height != record.target_height)
        throw std::invalid_argument("map_mask_back: mask " + std::to_string(seg_mask.width) +
                                    "x" + std::to_string(seg_mask.height) +
                                    " does not match record target " +
                                    std::to_string(record.target_width) + "x" +
                                    std::to_string(record.target_height));
    PixelMask out(record.source_width, record.source_height);
    for (std::size_t y = 0; y < record.crop_height; ++y) {
        const std::size_t uy = record.pad_top + y;
        const std::size_t ty = nearest_source(uy, record.padded_side, record.target_height);
        for (std::size_t x = 0; x < record.crop_width; ++x) {
            const std::size_t ux = record.pad_left + x;
            const std::size_t tx = nearest_source(ux, record.padded_side, record.target_width);
            out.at(record.crop_x + x, record.crop_y + y) = seg_mask.at(tx, ty);
        }
    }
    return out;
}

PipelineResult run_pipeline(const DetectorModel& detector, const SegmenterModel& segmenter,
                            const ImageU8& image, const PipelineConfig& cfg) {
    PipelineResult result;
    result.merged_mask = PixelMask(image.width, image.height);

    const std::size_t side = detector.cfg.input_side;
    const ImageU8 det_input = resize(image, side, side, ResizeMode::Bilinear);
    const Tensor det_tensor = image_to_tensor(det_input);
    Tensor batch({1, det_tensor.shape[0], det_tensor.shape[1], det_tensor.shape[2]},
                 det_tensor.data);
    const Tensor raw = detector_forward(detector, batch);
    auto dets = decode_head(raw, detector.cfg)[0];
    dets = nms(std::move(dets), detector.cfg.nms_iou_threshold);
    const double floor_value = cfg.confidence_floor.value_or(detector.cfg.confidence_floor);
    std::vector<Detection> kept;
    for (const Detection& d : dets)
        if (d.confidence >= floor_value && d.box.w > 0.0 && d.box.h > 0.0) kept.push_back(d);

    if (kept.empty()) {
        result.no_detections = true;
        return result;
    }

    for (const Detection& d : kept) {
        auto [patch, record] = crop_and_pad(image, d.box, cfg.crop_margin,
                                            segmenter.cfg.input_width,
                                            segmenter.cfg.input_height);
        const auto [probs, binary] = predict_mask(segmenter, image_to_tensor(patch));
        PixelMask source_mask = map_mask_back(binary, record);
        for (std::size_t i = 0; i < result.merged_mask.labels.size(); ++i)
            result.merged_mask.labels[i] |= source_mask.labels[i];
        result.detections.push_back(d);
        result.per_detection_masks.push_back(std::move(source_mask));
    }
    return result;
}

namespace {

struct LesionShape {
    double cx, cy;       // pixel center
    double rx, ry;       // ellipse radii in pixels
    double amplitude;    // boundary perturbation a
    double lobes;        // k
    double phase;        // phi
    std::uint8_t color[3];
};

// Signed "inside" measure: rho <= boundary(theta).
bool inside_lesion(const LesionShape& s, double px, double py, double* rho_norm = nullptr) {
    const double dx = (px - s.cx) / s.rx;
    const double dy = (py - s.cy) / s.ry;
    const double rho = std::hypot(dx, dy);
    const double theta = std::atan2(dy, dx);
    const double boundary = 1.0 + s.amplitude * std::sin(s.lobes * theta + s.phase);
    if (rho_norm) *rho_norm = boundary > 0.0 ? rho / boundary : 2.0;
    return rho <= boundary;
}

std::uint8_t clamp_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

void draw_hair(ImageU8& img, Rng& rng) {
    const double side = static_cast<double>(img.width);
    const double x0 = rng.uniform(0.0, side);
    const double y0 = rng.uniform(0.0, side);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double length = rng.uniform(side / 3.0, side);
    const double bend = rng.uniform(-length / 6.0, length / 6.0);
    const double dx = std::cos(angle), dy = std::sin(angle);
    const std::size_t steps = static_cast<std::size_t>(length * 2.0) + 2;
    for (std::size_t i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(steps);
        const double wob = bend * std::sin(std::numbers::pi * t);
        const double x = x0 + t * length * dx - wob * dy;
        const double y = y0 + t * length * dy + wob * dx;
        const auto ix = static_cast<std::int64_t>(std::lround(x));
        const auto iy = static_cast<std::int64_t>(std::lround(y));
        if (ix < 0 || iy < 0 || ix >= static_cast<std::int64_t>(img.width) ||
            iy >= static_cast<std::int64_t>(img.height))
            continue;
        img.at(static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), 0) = 30;
        img.at(static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), 1) = 26;
        img.at(static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), 2) = 24;
    }
}

void draw_ruler(ImageU8& img, Rng& rng) {
    const bool horizontal = rng.chance(0.5);
    const std::size_t extent = img.width;
    const std::size_t offset = 2 + static_cast<std::size_t>(rng.uniform_index(extent / 6));
    const std::size_t tick_len = 3;
    for (std::size_t p = 2; p + 2 < extent; p += 4)
        for (std::size_t k = 0; k < tick_len; ++k) {
            const std::size_t x = horizontal ? p : offset + k;
            const std::size_t y = horizontal ? offset + k : p;
            if (x < img.width && y < img.height) {
                img.at(x, y, 0) = 72;
                img.at(x, y, 1) = 72;
                img.at(x, y, 2) = 78;
            }
        }
}

void draw_bubble(ImageU8& img, Rng& rng) {
    const double side = static_cast<double>(img.width);
    const double bx = rng.uniform(side * 0.1, side * 0.9);
    const double by = rng.uniform(side * 0.1, side * 0.9);
    const double br = rng.uniform(1.5, 3.5);
    const std::int64_t lo_x = static_cast<std::int64_t>(std::floor(bx - br - 1));
    const std::int64_t lo_y = static_cast<std::int64_t>(std::floor(by - br - 1));
    for (std::int64_t y = lo_y; y <= static_cast<std::int64_t>(std::ceil(by + br + 1)); ++y)
        for (std::int64_t x = lo_x; x <= static_cast<std::int64_t>(std::ceil(bx + br + 1)); ++x) {
            if (x < 0 || y < 0 || x >= static_cast<std::int64_t>(img.width) ||
                y >= static_cast<std::int64_t>(img.height))
                continue;
            const double d = std::hypot(static_cast<double>(x) + 0.5 - bx,
                                        static_cast<double>(y) + 0.5 - by);
            if (d > br) continue;
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                                        c);
                img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) =
                    clamp_u8(0.45 * v + 0.55 * 250.0);
            }
        }
}

}  // namespace

SynthSample generate_sample(const SynthSpec& spec, std::size_t index) {
    if (spec.image_side < 16) throw std::invalid_argument("SynthSpec: image_side too small");
    if (spec.lesion_count_min > spec.lesion_count_max ||
        spec.radius_min <= 0.0 || spec.radius_max < spec.radius_min)
        throw std::invalid_argument("SynthSpec: inconsistent lesion ranges");

    Rng rng(Rng::mix(spec.seed, index));
    const std::size_t side = spec.image_side;
    SynthSample sample;
    sample.image = ImageU8(side, side, 3);
    sample.mask = PixelMask(side, side);

    const double base_r = 205.0 + rng.uniform(-14.0, 14.0);
    const double base_g = 168.0 + rng.uniform(-12.0, 12.0);
    const double base_b = 150.0 + rng.uniform(-12.0, 12.0);

    const bool use_frame = spec.frame && rng.chance(0.5);
    const double frame_radius = 0.47 * static_cast<double>(side);
    const double mid = static_cast<double>(side) / 2.0;

    const std::size_t lesion_count = static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(spec.lesion_count_min),
        static_cast<std::int64_t>(spec.lesion_count_max)));

    const double worst_reach =
        spec.radius_max * (1.0 + spec.irregularity) + 2.0;
    if (lesion_count > 0 && 2.0 * worst_reach >= static_cast<double>(side))
        throw std::invalid_argument("SynthSpec: lesions too large for image side " +
                                    std::to_string(side));

    std::vector<LesionShape> lesions;
    for (std::size_t li = 0; li < lesion_count; ++li) {
        LesionShape s{};
        const double r0 = rng.uniform(spec.radius_min, spec.radius_max);
        const double aspect = rng.uniform(0.7, 1.0);
        s.rx = rng.chance(0.5) ? r0 : r0 * aspect;
        s.ry = s.rx == r0 ? r0 * aspect : r0;
        s.amplitude = spec.irregularity * rng.uniform(0.75, 1.0);
        s.lobes = static_cast<double>(rng.uniform_int(3, 7));
        s.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double reach = std::max(s.rx, s.ry) * (1.0 + s.amplitude) + 2.0;

        // Overlap and frame constraints are best effort; the last attempt is
        // accepted as-is so requested lesions always materialize.
        bool placed = false;
        for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
            s.cx = rng.uniform(reach, static_cast<double>(side) - reach);
            s.cy = rng.uniform(reach, static_cast<double>(side) - reach);
            if (attempt == 49) break;
            if (use_frame &&
                std::hypot(s.cx - mid, s.cy - mid) + reach > frame_radius - 1.0)
                continue;
            placed = true;
            for (const LesionShape& other : lesions) {
                const double other_reach =
                    std::max(other.rx, other.ry) * (1.0 + other.amplitude);
                if (std::hypot(s.cx - other.cx, s.cy - other.cy) < reach + other_reach + 2.0) {
                    placed = false;
                    break;
                }
            }
        }

        s.color[0] = clamp_u8(115.0 + spec.lesion_red_shift + rng.uniform(-20.0, 20.0));
        s.color[1] = clamp_u8(82.0 + rng.uniform(-16.0, 16.0));
        s.color[2] = clamp_u8(70.0 + rng.uniform(-14.0, 14.0));
        lesions.push_back(s);
    }

    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const double px = static_cast<double>(x) + 0.5;
            const double py = static_cast<double>(y) + 0.5;
            double r = base_r, g = base_g, b = base_b;
            for (const LesionShape& s : lesions) {
                double rho = 0.0;
                if (inside_lesion(s, px, py, &rho)) {
                    const double shade = 0.72 + 0.28 * std::min(1.0, rho);
                    r = s.color[0] * shade;
                    g = s.color[1] * shade;
                    b = s.color[2] * shade;
                    sample.mask.at(x, y) = 1;
                    break;
                }
            }
            sample.image.at(x, y, 0) = clamp_u8(r);
            sample.image.at(x, y, 1) = clamp_u8(g);
            sample.image.at(x, y, 2) = clamp_u8(b);
        }

    if (spec.hair && rng.chance(0.6)) {
        const std::int64_t hairs = rng.uniform_int(1, 3);
        for (std::int64_t i = 0; i < hairs; ++i) draw_hair(sample.image, rng);
    }
    if (spec.ruler && rng.chance(0.5)) draw_ruler(sample.image, rng);
    if (spec.bubbles && rng.chance(0.5)) {
        const std::int64_t bubbles = rng.uniform_int(1, 3);
        for (std::int64_t i = 0; i < bubbles; ++i) draw_bubble(sample.image, rng);
    }
    if (use_frame) {
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const double d = std::hypot(static_cast<double>(x) + 0.5 - mid,
                                            static_cast<double>(y) + 0.5 - mid);
                if (d > frame_radius) {
                    sample.image.at(x, y, 0) = 10;
                    sample.image.at(x, y, 1) = 8;
                    sample.image.at(x, y, 2) = 8;
                }
            }
    }
    if (spec.noise > 0.0) {
        for (std::size_t i = 0; i < sample.image.pixels.size(); ++i)
            sample.image.pixels[i] = clamp_u8(
                static_cast<double>(sample.image.pixels[i]) +
                rng.uniform(-spec.noise, spec.noise));
    }

    // Analytic tight bounds of each boundary curve, for generator-level tests.
    for (const LesionShape& s : lesions) {
        double min_x = 1e30, min_y = 1e30, max_x = -1e30, max_y = -1e30;
        constexpr int kSamples = 4096;
        for (int i = 0; i < kSamples; ++i) {
            const double theta = 2.0 * std::numbers::pi * i / kSamples;
            const double b = 1.0 + s.amplitude * std::sin(s.lobes * theta + s.phase);
            const double x = s.cx + s.rx * b * std::cos(theta);
            const double y = s.cy + s.ry * b * std::sin(theta);
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_y = std::min(min_y, y);
            max_y = std::max(max_y, y);
        }
        sample.intended_boxes.push_back(BoundingBox::from_corners(
            min_x / static_cast<double>(side), min_y / static_cast<double>(side),
            max_x / static_cast<double>(side), max_y / static_cast<double>(side)));
    }
    return sample;
}

std::vector<SynthSampleInfo> generate_synthetic(const SynthSpec& spec,
                                                const std::string& out_dir) {
    const fs::path root(out_dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    fs::create_directories(root / "labels");

    std::vector<SynthSampleInfo> infos(spec.sample_count);
    std::vector<std::string> stems(spec.sample_count);
    for (std::size_t i = 0; i < spec.sample_count; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "s%05zu", i);
        stems[i] = buf;
    }

    for (std::size_t i = 0; i < spec.sample_count; ++i) {
        const SynthSample sample = generate_sample(spec, i);
        write_pnm((root / "images" / (stems[i] + ".ppm")).string(), sample.image);
        write_mask((root / "masks" / (stems[i] + ".pgm")).string(), sample.mask);
        std::vector<LabeledBox> labels;
        for (const BoundingBox& b : derive_box(sample.mask)) labels.push_back({0, b});
        write_label_file((root / "labels" / (stems[i] + ".txt")).string(), labels);
        infos[i].stem = stems[i];
        infos[i].intended_boxes = sample.intended_boxes;
    }

    const auto [train, val] = split_dataset(stems, spec.split_ratio, spec.seed);
    std::map<std::string, bool> in_train;
    for (const std::string& s : train) in_train[s] = true;
    for (const std::string& s : val) in_train[s] = false;

    std::ofstream manifest((root / "manifest.txt").string());
    if (!manifest) throw DataError(out_dir + "/manifest.txt: cannot open for writing");
    for (std::size_t i = 0; i < spec.sample_count; ++i) {
        infos[i].train_split = in_train[stems[i]];
        manifest << stems[i] << " " << (infos[i].train_split ? "train" : "val") << "\n";
    }
    return infos;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestEntry e;
        std::string split;
        if (!(ss >> e.stem >> split) || (split != "train" && split != "val"))
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed manifest line");
        e.train_split = split == "train";
        out.push_back(e);
    }
    return out;
}

}  // namespace fyseg
