#include "fyseg/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace fyseg {

namespace {

struct KeySpec {
    const char* key;
    const char* default_value;
    const char* help;
};

// The single source of truth for configuration keys.
const KeySpec kKeys[] = {
    {"seed", "1", "global random seed"},
    {"workers", "1", "worker threads for batch gradients (fixed-order reduction)"},
    {"workspace", ".", "root for relative paths (env FYSEG_WORKSPACE, then --workspace)"},

    {"data.dir", "data", "dataset root: images/, masks/, labels/, manifest.txt"},

    {"synth.count", "400", "number of generated samples"},
    {"synth.side", "64", "generated image side in pixels"},
    {"synth.lesions_min", "1", "minimum lesions per image"},
    {"synth.lesions_max", "2", "maximum lesions per image"},
    {"synth.radius_min", "6", "minimum lesion radius in pixels"},
    {"synth.radius_max", "13", "maximum lesion radius in pixels"},
    {"synth.irregularity", "0.25", "boundary perturbation amplitude"},
    {"synth.noise", "8", "uniform pixel noise amplitude (0..255 units)"},
    {"synth.hair", "on", "hair stroke artifacts"},
    {"synth.frame", "on", "circular black frame artifact"},
    {"synth.ruler", "on", "ruler tick artifacts"},
    {"synth.bubbles", "on", "bright bubble artifacts"},
    {"synth.red_shift", "0", "additive red shift of lesion color"},
    {"synth.split_ratio", "0.7", "training fraction of the split"},
    {"synth.out", "data", "output dataset directory"},

    {"det.grid", "4", "detector grid cells per side (S)"},
    {"det.boxes", "3", "box predictors per cell (B)"},
    {"det.classes", "1", "class count (C)"},
    {"det.anchors", "0.1x0.1,0.3x0.3,0.6x0.6", "anchor extents pw x ph, comma separated"},
    {"det.lambda_coord", "5", "localization loss weight"},
    {"det.lambda_noobj", "0.5", "no-object confidence loss weight"},
    {"det.input_side", "64", "detector input side in pixels"},
    {"det.nms_iou", "0.2", "NMS suppression IOU threshold"},
    {"det.conf_floor", "0.25", "pipeline confidence floor"},
    {"det.backbone", "8x2,16x2,32x2,32x2", "backbone stages channels x stride"},
    {"det.epochs", "200", "detector training epochs"},
    {"det.batch", "32", "detector batch size"},
    {"det.lr", "0.001", "detector learning rate"},
    {"det.checkpoint_every", "0", "epochs between checkpoint snapshots (0 = final only)"},
    {"det.checkpoint", "detector.fys", "detector checkpoint path"},

    {"seg.height", "96", "segmenter input height"},
    {"seg.width", "128", "segmenter input width"},
    {"seg.channels", "8,16", "encoder stage channels, comma separated"},
    {"seg.epochs", "200", "segmenter training epochs"},
    {"seg.batch", "32", "segmenter batch size"},
    {"seg.lr", "0.001", "segmenter learning rate"},
    {"seg.margin", "0.1", "crop margin fraction per side"},
    {"seg.mfb", "on", "median-frequency-balanced loss weights"},
    {"seg.checkpoint", "segmenter.fys", "segmenter checkpoint path"},

    {"finetune.source", "", "source checkpoint for head fine-tuning"},
    {"finetune.freeze", "on", "freeze non-head layers during fine-tuning"},

    {"infer.input", "", "directory of PPM images to run the pipeline on"},
    {"infer.out", "out", "inference output directory"},

    {"eval.pred", "out", "prediction directory"},
    {"eval.truth", "data", "ground-truth directory"},
    {"eval.ap_iou", "0.5", "AP matching IOU threshold"},
    {"eval.out", "eval.csv", "CSV report path"},

    {"gradcheck.seeds", "20", "number of seeds for the gradient suite"},
};

const KeySpec* find_key(const std::string& key) {
    for (const KeySpec& k : kKeys)
        if (key == k.key) return &k;
    return nullptr;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig::RunConfig() {
    for (const KeySpec& k : kKeys) values_[k.key] = k.default_value;
    if (const char* env = std::getenv("FYSEG_WORKSPACE"); env && *env)
        values_["workspace"] = env;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("config file: cannot open " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        set(key, value);
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!find_key(key)) throw UsageError("unknown configuration key: " + key);
    values_[key] = value;
}

std::string RunConfig::get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("unknown configuration key: " + key);
    return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        std::size_t pos = 0;
        const std::int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw UsageError(key + ": expected an integer, got '" + v + "'");
    }
}

double RunConfig::get_double(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw UsageError(key + ": expected a number, got '" + v + "'");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw UsageError(key + ": expected on/off, got '" + v + "'");
}

std::string RunConfig::workspace() const { return get_string("workspace"); }

std::string RunConfig::get_path(const std::string& key) const {
    const std::string v = get_string(key);
    if (v.empty()) return v;
    const fs::path p(v);
    if (p.is_absolute()) return v;
    return (fs::path(workspace()) / p).string();
}

std::string RunConfig::resolved_text() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
    return out.str();
}

const std::vector<std::string>& RunConfig::known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> out;
        for (const KeySpec& k : kKeys) out.push_back(k.key);
        return out;
    }();
    return keys;
}

std::string RunConfig::describe_keys() {
    std::ostringstream out;
    for (const KeySpec& k : kKeys) {
        char line[160];
        std::snprintf(line, sizeof line, "  %-22s %-28s %s\n", k.key, k.default_value, k.help);
        out << line;
    }
    return out.str();
}

DetectorConfig RunConfig::detector_config() const {
    DetectorConfig cfg;
    cfg.grid = static_cast<std::size_t>(get_int("det.grid"));
    cfg.boxes_per_cell = static_cast<std::size_t>(get_int("det.boxes"));
    cfg.classes = static_cast<std::size_t>(get_int("det.classes"));
    cfg.lambda_coord = get_double("det.lambda_coord");
    cfg.lambda_noobj = get_double("det.lambda_noobj");
    cfg.input_side = static_cast<std::size_t>(get_int("det.input_side"));
    cfg.nms_iou_threshold = get_double("det.nms_iou");
    cfg.confidence_floor = get_double("det.conf_floor");

    cfg.anchors.clear();
    std::istringstream ss(get_string("det.anchors"));
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::size_t x = item.find('x');
        if (x == std::string::npos)
            throw UsageError("det.anchors: expected pw x ph entries, got '" + item + "'");
        try {
            cfg.anchors.emplace_back(std::stod(item.substr(0, x)), std::stod(item.substr(x + 1)));
        } catch (const std::exception&) {
            throw UsageError("det.anchors: malformed entry '" + item + "'");
        }
    }
    cfg.validate();
    return cfg;
}

std::vector<BackboneStage> RunConfig::backbone_stages() const {
    std::vector<BackboneStage> stages;
    std::istringstream ss(get_string("det.backbone"));
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::size_t x = item.find('x');
        if (x == std::string::npos)
            throw UsageError("det.backbone: expected channels x stride entries, got '" + item +
                             "'");
        try {
            stages.push_back({static_cast<std::size_t>(std::stoul(item.substr(0, x))),
                              static_cast<std::size_t>(std::stoul(item.substr(x + 1)))});
        } catch (const std::exception&) {
            throw UsageError("det.backbone: malformed entry '" + item + "'");
        }
    }
    if (stages.empty()) throw UsageError("det.backbone: no stages");
    return stages;
}

SegConfig RunConfig::seg_config() const {
    SegConfig cfg;
    cfg.input_height = static_cast<std::size_t>(get_int("seg.height"));
    cfg.input_width = static_cast<std::size_t>(get_int("seg.width"));
    cfg.epochs = static_cast<std::size_t>(get_int("seg.epochs"));
    cfg.batch_size = static_cast<std::size_t>(get_int("seg.batch"));
    cfg.learning_rate = get_double("seg.lr");
    cfg.encoder_channels.clear();
    std::istringstream ss(get_string("seg.channels"));
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            cfg.encoder_channels.push_back(static_cast<std::size_t>(std::stoul(item)));
        } catch (const std::exception&) {
            throw UsageError("seg.channels: malformed entry '" + item + "'");
        }
    }
    cfg.validate();
    return cfg;
}

SynthSpec RunConfig::synth_spec() const {
    SynthSpec spec;
    spec.sample_count = static_cast<std::size_t>(get_int("synth.count"));
    spec.image_side = static_cast<std::size_t>(get_int("synth.side"));
    spec.lesion_count_min = static_cast<std::size_t>(get_int("synth.lesions_min"));
    spec.lesion_count_max = static_cast<std::size_t>(get_int("synth.lesions_max"));
    spec.radius_min = get_double("synth.radius_min");
    spec.radius_max = get_double("synth.radius_max");
    spec.irregularity = get_double("synth.irregularity");
    spec.noise = get_double("synth.noise");
    spec.hair = get_bool("synth.hair");
    spec.frame = get_bool("synth.frame");
    spec.ruler = get_bool("synth.ruler");
    spec.bubbles = get_bool("synth.bubbles");
    spec.lesion_red_shift = get_double("synth.red_shift");
    spec.split_ratio = get_double("synth.split_ratio");
    spec.seed = static_cast<std::uint64_t>(get_int("seed"));
    return spec;
}

}  // namespace fyseg
