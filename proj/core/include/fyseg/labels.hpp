#pragma once

#include <string>
#include <vector>

#include "fyseg/detector.hpp"
#include "fyseg/geometry.hpp"

namespace fyseg {

struct LabeledBox {
    std::size_t class_index = 0;
    BoundingBox box;
};

// Ground-truth label files: one "class cx cy w h" line per object,
// normalized decimals. Detection dumps append a confidence column.
std::vector<LabeledBox> read_label_file(const std::string& path);
void write_label_file(const std::string& path, const std::vector<LabeledBox>& boxes);

std::vector<Detection> read_detection_file(const std::string& path);
void write_detection_file(const std::string& path, const std::vector<Detection>& detections);

}  // namespace fyseg
