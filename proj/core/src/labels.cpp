#include "fyseg/labels.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "fyseg/errors.hpp"

namespace fyseg {

namespace {

std::string format_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

std::vector<LabeledBox> read_label_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    std::vector<LabeledBox> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        LabeledBox lb;
        if (!(ss >> lb.class_index >> lb.box.cx >> lb.box.cy >> lb.box.w >> lb.box.h))
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed label line");
        out.push_back(lb);
    }
    return out;
}

void write_label_file(const std::string& path, const std::vector<LabeledBox>& boxes) {
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    for (const LabeledBox& lb : boxes)
        out << lb.class_index << " " << format_value(lb.box.cx) << " " << format_value(lb.box.cy)
            << " " << format_value(lb.box.w) << " " << format_value(lb.box.h) << "\n";
    if (!out) throw DataError(path + ": write failed");
}

std::vector<Detection> read_detection_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open");
    std::vector<Detection> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        Detection d;
        if (!(ss >> d.class_index >> d.box.cx >> d.box.cy >> d.box.w >> d.box.h >> d.confidence))
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed detection line");
        d.objectness = d.confidence;
        d.class_score = 1.0;
        out.push_back(d);
    }
    return out;
}

void write_detection_file(const std::string& path, const std::vector<Detection>& detections) {
    std::ofstream out(path);
    if (!out) throw DataError(path + ": cannot open for writing");
    for (const Detection& d : detections)
        out << d.class_index << " " << format_value(d.box.cx) << " " << format_value(d.box.cy)
            << " " << format_value(d.box.w) << " " << format_value(d.box.h) << " "
            << format_value(d.confidence) << "\n";
    if (!out) throw DataError(path + ": write failed");
}

}  // namespace fyseg
