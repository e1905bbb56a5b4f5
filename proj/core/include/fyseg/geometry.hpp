#pragma once

#include <algorithm>

namespace fyseg {

// Axis-aligned box, center form. Coordinates are normalized to [0,1] in
// dataset/label usage, but the geometry below is unit-free.
struct BoundingBox {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;

    double x1() const { return cx - w / 2.0; }
    double y1() const { return cy - h / 2.0; }
    double x2() const { return cx + w / 2.0; }
    double y2() const { return cy + h / 2.0; }
    double area() const { return w * h; }

    static BoundingBox from_corners(double x1, double y1, double x2, double y2) {
        return BoundingBox{(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1};
    }

    // Clamps the box to the unit square, preserving center where possible.
    BoundingBox clamped_unit() const {
        const double nx1 = std::clamp(x1(), 0.0, 1.0);
        const double ny1 = std::clamp(y1(), 0.0, 1.0);
        const double nx2 = std::clamp(x2(), 0.0, 1.0);
        const double ny2 = std::clamp(y2(), 0.0, 1.0);
        return from_corners(nx1, ny1, nx2, ny2);
    }
};

// Intersection area over union area; 0 for disjoint or degenerate boxes.
double iou(const BoundingBox& a, const BoundingBox& b);

}  // namespace fyseg
