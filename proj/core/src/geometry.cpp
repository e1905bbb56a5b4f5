#include "fyseg/geometry.hpp"

namespace fyseg {

double iou(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
    const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

}  // namespace fyseg
