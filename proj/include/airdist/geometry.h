#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "airdist/errors.h"

namespace airdist {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2() = default;
    Vec2(double x_, double y_) : x(x_), y(y_) {}

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double a) const { return {a * x, a * y}; }
    double dot(const Vec2& o) const { return x * o.x + y * o.y; }
    double cross(const Vec2& o) const { return x * o.y - y * o.x; }
    double norm() const { return std::hypot(x, y); }
    double squared_norm() const { return x * x + y * y; }
};

inline double distance(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

// A ring is a closed sequence of vertices; the last vertex is NOT repeated.
using Ring = std::vector<Vec2>;

// Signed area of a ring (positive for counter-clockwise orientation).
inline double ring_signed_area(const Ring& ring) {
    double a = 0.0;
    const std::size_t n = ring.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& p = ring[i];
        const Vec2& q = ring[(i + 1) % n];
        a += p.cross(q);
    }
    return 0.5 * a;
}

// Simple polygon with optional holes. Outer ring CCW, holes CW by convention;
// normalize() enforces the convention regardless of input orientation.
struct Polygon {
    Ring outer;
    std::vector<Ring> holes;

    void normalize() {
        if (ring_signed_area(outer) < 0.0) std::reverse(outer.begin(), outer.end());
        for (Ring& h : holes)
            if (ring_signed_area(h) > 0.0) std::reverse(h.begin(), h.end());
    }

    double area() const {
        double a = std::abs(ring_signed_area(outer));
        for (const Ring& h : holes) a -= std::abs(ring_signed_area(h));
        return a;
    }

    struct BBox {
        double xmin, ymin, xmax, ymax;
    };

    BBox bbox() const {
        BBox b{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
               std::numeric_limits<double>::lowest(), std::numeric_limits<double>::lowest()};
        for (const Vec2& p : outer) {
            b.xmin = std::min(b.xmin, p.x);
            b.ymin = std::min(b.ymin, p.y);
            b.xmax = std::max(b.xmax, p.x);
            b.ymax = std::max(b.ymax, p.y);
        }
        return b;
    }
};

// Even-odd point-in-ring test; points exactly on an edge count as inside
// (within a small slack proportional to the edge length).
inline bool point_in_ring(const Vec2& p, const Ring& ring) {
    bool inside = false;
    const std::size_t n = ring.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2& a = ring[j];
        const Vec2& b = ring[i];
        if ((b.y > p.y) != (a.y > p.y)) {
            const double t = (p.y - b.y) / (a.y - b.y);
            const double xcross = b.x + t * (a.x - b.x);
            if (p.x < xcross) inside = !inside;
        }
    }
    return inside;
}

inline bool point_in_polygon(const Vec2& p, const Polygon& poly) {
    if (!point_in_ring(p, poly.outer)) return false;
    for (const Ring& h : poly.holes)
        if (point_in_ring(p, h)) return false;
    return true;
}

inline Vec2 polygon_centroid(const Polygon& poly) {
    // shoelace relative to the first vertex, otherwise tiny polygons far from
    // the origin lose the centroid to cancellation
    const Vec2 o = poly.outer.front();
    double a = 0.0, cx = 0.0, cy = 0.0;
    const auto accumulate_ring = [&](const Ring& r) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            const Vec2 p{r[i].x - o.x, r[i].y - o.y};
            const std::size_t n = (i + 1) % r.size();
            const Vec2 q{r[n].x - o.x, r[n].y - o.y};
            const double cr = p.cross(q);
            a += cr;
            cx += (p.x + q.x) * cr;
            cy += (p.y + q.y) * cr;
        }
    };
    accumulate_ring(poly.outer);
    for (const Ring& h : poly.holes) accumulate_ring(h);
    if (a == 0.0) {
        // degenerate polygon: fall back to the vertex mean
        Vec2 c{0.0, 0.0};
        for (const Vec2& p : poly.outer) {
            c.x += p.x;
            c.y += p.y;
        }
        c.x /= static_cast<double>(poly.outer.size());
        c.y /= static_cast<double>(poly.outer.size());
        return c;
    }
    return {o.x + cx / (3.0 * a), o.y + cy / (3.0 * a)};
}

// Distance from a point to a segment.
inline double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
    const Vec2 ab = b - a;
    const double len2 = ab.squared_norm();
    if (len2 == 0.0) return distance(p, a);
    const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
    return distance(p, a + ab * t);
}

inline double point_ring_boundary_distance(const Vec2& p, const Ring& ring) {
    double d = std::numeric_limits<double>::max();
    const std::size_t n = ring.size();
    for (std::size_t i = 0; i < n; ++i)
        d = std::min(d, point_segment_distance(p, ring[i], ring[(i + 1) % n]));
    return d;
}

inline double point_polygon_boundary_distance(const Vec2& p, const Polygon& poly) {
    double d = point_ring_boundary_distance(p, poly.outer);
    for (const Ring& h : poly.holes) d = std::min(d, point_ring_boundary_distance(p, h));
    return d;
}

// True if two segments properly intersect or touch.
inline bool segments_intersect(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
    auto orient = [](const Vec2& p, const Vec2& q, const Vec2& r) {
        const double v = (q - p).cross(r - p);
        if (v > 0) return 1;
        if (v < 0) return -1;
        return 0;
    };
    auto on_seg = [](const Vec2& p, const Vec2& q, const Vec2& r) {
        return std::min(p.x, q.x) <= r.x && r.x <= std::max(p.x, q.x) &&
               std::min(p.y, q.y) <= r.y && r.y <= std::max(p.y, q.y);
    };
    const int o1 = orient(a, b, c), o2 = orient(a, b, d);
    const int o3 = orient(c, d, a), o4 = orient(c, d, b);
    if (o1 != o2 && o3 != o4) return true;
    if (o1 == 0 && on_seg(a, b, c)) return true;
    if (o2 == 0 && on_seg(a, b, d)) return true;
    if (o3 == 0 && on_seg(c, d, a)) return true;
    if (o4 == 0 && on_seg(c, d, b)) return true;
    return false;
}

// Detects self-intersection of a ring (shared endpoints of adjacent edges are fine).
inline bool ring_self_intersects(const Ring& ring) {
    const std::size_t n = ring.size();
    if (n < 3) return true;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& a = ring[i];
        const Vec2& b = ring[(i + 1) % n];
        for (std::size_t j = i + 1; j < n; ++j) {
            // skip edges sharing a vertex with edge i
            if (j == i || (j + 1) % n == i || j == (i + 1) % n) continue;
            const Vec2& c = ring[j];
            const Vec2& d = ring[(j + 1) % n];
            if (segments_intersect(a, b, c, d)) return true;
        }
    }
    return false;
}

// Sutherland-Hodgman clip of a ring against an axis-aligned rectangle.
// Works for arbitrary simple rings since the clip region is convex.
inline Ring clip_ring_to_rect(const Ring& ring, double xmin, double ymin, double xmax,
                              double ymax) {
    Ring poly = ring;
    auto clip_halfplane = [&poly](auto inside, auto intersect) {
        Ring out;
        const std::size_t n = poly.size();
        for (std::size_t i = 0; i < n; ++i) {
            const Vec2& cur = poly[i];
            const Vec2& prev = poly[(i + n - 1) % n];
            const bool cur_in = inside(cur);
            const bool prev_in = inside(prev);
            if (cur_in) {
                if (!prev_in) out.push_back(intersect(prev, cur));
                out.push_back(cur);
            } else if (prev_in) {
                out.push_back(intersect(prev, cur));
            }
        }
        poly = std::move(out);
    };
    auto lerp_x = [](const Vec2& a, const Vec2& b, double x) {
        const double t = (x - a.x) / (b.x - a.x);
        return Vec2{x, a.y + t * (b.y - a.y)};
    };
    auto lerp_y = [](const Vec2& a, const Vec2& b, double y) {
        const double t = (y - a.y) / (b.y - a.y);
        return Vec2{a.x + t * (b.x - a.x), y};
    };
    clip_halfplane([&](const Vec2& p) { return p.x >= xmin; },
                   [&](const Vec2& a, const Vec2& b) { return lerp_x(a, b, xmin); });
    if (poly.empty()) return poly;
    clip_halfplane([&](const Vec2& p) { return p.x <= xmax; },
                   [&](const Vec2& a, const Vec2& b) { return lerp_x(a, b, xmax); });
    if (poly.empty()) return poly;
    clip_halfplane([&](const Vec2& p) { return p.y >= ymin; },
                   [&](const Vec2& a, const Vec2& b) { return lerp_y(a, b, ymin); });
    if (poly.empty()) return poly;
    clip_halfplane([&](const Vec2& p) { return p.y <= ymax; },
                   [&](const Vec2& a, const Vec2& b) { return lerp_y(a, b, ymax); });
    return poly;
}

// Overlap area between an axis-aligned cell and a polygon with holes.
inline double rect_polygon_overlap_area(double xmin, double ymin, double xmax, double ymax,
                                        const Polygon& poly) {
    auto clipped_area = [&](const Ring& r) {
        const Ring c = clip_ring_to_rect(r, xmin, ymin, xmax, ymax);
        if (c.size() < 3) return 0.0;
        return std::abs(ring_signed_area(c));
    };
    double a = clipped_area(poly.outer);
    for (const Ring& h : poly.holes) a -= clipped_area(h);
    return std::max(0.0, a);
}

}  // namespace airdist
