#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "rpm/panelgen.hpp"

// Cell rasterizer: a painter-ordered list of solid shapes sampled on a 4x4
// subpixel grid per pixel and box-averaged. Coordinates are image pixels with
// y growing downward; angles wrap the same axis convention.
namespace rpm::gen {

namespace {

constexpr double kTau = 6.283185307179586476925286766559;

struct SceneObject {
    enum Kind { PolyFill, PolyOutline, Disk, Ring, Sector } kind;
    double value = 0.0;  // gray level painted where covered
    double cx = 0.0, cy = 0.0;
    double r0 = 0.0, r1 = 0.0;  // inner/outer radius
    double a0 = 0.0, arc = 0.0;
    int n_sides = 3;
    double nx[8] = {0}, ny[8] = {0};  // outward face normals
    double apothem = 0.0, apothem_inner = 0.0;

    double bound_radius() const { return r1; }

    bool covers(double x, double y) const {
        const double dx = x - cx;
        const double dy = y - cy;
        switch (kind) {
            case PolyFill: {
                for (int k = 0; k < n_sides; ++k)
                    if (dx * nx[k] + dy * ny[k] > apothem) return false;
                return true;
            }
            case PolyOutline: {
                bool near_edge = false;
                for (int k = 0; k < n_sides; ++k) {
                    const double d = dx * nx[k] + dy * ny[k];
                    if (d > apothem) return false;
                    if (d > apothem_inner) near_edge = true;
                }
                return near_edge;
            }
            case Disk:
                return dx * dx + dy * dy <= r1 * r1;
            case Ring: {
                const double rr = dx * dx + dy * dy;
                return rr >= r0 * r0 && rr <= r1 * r1;
            }
            case Sector: {
                const double rr = dx * dx + dy * dy;
                if (rr < r0 * r0 || rr > r1 * r1) return false;
                double t = std::atan2(dy, dx) - a0;
                t -= kTau * std::floor(t / kTau);
                return t <= arc;
            }
        }
        return false;
    }
};

SceneObject make_polygon(int n_sides, double cx, double cy, double radius, double rot,
                         double value, double outline_width = -1.0) {
    SceneObject o;
    o.kind = outline_width > 0.0 ? SceneObject::PolyOutline : SceneObject::PolyFill;
    o.value = value;
    o.cx = cx;
    o.cy = cy;
    o.r1 = radius;
    o.n_sides = std::clamp(n_sides, 3, 8);
    o.apothem = radius * std::cos(kTau / 2.0 / o.n_sides);
    o.apothem_inner = o.apothem - outline_width;
    for (int k = 0; k < o.n_sides; ++k) {
        const double a = rot + kTau * (k + 0.5) / o.n_sides;
        o.nx[k] = std::cos(a);
        o.ny[k] = std::sin(a);
    }
    return o;
}

struct ConceptReader {
    const std::map<std::string, double>& values;
    const DatasetSpec& spec;
    mutable std::set<std::string> consumed;

    bool has(const std::string& name) const { return values.count(name) != 0; }

    // Normalized concept value in [0,1].
    double unit(const std::string& name) const {
        auto it = values.find(name);
        if (it == values.end()) throw ConfigError("renderer requires concept: " + name);
        const ConceptSpec& c = spec.concept_spec(name);
        if (it->second < c.low - 1e-9 || it->second > c.high + 1e-9)
            throw ContractError("concept " + name + " value outside its range");
        consumed.insert(name);
        return (it->second - c.low) / (c.high - c.low);
    }

    double unit_or(const std::string& name, double fallback) const {
        return has(name) ? unit(name) : fallback;
    }

    void finish() const {
        for (const auto& [name, v] : values)
            if (!consumed.count(name))
                throw ConfigError("concept " + name + " unknown to renderer " + spec.renderer);
    }
};

std::vector<SceneObject> build_scene(const ConceptReader& cr, const DatasetSpec& spec) {
    const double mid = spec.image_size / 2.0;
    const double offx = cr.has("offsetx") ? (2.0 * cr.unit("offsetx") - 1.0) * 12.0 : 0.0;
    const double offy = cr.has("offsety") ? (2.0 * cr.unit("offsety") - 1.0) * 12.0 : 0.0;
    const double cx = mid + offx;
    const double cy = mid + offy;

    std::vector<SceneObject> scene;
    if (spec.renderer == "polygon") {
        const int n = static_cast<int>(spec.renderer_param("n_sides", 3));
        const double radius = 8.0 + 20.0 * cr.unit("size");
        const double gray = 0.9 * cr.unit("grayscale");
        const double rot = kTau * cr.unit_or("rotation", 0.0);
        scene.push_back(make_polygon(n, cx, cy, radius, rot, gray));
    } else if (spec.renderer == "circle") {
        SceneObject ring;
        ring.kind = SceneObject::Ring;
        ring.value = 0.0;
        ring.cx = cx;
        ring.cy = cy;
        ring.r0 = 22.0;
        ring.r1 = 24.0;
        scene.push_back(ring);
        SceneObject sector;
        sector.kind = SceneObject::Sector;
        sector.value = 0.0;
        sector.cx = cx;
        sector.cy = cy;
        sector.r0 = 12.0;
        sector.r1 = 24.0;
        sector.a0 = kTau * cr.unit("position");
        sector.arc = kTau / 12.0 + cr.unit("size") * (0.75 * kTau - kTau / 12.0);
        scene.push_back(sector);
    } else if (spec.renderer == "complex_polygon") {
        const int n = static_cast<int>(spec.renderer_param("n_sides", 3));
        const double outer_r = 16.0 + 12.0 * cr.unit("size");
        scene.push_back(make_polygon(n, cx, cy, outer_r, 0.0, 0.0, 1.5));
        const double gray = 0.9 * cr.unit("grayscale");
        const double rot = kTau * cr.unit_or("rotation", 0.0);
        scene.push_back(make_polygon(n, cx, cy, 9.0, rot, gray));
    } else if (spec.renderer == "complex_circle") {
        SceneObject ring;
        ring.kind = SceneObject::Ring;
        ring.value = 0.0;
        ring.cx = cx;
        ring.cy = cy;
        ring.r0 = 22.0;
        ring.r1 = 24.0;
        scene.push_back(ring);
        SceneObject sector;
        sector.kind = SceneObject::Sector;
        sector.value = 0.0;
        sector.cx = cx;
        sector.cy = cy;
        sector.r0 = 12.0;
        sector.r1 = 24.0;
        sector.a0 = kTau * cr.unit("position");
        sector.arc = kTau / 12.0 + cr.unit("size") * (0.75 * kTau - kTau / 12.0);
        scene.push_back(sector);
        SceneObject inner;
        inner.kind = SceneObject::Disk;
        inner.value = 0.9 * cr.unit("grayscale");
        inner.cx = cx;
        inner.cy = cy;
        inner.r1 = 8.0;
        scene.push_back(inner);
    } else {
        throw ConfigError("unknown renderer: " + spec.renderer);
    }
    return scene;
}

}  // namespace

std::vector<double> render_cell(const std::map<std::string, double>& concepts,
                                const DatasetSpec& spec) {
    ConceptReader cr{concepts, spec, {}};
    const std::vector<SceneObject> scene = build_scene(cr, spec);
    cr.finish();

    const int size = spec.image_size;
    std::vector<double> img(static_cast<std::size_t>(size) * size, 1.0);

    // Tight pixel window around the scene.
    double x0 = size, x1 = 0, y0 = size, y1 = 0;
    for (const auto& o : scene) {
        x0 = std::min(x0, o.cx - o.bound_radius() - 1.0);
        x1 = std::max(x1, o.cx + o.bound_radius() + 1.0);
        y0 = std::min(y0, o.cy - o.bound_radius() - 1.0);
        y1 = std::max(y1, o.cy + o.bound_radius() + 1.0);
    }
    const int px0 = std::max(0, static_cast<int>(std::floor(x0)));
    const int px1 = std::min(size - 1, static_cast<int>(std::ceil(x1)));
    const int py0 = std::max(0, static_cast<int>(std::floor(y0)));
    const int py1 = std::min(size - 1, static_cast<int>(std::ceil(y1)));

    constexpr int kSub = 4;  // 4x4 subsamples, box-filtered
    for (int r = py0; r <= py1; ++r) {
        for (int c = px0; c <= px1; ++c) {
            double acc = 0.0;
            for (int sy = 0; sy < kSub; ++sy) {
                const double y = r + (sy + 0.5) / kSub;
                for (int sx = 0; sx < kSub; ++sx) {
                    const double x = c + (sx + 0.5) / kSub;
                    double color = 1.0;
                    for (const auto& o : scene)
                        if (o.covers(x, y)) color = o.value;
                    acc += color;
                }
            }
            img[static_cast<std::size_t>(r) * size + c] = acc / (kSub * kSub);
        }
    }
    return img;
}

}  // namespace rpm::gen
