#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "obrg/common.hpp"
#include "obrg/rng.hpp"

namespace obrg {

// 3x3 grid world: 1..3 objects, each with a shape, a color, and a cell.
inline constexpr int kGridCells = 9;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 3;
inline constexpr int kMaxObjects = 3;
// Per-cell latent channels: 3 shape one-hot, 3 color one-hot, 1 occupancy.
inline constexpr int kCellChannels = 7;
inline constexpr int kLatentDim = kGridCells * kCellChannels;  // 63

enum class ObjShape : int { circle = 0, square = 1, triangle = 2 };
enum class ObjColor : int { red = 0, green = 1, blue = 2 };

inline const char* shape_name(ObjShape s) {
    switch (s) {
        case ObjShape::circle: return "circle";
        case ObjShape::square: return "square";
        case ObjShape::triangle: return "triangle";
    }
    return "?";
}

inline const char* color_name(ObjColor c) {
    switch (c) {
        case ObjColor::red: return "red";
        case ObjColor::green: return "green";
        case ObjColor::blue: return "blue";
    }
    return "?";
}

struct SceneObject {
    ObjShape shape = ObjShape::circle;
    ObjColor color = ObjColor::red;
    int cell = 0;

    bool operator==(const SceneObject&) const = default;
};

struct Scene {
    std::vector<SceneObject> objects;  // kept sorted by cell
    uint64_t id = 0;

    bool operator==(const Scene& o) const { return objects == o.objects; }
};

// Canonical key: base-10 digit per cell, 0 empty, 1 + shape*3 + color otherwise.
inline uint64_t scene_key(const Scene& s) {
    std::array<int, kGridCells> code{};
    for (const auto& o : s.objects) code[static_cast<size_t>(o.cell)] = 1 + static_cast<int>(o.shape) * 3 + static_cast<int>(o.color);
    uint64_t k = 0;
    for (int c = 0; c < kGridCells; ++c) k = k * 10 + static_cast<uint64_t>(code[static_cast<size_t>(c)]);
    return k;
}

inline void canonicalize(Scene& s) {
    std::sort(s.objects.begin(), s.objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
    s.id = scene_key(s);
}

inline void validate_scene(const Scene& s) {
    if (s.objects.empty() || s.objects.size() > kMaxObjects) {
        fail(ErrKind::edit, "scene: object count must be 1..3");
    }
    std::array<bool, kGridCells> used{};
    for (const auto& o : s.objects) {
        if (o.cell < 0 || o.cell >= kGridCells) fail(ErrKind::edit, "scene: cell out of range");
        if (used[static_cast<size_t>(o.cell)]) fail(ErrKind::edit, "scene: two objects share a cell");
        used[static_cast<size_t>(o.cell)] = true;
    }
}

inline Scene make_scene(Rng& rng) {
    Scene s;
    const int count = 1 + static_cast<int>(rng.next_below(kMaxObjects));
    std::array<bool, kGridCells> used{};
    for (int i = 0; i < count; ++i) {
        SceneObject o;
        o.shape = static_cast<ObjShape>(rng.next_below(kNumShapes));
        o.color = static_cast<ObjColor>(rng.next_below(kNumColors));
        int cell = static_cast<int>(rng.next_below(kGridCells));
        while (used[static_cast<size_t>(cell)]) cell = static_cast<int>(rng.next_below(kGridCells));
        used[static_cast<size_t>(cell)] = true;
        o.cell = cell;
        s.objects.push_back(o);
    }
    canonicalize(s);
    return s;
}

using SceneLatent = std::vector<float>;  // length kLatentDim, values in [0,1]

inline SceneLatent render_latent(const Scene& s) {
    validate_scene(s);
    SceneLatent z(kLatentDim, 0.0f);
    for (const auto& o : s.objects) {
        const size_t base = static_cast<size_t>(o.cell) * kCellChannels;
        z[base + static_cast<size_t>(o.shape)] = 1.0f;
        z[base + 3 + static_cast<size_t>(o.color)] = 1.0f;
        z[base + 6] = 1.0f;
    }
    return z;
}

struct CellReading {
    bool occupied = false;
    ObjShape shape = ObjShape::circle;
    ObjColor color = ObjColor::red;
    float occupancy = 0.0f;     // raw occupancy channel
    float shape_margin = 0.0f;  // argmax minus runner-up
    float color_margin = 0.0f;
};

struct Classified {
    Scene scene;
    std::array<CellReading, kGridCells> cells{};
    int count = 0;
};

// Thresholds occupancy at 0.5, argmax over shape/color channels per occupied
// cell; tolerant of arbitrary real input.
inline Classified classify_latent(const SceneLatent& z) {
    if (z.size() != kLatentDim) fail(ErrKind::shape, "classify_latent: expected length 63");
    Classified out;
    for (int c = 0; c < kGridCells; ++c) {
        const size_t base = static_cast<size_t>(c) * kCellChannels;
        CellReading r;
        r.occupancy = z[base + 6];
        r.occupied = r.occupancy > 0.5f;
        auto argmax3 = [&](size_t off, float& margin) {
            int best = 0;
            for (int i = 1; i < 3; ++i)
                if (z[base + off + static_cast<size_t>(i)] > z[base + off + static_cast<size_t>(best)]) best = i;
            float runner = -std::numeric_limits<float>::infinity();
            for (int i = 0; i < 3; ++i)
                if (i != best) runner = std::max(runner, z[base + off + static_cast<size_t>(i)]);
            margin = z[base + off + static_cast<size_t>(best)] - runner;
            return best;
        };
        r.shape = static_cast<ObjShape>(argmax3(0, r.shape_margin));
        r.color = static_cast<ObjColor>(argmax3(3, r.color_margin));
        out.cells[static_cast<size_t>(c)] = r;
        if (r.occupied) {
            out.scene.objects.push_back({r.shape, r.color, c});
            ++out.count;
        }
    }
    out.scene.id = scene_key(out.scene);
    return out;
}

// ---- edits -----------------------------------------------------------------

enum class EditKind { recolor, move, remove, add };

struct Edit {
    EditKind kind;
    int object = 0;          // index into the scene's canonical object order
    ObjColor color = ObjColor::red;
    int cell = 0;
    SceneObject added{};     // for add
};

inline Scene apply_edit(const Scene& scene, const Edit& e) {
    validate_scene(scene);
    Scene out = scene;
    auto check_index = [&](int k) {
        if (k < 0 || k >= static_cast<int>(out.objects.size())) {
            fail(ErrKind::edit, "edit: object index " + std::to_string(k) + " out of range");
        }
    };
    auto cell_occupied = [&](int cell) {
        for (const auto& o : out.objects)
            if (o.cell == cell) return true;
        return false;
    };
    switch (e.kind) {
        case EditKind::recolor:
            check_index(e.object);
            out.objects[static_cast<size_t>(e.object)].color = e.color;
            break;
        case EditKind::move:
            check_index(e.object);
            if (e.cell < 0 || e.cell >= kGridCells) fail(ErrKind::edit, "edit: target cell out of range");
            if (e.cell != out.objects[static_cast<size_t>(e.object)].cell && cell_occupied(e.cell)) {
                fail(ErrKind::edit, "edit: target cell occupied");
            }
            out.objects[static_cast<size_t>(e.object)].cell = e.cell;
            break;
        case EditKind::remove:
            check_index(e.object);
            if (out.objects.size() == 1) fail(ErrKind::edit, "edit: cannot remove the only object");
            out.objects.erase(out.objects.begin() + e.object);
            break;
        case EditKind::add:
            if (out.objects.size() >= kMaxObjects) fail(ErrKind::edit, "edit: scene already has three objects");
            if (e.added.cell < 0 || e.added.cell >= kGridCells) fail(ErrKind::edit, "edit: target cell out of range");
            if (cell_occupied(e.added.cell)) fail(ErrKind::edit, "edit: target cell occupied");
            out.objects.push_back(e.added);
            break;
    }
    canonicalize(out);
    validate_scene(out);
    return out;
}

// ---- enumeration helpers (oracle tests) -------------------------------------

inline std::vector<Scene> enumerate_one_object_scenes() {
    std::vector<Scene> all;
    for (int cell = 0; cell < kGridCells; ++cell)
        for (int sh = 0; sh < kNumShapes; ++sh)
            for (int co = 0; co < kNumColors; ++co) {
                Scene s;
                s.objects.push_back({static_cast<ObjShape>(sh), static_cast<ObjColor>(co), cell});
                canonicalize(s);
                all.push_back(s);
            }
    return all;
}

inline std::vector<Scene> enumerate_two_object_scenes() {
    std::vector<Scene> all;
    for (int c1 = 0; c1 < kGridCells; ++c1)
        for (int c2 = c1 + 1; c2 < kGridCells; ++c2)
            for (int a1 = 0; a1 < kNumShapes * kNumColors; ++a1)
                for (int a2 = 0; a2 < kNumShapes * kNumColors; ++a2) {
                    Scene s;
                    s.objects.push_back({static_cast<ObjShape>(a1 / 3), static_cast<ObjColor>(a1 % 3), c1});
                    s.objects.push_back({static_cast<ObjShape>(a2 / 3), static_cast<ObjColor>(a2 % 3), c2});
                    canonicalize(s);
                    all.push_back(s);
                }
    return all;
}

}  // namespace obrg
