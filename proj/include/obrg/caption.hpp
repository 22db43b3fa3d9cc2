#pragma once

#include <optional>
#include <string>
#include <vector>

#include "obrg/scene.hpp"
#include "obrg/vocab.hpp"

namespace obrg {

enum class CaptionStyle { short_form, long_form };

// Rewriting thresholds, in content tokens.
inline constexpr int kExpandBelow = 8;
inline constexpr int kCompressAbove = 24;

// short:  a red circle [and a blue square ...]
// long:   two a red circle at top left and a blue square at bottom right
inline Caption caption_of(const Scene& scene, CaptionStyle style) {
    validate_scene(scene);
    Caption c;
    if (style == CaptionStyle::long_form) c.tokens.push_back(count_token(static_cast<int>(scene.objects.size())));
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (i) c.tokens.push_back(tok::and_);
        c.tokens.push_back(tok::a);
        c.tokens.push_back(color_token(o.color));
        c.tokens.push_back(shape_token(o.shape));
        if (style == CaptionStyle::long_form) {
            c.tokens.push_back(tok::at);
            c.tokens.push_back(row_token(o.cell));
            c.tokens.push_back(col_token(o.cell));
        }
    }
    return c;
}

struct ParsedObject {
    ObjShape shape;
    ObjColor color;
    std::optional<int> cell;
};

struct ParsedCaption {
    bool long_style = false;
    std::optional<int> count_word;
    std::vector<ParsedObject> objects;  // duplicates preserved
};

inline ParsedCaption parse_caption(const Caption& c) {
    ParsedCaption out;
    const auto& t = c.tokens;
    size_t i = 0;
    auto need = [&](const char* what) {
        if (i >= t.size()) fail(ErrKind::parse, std::string("caption: unexpected end, expected ") + what);
        return t[i];
    };
    if (!t.empty() && t[0] >= tok::one && t[0] <= tok::three) {
        out.long_style = true;
        out.count_word = t[0] - tok::one + 1;
        ++i;
    }
    bool first = true;
    while (i < t.size()) {
        if (!first) {
            if (t[i] != tok::and_) fail(ErrKind::parse, "caption: expected 'and' between clauses");
            ++i;
        }
        first = false;
        if (need("'a'") != tok::a) fail(ErrKind::parse, "caption: expected article");
        ++i;
        const int col = need("color");
        if (col < tok::red || col > tok::blue) fail(ErrKind::parse, "caption: expected a color word");
        ++i;
        const int shp = need("shape");
        if (shp < tok::circle || shp > tok::triangle) fail(ErrKind::parse, "caption: expected a shape word");
        ++i;
        ParsedObject o{static_cast<ObjShape>(shp - tok::circle), static_cast<ObjColor>(col - tok::red), std::nullopt};
        if (i < t.size() && t[i] == tok::at) {
            ++i;
            const int row = need("row word");
            if (row < tok::top || row > tok::bottom) fail(ErrKind::parse, "caption: expected a row word");
            ++i;
            const int cw = need("column word");
            if (cw < tok::left || cw > tok::right) fail(ErrKind::parse, "caption: expected a column word");
            ++i;
            o.cell = (row - tok::top) * 3 + (cw - tok::left);
            out.long_style = true;
        }
        out.objects.push_back(o);
    }
    if (out.objects.empty()) fail(ErrKind::parse, "caption: no object clauses");
    return out;
}

// Exact reconstruction; requires positions on every clause. Duplicate clauses
// for the same cell collapse when they agree and are rejected otherwise.
inline Scene scene_from_parsed(const ParsedCaption& p) {
    Scene s;
    for (const auto& o : p.objects) {
        if (!o.cell) fail(ErrKind::parse, "caption: clause without position");
        SceneObject so{o.shape, o.color, *o.cell};
        bool dup = false;
        for (const auto& prev : s.objects) {
            if (prev.cell == so.cell) {
                if (!(prev == so)) fail(ErrKind::parse, "caption: conflicting clauses for one cell");
                dup = true;
            }
        }
        if (!dup) s.objects.push_back(so);
    }
    canonicalize(s);
    validate_scene(s);
    return s;
}

// Attribute-level agreement; cells are checked only where the caption states
// them. Object order in both is canonical (by cell) for grammar output, but
// short captions drop positions, so match as a multiset.
inline bool caption_consistent_with_scene(const ParsedCaption& p, const Scene& scene) {
    if (p.count_word && *p.count_word != static_cast<int>(scene.objects.size())) return false;
    std::vector<bool> taken(scene.objects.size(), false);
    for (const auto& po : p.objects) {
        bool matched = false;
        for (size_t i = 0; i < scene.objects.size(); ++i) {
            const auto& so = scene.objects[i];
            if (so.shape != po.shape || so.color != po.color) continue;
            if (po.cell && *po.cell != so.cell) continue;
            if (po.cell) {
                matched = true;  // positional clauses may repeat
                break;
            }
            if (!taken[i]) {
                taken[i] = true;
                matched = true;
                break;
            }
        }
        if (!matched) return false;
    }
    return true;
}

// Deterministic prompt rewriting: terse captions gain count and positions,
// bloated ones collapse to the short form, everything else passes through.
// Idempotent after one application.
inline Caption rewrite_caption(const Caption& c) {
    const ParsedCaption p = parse_caption(c);
    const int n = static_cast<int>(c.tokens.size());
    if (!p.long_style && n < kExpandBelow) {
        // Invent positions: occupied cells assigned in row-major order.
        Scene s;
        int next_cell = 0;
        for (const auto& o : p.objects) {
            if (static_cast<int>(s.objects.size()) >= kMaxObjects) break;
            s.objects.push_back({o.shape, o.color, next_cell++});
        }
        canonicalize(s);
        return caption_of(s, CaptionStyle::long_form);
    }
    if (n > kCompressAbove) {
        // Deduplicate clauses, drop positions and count.
        std::vector<ParsedObject> uniq;
        for (const auto& o : p.objects) {
            bool seen = false;
            for (const auto& u : uniq) {
                if (u.shape == o.shape && u.color == o.color && u.cell == o.cell) seen = true;
            }
            if (!seen) uniq.push_back(o);
        }
        Caption out;
        for (size_t i = 0; i < uniq.size() && i < kMaxObjects; ++i) {
            if (i) out.tokens.push_back(tok::and_);
            out.tokens.push_back(tok::a);
            out.tokens.push_back(color_token(uniq[i].color));
            out.tokens.push_back(shape_token(uniq[i].shape));
        }
        return out;
    }
    return c;
}

// ---- edit instructions -------------------------------------------------------

// Instructions reference the source object by color, shape, and position, so
// they are unambiguous even when attributes repeat.
inline Caption edit_instruction(const Scene& scene, const Edit& e) {
    validate_scene(scene);
    Caption c;
    auto push_ref = [&](const SceneObject& o) {
        c.tokens.push_back(tok::the);
        c.tokens.push_back(color_token(o.color));
        c.tokens.push_back(shape_token(o.shape));
        c.tokens.push_back(tok::at);
        c.tokens.push_back(row_token(o.cell));
        c.tokens.push_back(col_token(o.cell));
    };
    switch (e.kind) {
        case EditKind::recolor:
            c.tokens.push_back(tok::recolor);
            push_ref(scene.objects.at(static_cast<size_t>(e.object)));
            c.tokens.push_back(tok::to);
            c.tokens.push_back(color_token(e.color));
            break;
        case EditKind::move:
            c.tokens.push_back(tok::move);
            push_ref(scene.objects.at(static_cast<size_t>(e.object)));
            c.tokens.push_back(tok::to);
            c.tokens.push_back(row_token(e.cell));
            c.tokens.push_back(col_token(e.cell));
            break;
        case EditKind::remove:
            c.tokens.push_back(tok::remove);
            push_ref(scene.objects.at(static_cast<size_t>(e.object)));
            break;
        case EditKind::add:
            c.tokens.push_back(tok::add);
            c.tokens.push_back(tok::a);
            c.tokens.push_back(color_token(e.added.color));
            c.tokens.push_back(shape_token(e.added.shape));
            c.tokens.push_back(tok::at);
            c.tokens.push_back(row_token(e.added.cell));
            c.tokens.push_back(col_token(e.added.cell));
            break;
    }
    return c;
}

}  // namespace obrg
