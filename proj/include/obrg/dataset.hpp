#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "obrg/caption.hpp"
#include "obrg/common.hpp"
#include "obrg/features.hpp"
#include "obrg/rng.hpp"
#include "obrg/scene.hpp"

namespace obrg {

inline constexpr int kCorpusFormatVersion = 1;

struct EditSample {
    EditKind kind = EditKind::recolor;
    Caption instruction;
    Caption post_caption_long;
};

struct CorpusRecord {
    uint64_t id = 0;
    Scene scene;
    Caption caption_short;
    Caption caption_long;
    std::optional<EditSample> edit;
    SceneLatent latent;
};

struct Corpus {
    int format_version = kCorpusFormatVersion;
    uint64_t featurizer_seed = 0;
    std::vector<std::string> vocab = vocab_names();
    std::vector<CorpusRecord> records;
};

// ---- json encoding -----------------------------------------------------------

namespace detail {

inline std::string latent_hex(const SceneLatent& z) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(z.size() * 8);
    for (float f : z) {
        uint32_t bits;
        static_assert(sizeof(bits) == sizeof(f));
        std::memcpy(&bits, &f, 4);
        for (int b = 0; b < 4; ++b) {  // little-endian byte order
            const uint32_t byte = (bits >> (8 * b)) & 0xFFu;
            s += digits[byte >> 4];
            s += digits[byte & 0xFu];
        }
    }
    return s;
}

inline SceneLatent latent_from_hex(const std::string& s) {
    if (s.size() % 8 != 0) fail(ErrKind::parse, "corpus: latent hex length not a multiple of 8");
    auto nibble = [](char c) -> uint32_t {
        if (c >= '0' && c <= '9') return static_cast<uint32_t>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<uint32_t>(c - 'a' + 10);
        fail(ErrKind::parse, "corpus: bad hex digit in latent");
    };
    SceneLatent z(s.size() / 8);
    for (size_t i = 0; i < z.size(); ++i) {
        uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            const uint32_t hi = nibble(s[i * 8 + static_cast<size_t>(b) * 2]);
            const uint32_t lo = nibble(s[i * 8 + static_cast<size_t>(b) * 2 + 1]);
            bits |= ((hi << 4) | lo) << (8 * b);
        }
        float f;
        std::memcpy(&f, &bits, 4);
        z[i] = f;
    }
    return z;
}

inline nlohmann::json scene_json(const Scene& s) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& o : s.objects) {
        arr.push_back({{"cell", o.cell}, {"color", color_name(o.color)}, {"shape", shape_name(o.shape)}});
    }
    return {{"objects", arr}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    for (const auto& o : j.at("objects")) {
        SceneObject so;
        so.cell = o.at("cell").get<int>();
        const std::string color = o.at("color").get<std::string>();
        const std::string shape = o.at("shape").get<std::string>();
        so.color = static_cast<ObjColor>(token_id(color) - tok::red);
        so.shape = static_cast<ObjShape>(token_id(shape) - tok::circle);
        s.objects.push_back(so);
    }
    canonicalize(s);
    validate_scene(s);
    return s;
}

inline const char* edit_kind_name(EditKind k) {
    switch (k) {
        case EditKind::recolor: return "recolor";
        case EditKind::move: return "move";
        case EditKind::remove: return "remove";
        case EditKind::add: return "add";
    }
    return "?";
}

inline EditKind edit_kind_from_name(const std::string& s) {
    if (s == "recolor") return EditKind::recolor;
    if (s == "move") return EditKind::move;
    if (s == "remove") return EditKind::remove;
    if (s == "add") return EditKind::add;
    fail(ErrKind::parse, "corpus: unknown edit kind '" + s + "'");
}

}  // namespace detail

inline std::string corpus_header_line(const Corpus& c) {
    nlohmann::json j = {
        {"featurizer_seed", c.featurizer_seed},
        {"format_version", c.format_version},
        {"vocab", c.vocab},
    };
    return j.dump();
}

inline std::string corpus_record_line(const CorpusRecord& r) {
    nlohmann::json j = {
        {"caption_long", caption_text(r.caption_long)},
        {"caption_short", caption_text(r.caption_short)},
        {"id", r.id},
        {"latent", detail::latent_hex(r.latent)},
        {"scene", detail::scene_json(r.scene)},
    };
    if (r.edit) {
        j["edit"] = {
            {"instruction", caption_text(r.edit->instruction)},
            {"kind", detail::edit_kind_name(r.edit->kind)},
            {"post_caption_long", caption_text(r.edit->post_caption_long)},
        };
    }
    return j.dump();
}

inline void write_corpus(const std::string& path, const Corpus& c) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrKind::io, "corpus: cannot open '" + path + "' for writing");
    out << corpus_header_line(c) << '\n';
    for (const auto& r : c.records) out << corpus_record_line(r) << '\n';
    if (!out) fail(ErrKind::io, "corpus: write failed for '" + path + "'");
}

inline Corpus read_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrKind::io, "corpus: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) fail(ErrKind::corruption, "corpus: missing header line in '" + path + "'");
    Corpus c;
    try {
        const nlohmann::json h = nlohmann::json::parse(line);
        c.format_version = h.at("format_version").get<int>();
        c.featurizer_seed = h.at("featurizer_seed").get<uint64_t>();
        c.vocab = h.at("vocab").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrKind::corruption, "corpus: bad header: " + std::string(e.what()));
    }
    if (c.format_version != kCorpusFormatVersion) {
        fail(ErrKind::compat, "corpus: format version " + std::to_string(c.format_version) + " unsupported");
    }
    if (c.vocab != vocab_names()) fail(ErrKind::compat, "corpus: vocabulary does not match this build");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            CorpusRecord r;
            r.id = j.at("id").get<uint64_t>();
            r.scene = detail::scene_from_json(j.at("scene"));
            r.caption_short = caption_from_text(j.at("caption_short").get<std::string>());
            r.caption_long = caption_from_text(j.at("caption_long").get<std::string>());
            r.latent = detail::latent_from_hex(j.at("latent").get<std::string>());
            if (j.contains("edit")) {
                EditSample e;
                e.kind = detail::edit_kind_from_name(j["edit"].at("kind").get<std::string>());
                e.instruction = caption_from_text(j["edit"].at("instruction").get<std::string>());
                e.post_caption_long = caption_from_text(j["edit"].at("post_caption_long").get<std::string>());
                r.edit = std::move(e);
            }
            c.records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrKind::corruption, "corpus: bad record: " + std::string(e.what()));
        }
    }
    return c;
}

// ---- generation ---------------------------------------------------------------

// Draws a valid edit for the scene: kind chosen uniformly among applicable
// kinds, then parameters uniformly among legal values.
inline Edit random_edit(const Scene& scene, Rng& rng) {
    std::vector<EditKind> kinds = {EditKind::recolor, EditKind::move};
    if (scene.objects.size() >= 2) kinds.push_back(EditKind::remove);
    if (scene.objects.size() < kMaxObjects) kinds.push_back(EditKind::add);
    Edit e;
    e.kind = kinds[rng.next_below(kinds.size())];
    auto free_cells = [&] {
        std::vector<int> free;
        for (int c = 0; c < kGridCells; ++c) {
            bool used = false;
            for (const auto& o : scene.objects) used = used || o.cell == c;
            if (!used) free.push_back(c);
        }
        return free;
    };
    switch (e.kind) {
        case EditKind::recolor: {
            e.object = static_cast<int>(rng.next_below(scene.objects.size()));
            const int cur = static_cast<int>(scene.objects[static_cast<size_t>(e.object)].color);
            e.color = static_cast<ObjColor>((cur + 1 + static_cast<int>(rng.next_below(2))) % 3);
            break;
        }
        case EditKind::move: {
            e.object = static_cast<int>(rng.next_below(scene.objects.size()));
            const auto free = free_cells();
            e.cell = free[rng.next_below(free.size())];
            break;
        }
        case EditKind::remove:
            e.object = static_cast<int>(rng.next_below(scene.objects.size()));
            break;
        case EditKind::add: {
            const auto free = free_cells();
            e.added.shape = static_cast<ObjShape>(rng.next_below(kNumShapes));
            e.added.color = static_cast<ObjColor>(rng.next_below(kNumColors));
            e.added.cell = free[rng.next_below(free.size())];
            break;
        }
    }
    return e;
}

inline CorpusRecord make_record(const Scene& scene, Rng& rng) {
    CorpusRecord r;
    r.scene = scene;
    r.id = scene.id;
    r.caption_short = caption_of(scene, CaptionStyle::short_form);
    r.caption_long = caption_of(scene, CaptionStyle::long_form);
    r.latent = render_latent(scene);
    EditSample e;
    const Edit edit = random_edit(scene, rng);
    e.kind = edit.kind;
    e.instruction = edit_instruction(scene, edit);
    e.post_caption_long = caption_of(apply_edit(scene, edit), CaptionStyle::long_form);
    r.edit = std::move(e);
    return r;
}

// Scenes are distinct across train and test so retrieval ground truth is
// one-to-one and the held-out set is genuinely unseen.
inline std::pair<Corpus, Corpus> make_corpora(uint64_t seed, int n_train, int n_test,
                                              uint64_t featurizer_seed = 0) {
    if (n_train < 0 || n_test < 0) fail(ErrKind::config, "corpus: negative sizes");
    Rng rng = Rng(seed).split("corpus");
    std::set<uint64_t> seen;
    Corpus train, test;
    train.featurizer_seed = featurizer_seed;
    test.featurizer_seed = featurizer_seed;
    const int total = n_train + n_test;
    int guard = 0;
    while (static_cast<int>(train.records.size() + test.records.size()) < total) {
        if (++guard > total * 1000 + 100000) fail(ErrKind::config, "corpus: scene space exhausted at requested size");
        const Scene s = make_scene(rng);
        if (!seen.insert(s.id).second) continue;
        CorpusRecord r = make_record(s, rng);
        if (static_cast<int>(train.records.size()) < n_train) {
            train.records.push_back(std::move(r));
        } else {
            test.records.push_back(std::move(r));
        }
    }
    return {std::move(train), std::move(test)};
}

inline uint32_t file_crc32(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrKind::io, "crc32: cannot open '" + path + "'");
    uint32_t crc = 0;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        crc = crc32(buf, static_cast<size_t>(in.gcount()), crc);
        if (in.eof()) break;
    }
    return crc;
}

}  // namespace obrg
