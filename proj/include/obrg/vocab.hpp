#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "obrg/common.hpp"
#include "obrg/scene.hpp"

namespace obrg {

// Closed vocabulary for the caption grammar and edit instructions.
namespace tok {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int img_open = 3;   // <img>
inline constexpr int img_close = 4;  // </img>
inline constexpr int a = 5;
inline constexpr int the = 6;
inline constexpr int and_ = 7;
inline constexpr int at = 8;
inline constexpr int to = 9;
inline constexpr int red = 10;
inline constexpr int green = 11;
inline constexpr int blue = 12;
inline constexpr int circle = 13;
inline constexpr int square = 14;
inline constexpr int triangle = 15;
inline constexpr int one = 16;
inline constexpr int two = 17;
inline constexpr int three = 18;
inline constexpr int top = 19;
inline constexpr int middle = 20;
inline constexpr int bottom = 21;
inline constexpr int left = 22;
inline constexpr int center = 23;
inline constexpr int right = 24;
inline constexpr int recolor = 25;
inline constexpr int move = 26;
inline constexpr int remove = 27;
inline constexpr int add = 28;
inline constexpr int count_sentinel = 29;
}  // namespace tok

inline const std::vector<std::string>& vocab_names() {
    static const std::vector<std::string> names = {
        "<pad>", "<bos>", "<eos>", "<img>", "</img>", "a", "the", "and", "at", "to",
        "red", "green", "blue", "circle", "square", "triangle", "one", "two", "three",
        "top", "middle", "bottom", "left", "center", "right", "recolor", "move", "remove", "add",
    };
    return names;
}

inline int vocab_size() { return tok::count_sentinel; }

inline const std::string& token_name(int id) {
    if (id < 0 || id >= vocab_size()) fail(ErrKind::parse, "vocab: token id out of range");
    return vocab_names()[static_cast<size_t>(id)];
}

inline int token_id(const std::string& name) {
    static const auto index = [] {
        std::unordered_map<std::string, int> m;
        for (size_t i = 0; i < vocab_names().size(); ++i) m[vocab_names()[i]] = static_cast<int>(i);
        return m;
    }();
    auto it = index.find(name);
    if (it == index.end()) fail(ErrKind::parse, "vocab: unknown token '" + name + "'");
    return it->second;
}

inline int color_token(ObjColor c) { return tok::red + static_cast<int>(c); }
inline int shape_token(ObjShape s) { return tok::circle + static_cast<int>(s); }
inline int count_token(int n) {
    if (n < 1 || n > 3) fail(ErrKind::parse, "vocab: no count word for " + std::to_string(n));
    return tok::one + n - 1;
}
inline int row_token(int cell) { return tok::top + cell / 3; }
inline int col_token(int cell) { return tok::left + cell % 3; }

struct Caption {
    std::vector<int> tokens;  // content tokens only; specials added by sequence builders

    bool operator==(const Caption&) const = default;
};

inline std::string caption_text(const Caption& c) {
    std::string s;
    for (size_t i = 0; i < c.tokens.size(); ++i) {
        if (i) s += ' ';
        s += token_name(c.tokens[i]);
    }
    return s;
}

inline Caption caption_from_text(const std::string& text) {
    Caption c;
    std::string word;
    for (size_t i = 0; i <= text.size(); ++i) {
        if (i == text.size() || text[i] == ' ') {
            if (!word.empty()) c.tokens.push_back(token_id(word));
            word.clear();
        } else {
            word += text[i];
        }
    }
    return c;
}

}  // namespace obrg
