#pragma once

#include <vector>

#include "obrg/tensor.hpp"
#include "obrg/vocab.hpp"

namespace obrg {

struct VisualSpan {
    int start = 0;
    Tensor features;  // [P x D_vis], constant input
};

// Interleaved token/visual sequence. token_ids covers every position; span
// positions carry pad ids and are overwritten by projected features at embed
// time. context_len marks the loss-mask boundary for autoregressive training.
struct MultimodalSequence {
    std::vector<int> token_ids;
    std::vector<VisualSpan> visual_spans;
    int context_len = 0;

    int length() const { return static_cast<int>(token_ids.size()); }

    void validate(int vocab, int max_len) const {
        const int len = length();
        if (len == 0) fail(ErrKind::sequence, "sequence: empty");
        if (len > max_len) fail(ErrKind::sequence, "sequence: length " + std::to_string(len) + " exceeds max_len");
        if (context_len < 0 || context_len >= len) fail(ErrKind::sequence, "sequence: context_len out of range");
        for (int id : token_ids) {
            if (id < 0 || id >= vocab) fail(ErrKind::sequence, "sequence: token id out of range");
        }
        std::vector<std::pair<int, int>> spans;
        for (const auto& s : visual_spans) {
            const int p = s.features.dim(0);
            if (s.start < 0 || s.start + p > len) fail(ErrKind::sequence, "sequence: visual span overflows");
            spans.emplace_back(s.start, s.start + p);
        }
        std::sort(spans.begin(), spans.end());
        for (size_t i = 1; i < spans.size(); ++i) {
            if (spans[i].first < spans[i - 1].second) fail(ErrKind::sequence, "sequence: visual spans overlap");
        }
    }
};

// [bos, v0..v8, caption..., eos]; context covers bos + image.
inline MultimodalSequence seq_captioning(const Tensor& feats, const Caption& cap) {
    MultimodalSequence s;
    const int p = feats.dim(0);
    s.token_ids.push_back(tok::bos);
    for (int i = 0; i < p; ++i) s.token_ids.push_back(tok::pad);
    s.visual_spans.push_back({1, feats});
    for (int t : cap.tokens) s.token_ids.push_back(t);
    s.token_ids.push_back(tok::eos);
    s.context_len = 1 + p;
    return s;
}

// [bos, v0..v8, instruction..., post-caption..., eos]; context covers the
// image and the instruction, the post-edit caption is predicted.
inline MultimodalSequence seq_editing(const Tensor& feats, const Caption& instruction, const Caption& post) {
    MultimodalSequence s;
    const int p = feats.dim(0);
    s.token_ids.push_back(tok::bos);
    for (int i = 0; i < p; ++i) s.token_ids.push_back(tok::pad);
    s.visual_spans.push_back({1, feats});
    for (int t : instruction.tokens) s.token_ids.push_back(t);
    s.context_len = static_cast<int>(s.token_ids.size());
    for (int t : post.tokens) s.token_ids.push_back(t);
    s.token_ids.push_back(tok::eos);
    return s;
}

// Retrieval text: bare caption, no image markup.
inline MultimodalSequence seq_text_plain(const Caption& cap) {
    MultimodalSequence s;
    s.token_ids.push_back(tok::bos);
    for (int t : cap.tokens) s.token_ids.push_back(t);
    s.token_ids.push_back(tok::eos);
    s.context_len = 1;
    return s;
}

// Retrieval image: just the visual span between bos/eos.
inline MultimodalSequence seq_image_only(const Tensor& feats) {
    MultimodalSequence s;
    const int p = feats.dim(0);
    s.token_ids.push_back(tok::bos);
    for (int i = 0; i < p; ++i) s.token_ids.push_back(tok::pad);
    s.visual_spans.push_back({1, feats});
    s.token_ids.push_back(tok::eos);
    s.context_len = 1;
    return s;
}

// Generation conditioning: the caption wrapped in <img> markup.
inline MultimodalSequence seq_gen_condition(const Caption& cap) {
    MultimodalSequence s;
    s.token_ids.push_back(tok::bos);
    s.token_ids.push_back(tok::img_open);
    for (int t : cap.tokens) s.token_ids.push_back(t);
    s.token_ids.push_back(tok::img_close);
    s.token_ids.push_back(tok::eos);
    s.context_len = 1;
    return s;
}

}  // namespace obrg
