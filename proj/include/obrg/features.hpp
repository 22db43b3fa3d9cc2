#pragma once

#include <vector>

#include "obrg/rng.hpp"
#include "obrg/scene.hpp"
#include "obrg/tensor.hpp"

namespace obrg {

inline constexpr int kVisPatches = kGridCells;  // one feature row per cell
inline constexpr int kVisDim = 16;

// Frozen stand-in for a visual encoder: a seeded affine embedding of each
// cell's 7-channel code. Empty cells map to the bias row.
class Featurizer {
public:
    explicit Featurizer(uint64_t seed) : seed_(seed) {
        Rng rng = Rng(seed).split("featurizer");
        w_.resize(kCellChannels * kVisDim);
        b_.resize(kVisDim);
        for (auto& v : w_) v = static_cast<float>(rng.normal()) * 0.5f;
        for (auto& v : b_) v = static_cast<float>(rng.normal()) * 0.5f;
    }

    uint64_t seed() const { return seed_; }

    Tensor scene_features(const Scene& scene) const {
        validate_scene(scene);
        const SceneLatent z = render_latent(scene);
        Tensor out({kVisPatches, kVisDim});
        for (int c = 0; c < kVisPatches; ++c) {
            float* row = out.data() + static_cast<size_t>(c) * kVisDim;
            for (int j = 0; j < kVisDim; ++j) {
                double acc = b_[static_cast<size_t>(j)];
                for (int ch = 0; ch < kCellChannels; ++ch) {
                    acc += static_cast<double>(z[static_cast<size_t>(c) * kCellChannels + ch]) *
                           w_[static_cast<size_t>(ch) * kVisDim + j];
                }
                row[j] = static_cast<float>(acc);
            }
        }
        return out;
    }

private:
    uint64_t seed_;
    std::vector<float> w_;  // [7 x 16]
    std::vector<float> b_;  // [16]
};

}  // namespace obrg
