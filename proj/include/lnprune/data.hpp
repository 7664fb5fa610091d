#pragma once

#include <string>
#include <vector>

#include "lnprune/tensor.hpp"

namespace lnprune {

// Labeled image set. Images are float32 in [0,1], shape [N,C,H,W]. Immutable
// by convention once built, so concurrent readers are safe.
struct Dataset {
    Tensor images;
    std::vector<i64> labels;
    i64 class_count = 0;
    std::string split;  // "train", "val" or "test"

    i64 size() const { return images.rank() == 4 ? images.dim(0) : 0; }
    void validate() const;  // throws DataError on any broken invariant
};

// Synthetic classification task: one fixed oriented-frequency pattern per
// class plus per-sample Gaussian pixel noise.
struct SynthSpec {
    i64 class_count = 4;
    i64 size = 16;  // square images, size >= 8
    i64 train_per_class = 64;
    i64 val_per_class = 16;
    i64 test_per_class = 16;
    double sigma = 0.05;  // noise stddev
    u64 seed = 0;
};

struct SynthSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

// Noiseless class template, shape [1, size, size], values within [0.15, 0.85].
Tensor synth_template(i64 cls, i64 size);

// Deterministic per seed. The three splits draw noise from distinct sub-seeds,
// so no sample repeats across splits (for sigma > 0).
SynthSplits synth_generate(const SynthSpec& spec);

// Big-endian IDX files: magic 0x00000803 for images ([N,H,W] unsigned bytes),
// 0x00000801 for labels. Pixels are scaled by 1/255 on load; export quantizes
// with round(v * 255). Single-channel only.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split = "train");
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Seeded uniform sample without replacement; the order is seed-determined,
// so count == size gives a permutation of the whole set.
Dataset sample_subset(const Dataset& ds, i64 count, u64 seed);

// Training augmentation: per-sample random crop to crop x crop plus, when
// `mirror` is set, a 50% horizontal flip. Deterministic given the seed.
Tensor augment(const Tensor& batch, i64 crop, bool mirror, u64 seed);

// Evaluation path: deterministic center crop, never mirrored.
Tensor center_crop(const Tensor& batch, i64 crop);

// Flips every sample left-right. Involution: applying it twice is identity.
Tensor mirror_horizontal(const Tensor& batch);

}  // namespace lnprune
