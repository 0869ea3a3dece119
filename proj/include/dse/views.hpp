#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace dse {

/// Source region of an attention view, in pixels of the original image.
struct CropBox {
    int64_t top = 0;
    int64_t left = 0;
    int64_t height = 0;
    int64_t width = 0;

    bool contains(const CropBox& inner) const {
        return inner.top >= top && inner.left >= left && inner.top + inner.height <= top + height &&
               inner.left + inner.width <= left + width;
    }
    bool operator==(const CropBox&) const = default;
};

/// An image batch with its two attention views, all (n, 3, R, R).
struct TripleScaleViews {
    torch::Tensor orig;
    torch::Tensor at1;
    torch::Tensor at2;

    std::vector<CropBox> at1_boxes;  // centre mode only
    std::vector<CropBox> at2_boxes;
    std::vector<int64_t> classes;    // Grad-CAM class per sample
    bool fallback = false;           // Grad-CAM box fell back to the full frame
    std::vector<std::string> warnings;
};

}  // namespace dse
