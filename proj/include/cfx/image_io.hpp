#pragma once

#include <filesystem>
#include <vector>

#include "cfx/tensor.hpp"

namespace cfx {

// 8-bit PNG export for inspection. Accepts a (C, H, W) image or a batch of
// one; C must be 1 (grayscale) or 3 (RGB). Values are clipped to [0, 1].
void write_png(const std::filesystem::path& path, const Tensor& image);

// Row-major boolean grid as a black/white PNG (true = white).
void write_mask_png(const std::filesystem::path& path, const std::vector<bool>& mask, std::size_t height,
                    std::size_t width);

// Per-pixel channel-mean |a - b| rendered as a red heatmap, normalized by its max.
Tensor difference_heatmap(const Tensor& a, const Tensor& b);

// Side-by-side RGB strip of (C, H, W) panels separated by a white gutter.
Tensor tile_horizontal(const std::vector<Tensor>& panels, std::size_t gutter = 1);

}  // namespace cfx
