#pragma once

#include <filesystem>
#include <string>

#include "angio/tensor.hpp"

namespace angio {

using nn::Tensor;

// Lossless frame storage as binary PNM. Grayscale frames are {H,W} tensors in
// [0,1], color images {3,H,W}. 16-bit is the default on-disk depth; masks go
// out as 1-bit PBM.
namespace pnm {

void write_gray(const std::filesystem::path& file, const Tensor& img, int bit_depth = 16);
void write_color(const std::filesystem::path& file, const Tensor& img, int bit_depth = 16);
void write_bitmap(const std::filesystem::path& file, const Tensor& mask);

Tensor read_gray(const std::filesystem::path& file);
Tensor read_color(const std::filesystem::path& file);
Tensor read_bitmap(const std::filesystem::path& file);

// Reads any PNM into {H,W} or {3,H,W} depending on the file.
Tensor read_auto(const std::filesystem::path& file);

}  // namespace pnm

// Bilinear resize for {H,W} or {C,H,W} tensors.
Tensor resize_bilinear(const Tensor& img, int out_h, int out_w);

}  // namespace angio
