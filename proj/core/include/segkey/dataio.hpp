#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "segkey/labels.hpp"
#include "segkey/tensor.hpp"

namespace segkey {

// An image (3 x S x S, values in [0,1]) and its per-pixel class map.
struct SegSample {
  Tensor image;
  LabelMap label;
};

struct DatasetSplit {
  std::vector<SegSample> train;
  std::vector<SegSample> val;
  std::vector<SegSample> dev;
};

struct ToyDatasetParams {
  std::size_t train = 256;
  std::size_t val = 32;
  std::size_t dev = 64;
  std::size_t size = 64;
  std::size_t num_classes = 4;
  std::uint64_t seed = 0;
};

// Noisy background with 1-3 coloured shapes (disk, rectangle, triangle).
// Class k >= 1 owns one shape kind and one hue. Pure function of the
// arguments.
std::vector<SegSample> gen_toy_dataset(std::size_t n, std::size_t size,
                                       std::size_t num_classes,
                                       std::uint64_t seed);

// Train/val/dev drawn from disjoint seed streams derived from params.seed.
DatasetSplit make_toy_split(const ToyDatasetParams& params);

// --- augmentation -------------------------------------------------------

using Rng = std::mt19937_64;

// Crops a random region covering an area fraction in [scale_lo, scale_hi]
// (aspect ratio in [3/4, 4/3]) and resizes it to out_size x out_size:
// bilinear for the image, nearest for the label.
SegSample random_resized_crop(const SegSample& sample, double scale_lo,
                              double scale_hi, std::size_t out_size, Rng& rng);

// Crop-and-resize with an explicit window; used by random_resized_crop.
SegSample crop_resize(const SegSample& sample, std::size_t top,
                      std::size_t left, std::size_t crop_h, std::size_t crop_w,
                      std::size_t out_size);

SegSample hflip(const SegSample& sample, double p, Rng& rng);
SegSample hflip(const SegSample& sample);

// --- files ----------------------------------------------------------------

// Binary PPM (P6, maxval 255); values scaled to [0,1] on read.
Tensor read_image(const std::string& path);
void write_image(const std::string& path, const Tensor& image);
Tensor decode_ppm(const std::string& bytes);
std::string encode_ppm(const Tensor& image);

// Binary PGM (P5, maxval 255); one class id per pixel.
LabelMap read_label(const std::string& path);
void write_label(const std::string& path, const LabelMap& label);
LabelMap decode_pgm(const std::string& bytes);
std::string encode_pgm(const LabelMap& label);

// Writes <dir>/{train,val,dev}/NNNNNN.{ppm,pgm} plus <dir>/manifest.json.
void write_dataset(const std::string& dir, const DatasetSplit& split,
                   const ToyDatasetParams& params);

struct LoadedDataset {
  DatasetSplit split;
  ToyDatasetParams params;
};

// Reads a dataset directory; rejects label values >= num_classes.
LoadedDataset load_dataset(const std::string& dir);

}  // namespace segkey
