#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "srlvae/tensor.hpp"

namespace srlvae {

// A batch of images in [0, 1] with stable sample identifiers.
struct ImageBatch {
  Tensor pixels;  // (N, C, H, W)
  std::vector<std::string> ids;

  int size() const { return pixels.shape().n; }
  // Checks the batch invariants; H and W must also be multiples of
  // downsampling_factor.
  void validate(int downsampling_factor = 1) const;
  ImageBatch slice(int first, int count) const;
};

struct DatasetSpec {
  std::filesystem::path root;
  int height = 32;
  int width = 32;
  double train_fraction = 0.9;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 0;
  int channels = 3;

  void validate() const;
};

struct Split {
  std::string name;
  Tensor pixels;
  std::vector<std::string> ids;

  int size() const { return static_cast<int>(ids.size()); }
  ImageBatch as_batch() const { return {pixels, ids}; }
  ImageBatch head(int count) const;
};

struct Dataset {
  Split train;
  Split val;
};

// Lists decodable image candidates (png/jpg/jpeg) under root as sorted
// root-relative paths.
std::vector<std::string> list_images(const std::filesystem::path& root);

// Deterministic split: ids are ranked by a seeded hash and the first
// round(train_fraction * N) go to train. Returns true for train members.
std::vector<bool> assign_split(const std::vector<std::string>& ids, double train_fraction, std::uint64_t seed);

// Loads, center-crops, resizes and splits the corpus. Undecodable files are
// reported on `warnings` and skipped.
Dataset load_dataset(const DatasetSpec& spec, std::ostream& warnings);

// Shuffled epoch of batches; the last batch may be smaller.
std::vector<ImageBatch> make_batches(const Split& split, int batch_size, std::uint64_t shuffle_seed);

// Image helpers operating on a single (1, C, H, W) item.
Tensor center_crop_square(const Tensor& image);
Tensor resize_bilinear_antialias(const Tensor& image, int height, int width);
Tensor decode_image_file(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const Tensor& batch, int index);

// Writes a procedural corpus of `count` PNG images (colored shapes over
// gradients) under root, grouped into subdirectories.
void generate_toy_corpus(const std::filesystem::path& root, int count, int size, std::uint64_t seed);

}  // namespace srlvae
