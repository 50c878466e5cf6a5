#include "srlvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include <fmt/format.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "srlvae/error.hpp"
#include "srlvae/hash.hpp"

namespace srlvae {
namespace fs = std::filesystem;

void ImageBatch::validate(int downsampling_factor) const {
  const Shape& s = pixels.shape();
  if (s.n < 1) throw ShapeError("image batch is empty");
  if (s.c != 1 && s.c != 3) throw ShapeError(fmt::format("image batch has {} channels; expected 1 or 3", s.c));
  if (s.h < 8 || s.w < 8) throw ShapeError(fmt::format("image size {}x{} is below the 8x8 minimum", s.h, s.w));
  if (s.h % downsampling_factor != 0) {
    throw ShapeError(fmt::format("height {} is not divisible by downsampling factor {}", s.h, downsampling_factor));
  }
  if (s.w % downsampling_factor != 0) {
    throw ShapeError(fmt::format("width {} is not divisible by downsampling factor {}", s.w, downsampling_factor));
  }
  if (static_cast<int>(ids.size()) != s.n) throw ShapeError("image batch ids do not match batch size");
  if (pixels.min() < 0.0 || pixels.max() > 1.0) throw ShapeError("image batch has pixels outside [0, 1]");
}

ImageBatch ImageBatch::slice(int first, int count) const {
  return {pixels.slice(first, count),
          std::vector<std::string>(ids.begin() + first, ids.begin() + first + count)};
}

void DatasetSpec::validate() const {
  if (root.empty()) throw ConfigError("dataset root is not set");
  if (height < 8 || width < 8) throw ConfigError("target resolution must be at least 8x8");
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (train_fraction < 0.0 || val_fraction < 0.0) throw ConfigError("split fractions must be non-negative");
  if (std::abs(train_fraction + val_fraction - 1.0) > 1e-9) {
    throw ConfigError(fmt::format("split fractions must sum to 1 (got {} + {})", train_fraction, val_fraction));
  }
}

ImageBatch Split::head(int count) const {
  count = std::min(count, size());
  return as_batch().slice(0, count);
}

std::vector<std::string> list_images(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") {
      out.push_back(fs::relative(entry.path(), root).generic_string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<bool> assign_split(const std::vector<std::string>& ids, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> keys(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) keys[i] = mix_seed(seed, fnv1a(ids[i]));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : ids[a] < ids[b];
  });
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ids.size())));
  std::vector<bool> is_train(ids.size(), false);
  for (std::size_t r = 0; r < n_train && r < order.size(); ++r) is_train[order[r]] = true;
  return is_train;
}

Tensor center_crop_square(const Tensor& image) {
  const Shape& s = image.shape();
  const int side = std::min(s.h, s.w);
  if (side == s.h && side == s.w) return image;
  const int y0 = (s.h - side) / 2;
  const int x0 = (s.w - side) / 2;
  Tensor out(Shape{1, s.c, side, side});
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) out.at(0, c, y, x) = image.at(0, c, y + y0, x + x0);
    }
  }
  return out;
}

namespace {

// Triangle-filter taps for one output axis; the filter widens with the
// downscale factor so minification is antialiased.
struct Taps {
  std::vector<int> start;
  std::vector<std::vector<double>> weights;
};

Taps triangle_taps(int in, int out) {
  Taps taps;
  const double scale = static_cast<double>(in) / out;
  const double filter_scale = std::max(scale, 1.0);
  const double support = filter_scale;
  for (int i = 0; i < out; ++i) {
    const double center = (i + 0.5) * scale;
    const int lo = std::max(static_cast<int>(center - support + 0.5), 0);
    const int hi = std::min(static_cast<int>(center + support + 0.5), in);
    std::vector<double> w;
    double total = 0.0;
    for (int x = lo; x < hi; ++x) {
      const double t = (x - center + 0.5) / filter_scale;
      const double v = std::max(0.0, 1.0 - std::abs(t));
      w.push_back(v);
      total += v;
    }
    if (total > 0) {
      for (auto& v : w) v /= total;
    }
    taps.start.push_back(lo);
    taps.weights.push_back(std::move(w));
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear_antialias(const Tensor& image, int height, int width) {
  const Shape& s = image.shape();
  if (s.h == height && s.w == width) return image;
  const Taps ty = triangle_taps(s.h, height);
  const Taps tx = triangle_taps(s.w, width);
  Tensor horiz(Shape{1, s.c, s.h, width});
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < width; ++x) {
        double v = 0.0;
        const auto& w = tx.weights[static_cast<std::size_t>(x)];
        for (std::size_t k = 0; k < w.size(); ++k) v += w[k] * image.at(0, c, y, tx.start[static_cast<std::size_t>(x)] + static_cast<int>(k));
        horiz.at(0, c, y, x) = v;
      }
    }
  }
  Tensor out(Shape{1, s.c, height, width});
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < height; ++y) {
      const auto& w = ty.weights[static_cast<std::size_t>(y)];
      for (int x = 0; x < width; ++x) {
        double v = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) v += w[k] * horiz.at(0, c, ty.start[static_cast<std::size_t>(y)] + static_cast<int>(k), x);
        out.at(0, c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

Tensor decode_image_file(const fs::path& path, int channels) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw Error(fmt::format("cannot decode image {}", path.string()));
  double scale = 1.0 / 255.0;
  if (raw.depth() == CV_16U) scale = 1.0 / 65535.0;
  else if (raw.depth() != CV_8U) throw Error(fmt::format("unsupported pixel depth in {}", path.string()));
  const int src_channels = raw.channels();
  if (src_channels != 1 && src_channels != 3 && src_channels != 4) {
    throw Error(fmt::format("unsupported channel count {} in {}", src_channels, path.string()));
  }
  Tensor out(Shape{1, channels, raw.rows, raw.cols});
  auto px = [&](int y, int x, int ch) {
    return raw.depth() == CV_16U ? raw.ptr<std::uint16_t>(y)[x * src_channels + ch] * scale
                                 : raw.ptr<std::uint8_t>(y)[x * src_channels + ch] * scale;
  };
  for (int y = 0; y < raw.rows; ++y) {
    for (int x = 0; x < raw.cols; ++x) {
      if (src_channels == 1) {
        for (int c = 0; c < channels; ++c) out.at(0, c, y, x) = px(y, x, 0);
      } else {
        // OpenCV stores BGR(A).
        const double r = px(y, x, 2), g = px(y, x, 1), b = px(y, x, 0);
        if (channels == 3) {
          out.at(0, 0, y, x) = r;
          out.at(0, 1, y, x) = g;
          out.at(0, 2, y, x) = b;
        } else {
          out.at(0, 0, y, x) = 0.299 * r + 0.587 * g + 0.114 * b;
        }
      }
    }
  }
  return out;
}

void write_png(const fs::path& path, const Tensor& batch, int index) {
  const Shape& s = batch.shape();
  cv::Mat img(s.h, s.w, s.c == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < s.h; ++y) {
    auto* row = img.ptr<std::uint8_t>(y);
    for (int x = 0; x < s.w; ++x) {
      for (int c = 0; c < s.c; ++c) {
        const double v = std::clamp(batch.at(index, c, y, x), 0.0, 1.0);
        const int dst = s.c == 3 ? 2 - c : 0;
        row[x * s.c + dst] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw Error(fmt::format("cannot write {}", path.string()));
}

Dataset load_dataset(const DatasetSpec& spec, std::ostream& warnings) {
  spec.validate();
  if (!fs::is_directory(spec.root)) throw ConfigError(fmt::format("dataset root {} does not exist", spec.root.string()));
  std::vector<std::string> ids;
  std::vector<Tensor> images;
  for (const auto& id : list_images(spec.root)) {
    try {
      Tensor img = decode_image_file(spec.root / id, spec.channels);
      img = resize_bilinear_antialias(center_crop_square(img), spec.height, spec.width);
      images.push_back(std::move(img));
      ids.push_back(id);
    } catch (const Error& e) {
      warnings << "warning: skipping " << id << ": " << e.what() << '\n';
    }
  }
  if (ids.size() < 2) {
    throw ConfigError(fmt::format("dataset root {} has fewer than 2 decodable images", spec.root.string()));
  }
  const auto is_train = assign_split(ids, spec.train_fraction, spec.split_seed);
  Dataset ds;
  ds.train.name = "train";
  ds.val.name = "val";
  std::vector<Tensor> train_px, val_px;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (is_train[i]) {
      ds.train.ids.push_back(ids[i]);
      train_px.push_back(std::move(images[i]));
    } else {
      ds.val.ids.push_back(ids[i]);
      val_px.push_back(std::move(images[i]));
    }
  }
  if (train_px.empty()) throw ConfigError("train split is empty");
  if (val_px.empty()) throw ConfigError("val split is empty");
  ds.train.pixels = concat_batch(train_px);
  ds.val.pixels = concat_batch(val_px);
  return ds;
}

std::vector<ImageBatch> make_batches(const Split& split, int batch_size, std::uint64_t shuffle_seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<int> order(static_cast<std::size_t>(split.size()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<ImageBatch> batches;
  for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min(order.size() - first, static_cast<std::size_t>(batch_size));
    std::span<const int> idx(order.data() + first, count);
    ImageBatch b;
    b.pixels = split.pixels.gather(idx);
    for (int i : idx) b.ids.push_back(split.ids[static_cast<std::size_t>(i)]);
    batches.push_back(std::move(b));
  }
  return batches;
}

void generate_toy_corpus(const fs::path& root, int count, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr int kSuper = 4;
  for (int idx = 0; idx < count; ++idx) {
    Tensor img(Shape{1, 3, size, size});
    double c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
      c0[c] = u(rng);
      c1[c] = u(rng);
    }
    const double angle = u(rng) * 2.0 * M_PI;
    const double gx = std::cos(angle), gy = std::sin(angle);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double t = std::clamp(0.5 + ((x + 0.5) / size - 0.5) * gx + ((y + 0.5) / size - 0.5) * gy, 0.0, 1.0);
        for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = (1 - t) * c0[c] + t * c1[c];
      }
    }
    const int shapes = 1 + static_cast<int>(u(rng) * 3.0);
    for (int s = 0; s < shapes; ++s) {
      const int kind = static_cast<int>(u(rng) * 3.0);
      double col[3];
      for (double& v : col) v = u(rng);
      const double cx = 0.15 + 0.7 * u(rng), cy = 0.15 + 0.7 * u(rng);
      const double r = 0.1 + 0.25 * u(rng);
      const double hw = 0.08 + 0.25 * u(rng), hh = 0.08 + 0.25 * u(rng);
      const double freq = 3.0 + 6.0 * u(rng);
      auto inside = [&](double px, double py) {
        switch (kind) {
          case 0: return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
          case 1: return std::abs(px - cx) <= hw && std::abs(py - cy) <= hh;
          default: return std::abs(px - cx) <= hw && std::abs(py - cy) <= hh && std::sin(freq * 2 * M_PI * px) > 0;
        }
      };
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          int hits = 0;
          for (int sy = 0; sy < kSuper; ++sy) {
            for (int sx = 0; sx < kSuper; ++sx) {
              hits += inside((x + (sx + 0.5) / kSuper) / size, (y + (sy + 0.5) / kSuper) / size) ? 1 : 0;
            }
          }
          const double a = static_cast<double>(hits) / (kSuper * kSuper);
          for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = (1 - a) * img.at(0, c, y, x) + a * col[c];
        }
      }
    }
    write_png(root / fmt::format("shard_{:02d}", idx / 500) / fmt::format("img_{:05d}.png", idx), img, 0);
  }
}

}  // namespace srlvae
