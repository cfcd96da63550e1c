#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "stylemorph/core/rng.hpp"
#include "stylemorph/core/tensor.hpp"

namespace stylemorph {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Folder-per-domain dataset. Domain labels follow the sorted order of the
// subfolder names; the test split is the tail of each domain's sorted file
// list, so identical folders always produce identical indices.
struct DomainDataset {
  std::string root;
  std::vector<std::string> domains;
  std::vector<std::vector<std::string>> train_index;  // absolute paths, per domain
  std::vector<std::vector<std::string>> test_index;

  int num_domains() const { return static_cast<int>(domains.size()); }

  int64_t train_total() const {
    int64_t n = 0;
    for (const auto& d : train_index) n += static_cast<int64_t>(d.size());
    return n;
  }

  int domain_index(const std::string& name) const {
    for (size_t i = 0; i < domains.size(); ++i)
      if (domains[i] == name) return static_cast<int>(i);
    return -1;
  }
};

// Images in [-1, 1], NCHW, with one domain label per batch element.
struct ImageBatch {
  Tensor pixels;            // [n, 3, S, S]
  std::vector<int> labels;  // each in [0, K)
};

// Two reference batches sharing target labels position by position.
struct ReferenceBatch {
  ImageBatch first;
  ImageBatch second;
};

namespace imgio {

inline uint8_t denormalize_value(double v) {
  v = std::min(1.0, std::max(-1.0, v));
  double scaled = std::floor(v * 127.5 + 127.5 + 0.5);  // round half up
  return static_cast<uint8_t>(std::min(255.0, std::max(0.0, scaled)));
}

// BGR byte image -> [-1, 1] RGB tensor of shape [3, H, W].
inline Tensor mat8_to_tensor(const cv::Mat& bgr) {
  if (bgr.empty() || bgr.type() != CV_8UC3)
    throw DataError("mat8_to_tensor: expected a non-empty 8-bit BGR image");
  const int h = bgr.rows, w = bgr.cols;
  Tensor t = Tensor::zeros({3, h, w});
  double* p = t.ptr();
  for (int i = 0; i < h; ++i) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(i);
    for (int j = 0; j < w; ++j) {
      for (int c = 0; c < 3; ++c) {
        double v = row[j][2 - c] / 127.5 - 1.0;  // BGR -> RGB
        p[(static_cast<size_t>(c) * h + i) * w + j] = v;
      }
    }
  }
  return t;
}

// [-1, 1] RGB tensor [3, H, W] -> 8-bit BGR image ready for PNG encoding.
inline cv::Mat tensor_to_mat8(const Tensor& img) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw DataError("tensor_to_mat8: expected [3, H, W], got " + img.shape_str());
  const int h = img.dim(1), w = img.dim(2);
  cv::Mat out(h, w, CV_8UC3);
  const double* p = img.ptr();
  for (int i = 0; i < h; ++i) {
    cv::Vec3b* row = out.ptr<cv::Vec3b>(i);
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        row[j][2 - c] = denormalize_value(p[(static_cast<size_t>(c) * h + i) * w + j]);
  }
  return out;
}

inline Tensor load_image(const std::string& path, int image_size) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("failed to decode image: " + path);
  if (bgr.rows != image_size || bgr.cols != image_size)
    cv::resize(bgr, bgr, cv::Size(image_size, image_size), 0, 0, cv::INTER_LINEAR);
  return mat8_to_tensor(bgr);
}

inline void write_png(const std::string& path, const Tensor& img) {
  if (!cv::imwrite(path, tensor_to_mat8(img)))
    throw DataError("failed to write image: " + path);
}

inline Tensor hflip(const Tensor& img) {
  if (img.ndim() != 3) throw DataError("hflip: expected [C, H, W]");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out = Tensor::zeros(img.shape());
  const double* src = img.ptr();
  double* dst = out.ptr();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        dst[(static_cast<size_t>(ch) * h + i) * w + j] =
            src[(static_cast<size_t>(ch) * h + i) * w + (w - 1 - j)];
  return out;
}

}  // namespace imgio

namespace detail {

inline bool has_image_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace detail

// Scans root/<domain>/*.{png,jpg}; the last ceil(test_fraction * N) files of
// each domain's sorted list become its test set. Undecodable files are
// skipped with a warning.
inline DomainDataset scan_dataset(const std::string& root, double test_fraction) {
  namespace fs = std::filesystem;
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    throw DataError("test_fraction must lie in [0, 1)");
  if (!fs::is_directory(root)) throw DataError("path not found or not a directory: " + root);

  std::vector<std::string> domains;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) domains.push_back(entry.path().filename().string());
  std::sort(domains.begin(), domains.end());
  if (domains.size() < 2)
    throw DataError("fewer than 2 domains under " + root + " (found " +
                    std::to_string(domains.size()) + ")");

  DomainDataset ds;
  ds.root = root;
  ds.domains = domains;
  for (const auto& name : domains) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / name))
      if (entry.is_regular_file() && detail::has_image_extension(entry.path()))
        files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());

    std::vector<std::string> decodable;
    for (const auto& f : files) {
      if (cv::imread(f, cv::IMREAD_COLOR).empty())
        std::cerr << "warning: skipping undecodable image " << f << "\n";
      else
        decodable.push_back(f);
    }
    if (decodable.empty()) throw DataError("domain '" + name + "' has no decodable images");

    const int n = static_cast<int>(decodable.size());
    int n_test = static_cast<int>(std::ceil(test_fraction * n - 1e-9));
    n_test = std::min(std::max(n_test, 0), n);
    const int n_train = n - n_test;
    if (n_train < 1)
      throw DataError("domain '" + name + "' has no training images after the split");
    ds.train_index.emplace_back(decodable.begin(), decodable.begin() + n_train);
    ds.test_index.emplace_back(decodable.begin() + n_train, decodable.end());
  }
  return ds;
}

namespace detail {

// Locates the (domain, file) pair at a flat index over all training images.
inline std::pair<int, int> locate_train(const DomainDataset& ds, int64_t flat) {
  for (size_t d = 0; d < ds.train_index.size(); ++d) {
    int64_t sz = static_cast<int64_t>(ds.train_index[d].size());
    if (flat < sz) return {static_cast<int>(d), static_cast<int>(flat)};
    flat -= sz;
  }
  throw std::logic_error("locate_train: index out of range");
}

inline void copy_into_batch(Tensor& batch, int slot, const Tensor& img) {
  std::copy(img.data().begin(), img.data().end(),
            batch.data().begin() + static_cast<size_t>(slot) * img.numel());
}

}  // namespace detail

// Uniform draw over all (domain, image) training pairs, so larger domains
// appear proportionally more often. Per slot the consumption order is fixed:
// image index from rng, then flip coin from flip_rng. The two streams may be
// the same object.
inline ImageBatch sample_train_batch(const DomainDataset& ds, int n, int image_size,
                                     SeededRng& rng, SeededRng& flip_rng) {
  if (n < 1) throw DataError("sample_train_batch: n must be >= 1");
  const int64_t total = ds.train_total();
  if (total == 0) throw DataError("sample_train_batch: empty training index");
  ImageBatch batch;
  batch.pixels = Tensor::zeros({n, 3, image_size, image_size});
  batch.labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int64_t flat = rng.uniform_int(static_cast<int>(total));
    auto [d, idx] = detail::locate_train(ds, flat);
    bool flip = flip_rng.bernoulli(0.5);
    Tensor img = imgio::load_image(ds.train_index[static_cast<size_t>(d)][static_cast<size_t>(idx)],
                                   image_size);
    if (flip) img = imgio::hflip(img);
    detail::copy_into_batch(batch.pixels, i, img);
    batch.labels[static_cast<size_t>(i)] = d;
  }
  return batch;
}

inline ImageBatch sample_train_batch(const DomainDataset& ds, int n, int image_size,
                                     SeededRng& rng) {
  return sample_train_batch(ds, n, image_size, rng, rng);
}

// Two same-domain, distinct-image references per slot; the target domain is
// drawn uniformly over all K domains. Per slot the order is: domain, first
// index, second index from rng, then the two flip coins from flip_rng.
inline ReferenceBatch sample_reference_pair(const DomainDataset& ds, int n, int image_size,
                                            SeededRng& rng, SeededRng& flip_rng) {
  if (n < 1) throw DataError("sample_reference_pair: n must be >= 1");
  for (size_t d = 0; d < ds.train_index.size(); ++d)
    if (ds.train_index[d].size() < 2)
      throw DataError("domain '" + ds.domains[d] + "' needs >= 2 training images for references");

  ReferenceBatch out;
  out.first.pixels = Tensor::zeros({n, 3, image_size, image_size});
  out.second.pixels = Tensor::zeros({n, 3, image_size, image_size});
  out.first.labels.resize(static_cast<size_t>(n));
  out.second.labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int d = rng.uniform_int(ds.num_domains());
    const auto& files = ds.train_index[static_cast<size_t>(d)];
    int sz = static_cast<int>(files.size());
    int i1 = rng.uniform_int(sz);
    int i2 = rng.uniform_int(sz - 1);
    if (i2 >= i1) ++i2;  // distinct by construction
    bool f1 = flip_rng.bernoulli(0.5);
    bool f2 = flip_rng.bernoulli(0.5);
    Tensor a = imgio::load_image(files[static_cast<size_t>(i1)], image_size);
    Tensor b = imgio::load_image(files[static_cast<size_t>(i2)], image_size);
    if (f1) a = imgio::hflip(a);
    if (f2) b = imgio::hflip(b);
    detail::copy_into_batch(out.first.pixels, i, a);
    detail::copy_into_batch(out.second.pixels, i, b);
    out.first.labels[static_cast<size_t>(i)] = d;
    out.second.labels[static_cast<size_t>(i)] = d;
  }
  return out;
}

inline ReferenceBatch sample_reference_pair(const DomainDataset& ds, int n, int image_size,
                                            SeededRng& rng) {
  return sample_reference_pair(ds, n, image_size, rng, rng);
}

// n standard-Gaussian latent vectors; empty for n = 0.
inline std::vector<Tensor> sample_latents(int n, int latent_dim, SeededRng& rng) {
  if (n < 0 || latent_dim < 1) throw DataError("sample_latents: bad arguments");
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(Tensor::randn({latent_dim}, rng));
  return out;
}

// Stacks equal-length vectors into a [n, dim] matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DataError("stack_rows: empty input");
  const int dim = rows[0].dim(0);
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), dim});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].ndim() != 1 || rows[i].dim(0) != dim)
      throw DataError("stack_rows: inconsistent shapes");
    std::copy(rows[i].data().begin(), rows[i].data().end(),
              out.data().begin() + i * static_cast<size_t>(dim));
  }
  return out;
}

// Extracts element i of a batch as [C, H, W].
inline Tensor batch_slice(const Tensor& batch, int i) {
  if (batch.ndim() != 4) throw DataError("batch_slice: expected rank-4 batch");
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor out = Tensor::zeros({c, h, w});
  std::copy_n(batch.ptr() + static_cast<size_t>(i) * out.numel(),
              static_cast<size_t>(out.numel()), out.ptr());
  return out;
}

}  // namespace stylemorph
