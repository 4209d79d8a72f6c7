// Copyright (c) 2026 The KDX Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "kdx/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kdx/errors.hpp"

namespace kdx {

namespace {

constexpr int kCifarPixels = 3 * 32 * 32;

}  // namespace

std::string to_string(DataSource s) {
  switch (s) {
    case DataSource::cifar10_binary: return "cifar10-binary";
    case DataSource::cifar100_binary: return "cifar100-binary";
    case DataSource::synthetic: return "synthetic";
  }
  return "unknown";
}

DataSource parse_data_source(const std::string& s) {
  if (s == "cifar10-binary" || s == "cifar10") return DataSource::cifar10_binary;
  if (s == "cifar100-binary" || s == "cifar100") return DataSource::cifar100_binary;
  if (s == "synthetic") return DataSource::synthetic;
  throw ConfigError("unknown dataset source '" + s + "'");
}

int DatasetSpec::classes() const {
  switch (source) {
    case DataSource::cifar10_binary: return 10;
    case DataSource::cifar100_binary: return 100;
    case DataSource::synthetic: return num_classes;
  }
  return num_classes;
}

void DatasetSpec::validate() const {
  if (train_size < 0 || test_size < 0) throw ConfigError("subset sizes must be non-negative");
  if (source == DataSource::synthetic) {
    if (num_classes < 2) throw ConfigError("synthetic task needs at least two classes");
    if (image_size < 4) throw ConfigError("synthetic images must be at least 4x4");
    if (synthetic_groups < 1 || synthetic_groups > num_classes) throw ConfigError("synthetic_groups must be in [1, K]");
    if (synthetic_train < 1 || synthetic_test < 1) throw ConfigError("synthetic split sizes must be positive");
    if (train_size > synthetic_train || test_size > synthetic_test)
      throw ConfigError("subset larger than the synthetic split");
  } else {
    if (train_size > 50000 || test_size > 10000) throw ConfigError("subset larger than the CIFAR split");
    if (num_classes != classes())
      throw ConfigError("num_classes=" + std::to_string(num_classes) + " does not match " + to_string(source));
  }
  for (float s : stddev)
    if (!(s > 0.0f)) throw ConfigError("normalisation std must be positive");
}

CifarRecords read_cifar_file(const std::string& path, int label_bytes, int label_index, int limit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  const std::size_t record = std::size_t(label_bytes + kCifarPixels);
  in.seekg(0, std::ios::end);
  const std::streamoff bytes = in.tellg();
  in.seekg(0, std::ios::beg);
  if (bytes <= 0) throw DataError(path + ": empty file");
  if (std::size_t(bytes) % record != 0) {
    const std::streamoff offset = std::streamoff(std::size_t(bytes) / record * record);
    throw DataError(path + ": truncated record at byte offset " + std::to_string(offset) + " (file has " +
                    std::to_string(bytes) + " bytes, records are " + std::to_string(record) + " bytes)");
  }
  std::size_t count = std::size_t(bytes) / record;
  if (limit > 0) count = std::min(count, std::size_t(limit));
  CifarRecords out;
  out.pixels.resize(count * kCifarPixels);
  out.labels.resize(count);
  std::vector<char> buf(record);
  for (std::size_t i = 0; i < count; ++i) {
    if (!in.read(buf.data(), std::streamsize(record)))
      throw DataError(path + ": read failed at byte offset " + std::to_string(i * record));
    out.labels[i] = static_cast<unsigned char>(buf[std::size_t(label_index)]);
    std::copy(buf.begin() + label_bytes, buf.end(), reinterpret_cast<char*>(out.pixels.data() + i * kCifarPixels));
  }
  return out;
}

std::uint64_t fingerprint_of(const Tensor<float>& images, std::span<const int> labels) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  const Shape s = images.shape();
  mix(&s, sizeof s);
  mix(labels.data(), labels.size_bytes());
  mix(images.data(), std::size_t(images.size()) * sizeof(float));
  return h;
}

namespace {

Dataset from_records(const CifarRecords& r, const DatasetSpec& spec) {
  Dataset d;
  const int n = int(r.labels.size());
  d.images = Tensor<float>(Shape{n, 3, 32, 32});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 1024; ++p) {
        const float v = float(r.pixels[std::size_t(i) * kCifarPixels + c * 1024 + p]) / 255.0f;
        d.images.data()[(std::size_t(i) * 3 + c) * 1024 + p] = (v - spec.mean[std::size_t(c)]) / spec.stddev[std::size_t(c)];
      }
  d.labels = r.labels;
  d.num_classes = spec.classes();
  for (int y : d.labels)
    if (y < 0 || y >= d.num_classes) throw DataError("label " + std::to_string(y) + " out of range");
  d.fingerprint = fingerprint_of(d.images, d.labels);
  return d;
}

void append(CifarRecords& dst, CifarRecords&& src) {
  dst.pixels.insert(dst.pixels.end(), src.pixels.begin(), src.pixels.end());
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

struct Blob {
  double cy, cx, sigma;
  std::array<double, 3> color;
};

std::vector<Blob> random_blobs(int count, int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.2 * size, 0.8 * size);
  std::uniform_real_distribution<double> sig(0.08 * size, 0.2 * size);
  std::normal_distribution<double> col(0.0, 1.0);
  std::vector<Blob> blobs;
  for (int i = 0; i < count; ++i) blobs.push_back({pos(rng), pos(rng), sig(rng), {col(rng), col(rng), col(rng)}});
  return blobs;
}

void render(const std::vector<Blob>& blobs, double amp, double dy, double dx, int size, float* img) {
  for (const auto& b : blobs)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double ry = y - b.cy - dy, rx = x - b.cx - dx;
        const double g = amp * std::exp(-(ry * ry + rx * rx) / (2 * b.sigma * b.sigma));
        for (int c = 0; c < 3; ++c) img[(std::size_t(c) * size + y) * size + x] += float(g * b.color[std::size_t(c)]);
      }
}

Dataset synthetic_split(const DatasetSpec& spec, const std::vector<std::vector<Blob>>& group_blobs,
                        const std::vector<std::vector<Blob>>& class_blobs, int n, std::uint64_t seed) {
  const int K = spec.num_classes, S = spec.image_size;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, spec.synthetic_noise);
  std::uniform_real_distribution<double> amp(0.6, 1.4);
  std::uniform_real_distribution<double> shift(-0.12 * S, 0.12 * S);
  Dataset d;
  d.images = Tensor<float>(Shape{n, 3, S, S});
  d.labels.resize(std::size_t(n));
  d.num_classes = K;
  for (int i = 0; i < n; ++i) {
    const int y = i % K;  // balanced
    d.labels[std::size_t(i)] = y;
    float* img = d.images.data() + std::size_t(i) * 3 * S * S;
    const int g = y % spec.synthetic_groups;
    render(group_blobs[std::size_t(g)], amp(rng), shift(rng), shift(rng), S, img);
    render(class_blobs[std::size_t(y)], amp(rng) * 0.8, shift(rng), shift(rng), S, img);
    for (int p = 0; p < 3 * S * S; ++p) img[p] += float(noise(rng));
  }
  d.fingerprint = fingerprint_of(d.images, d.labels);
  return d;
}

Dataset subset(const Dataset& d, int size) {
  if (size <= 0 || size >= d.size()) return d;
  Dataset out;
  const Shape s = d.images.shape();
  out.images = Tensor<float>(Shape{size, s.c, s.h, s.w});
  out.images.array() = d.images.array().head(Eigen::Index(size) * s.sample_size());
  out.labels.assign(d.labels.begin(), d.labels.begin() + size);
  out.num_classes = d.num_classes;
  out.fingerprint = fingerprint_of(out.images, out.labels);
  return out;
}

}  // namespace

DataSplits load_dataset(const DatasetSpec& spec) {
  spec.validate();
  namespace fs = std::filesystem;
  DataSplits splits;
  switch (spec.source) {
    case DataSource::cifar10_binary: {
      CifarRecords train;
      const int want = spec.train_size > 0 ? spec.train_size : 50000;
      for (int b = 1; b <= 5 && int(train.labels.size()) < want; ++b)
        append(train, read_cifar_file((fs::path(spec.root) / ("data_batch_" + std::to_string(b) + ".bin")).string(),
                                      1, 0, want - int(train.labels.size())));
      splits.train = from_records(train, spec);
      splits.test = from_records(
          read_cifar_file((fs::path(spec.root) / "test_batch.bin").string(), 1, 0, spec.test_size), spec);
      break;
    }
    case DataSource::cifar100_binary:
      splits.train =
          from_records(read_cifar_file((fs::path(spec.root) / "train.bin").string(), 2, 1, spec.train_size), spec);
      splits.test =
          from_records(read_cifar_file((fs::path(spec.root) / "test.bin").string(), 2, 1, spec.test_size), spec);
      break;
    case DataSource::synthetic: {
      std::mt19937_64 rng(spec.synthetic_seed);
      std::vector<std::vector<Blob>> group_blobs, class_blobs;
      for (int g = 0; g < spec.synthetic_groups; ++g) group_blobs.push_back(random_blobs(3, spec.image_size, rng));
      for (int k = 0; k < spec.num_classes; ++k) class_blobs.push_back(random_blobs(2, spec.image_size, rng));
      const Dataset train = synthetic_split(spec, group_blobs, class_blobs, spec.synthetic_train, rng());
      const Dataset test = synthetic_split(spec, group_blobs, class_blobs, spec.synthetic_test, rng());
      splits.train = subset(train, spec.train_size);
      splits.test = subset(test, spec.test_size);
      break;
    }
  }
  return splits;
}

Tensor<float> make_batch(const Dataset& data, std::span<const int> indices, const DatasetSpec& aug,
                         std::mt19937_64* rng) {
  const Shape s = data.image_shape();
  Tensor<float> batch(Shape{int(indices.size()), s.c, s.h, s.w});
  const Eigen::Index sample = s.sample_size();
  const int pad = std::max(1, s.h / 8);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const float* src = data.images.data() + Eigen::Index(indices[b]) * sample;
    float* dst = batch.data() + Eigen::Index(b) * sample;
    int oy = 0, ox = 0;
    bool flip = false;
    if (rng && aug.random_crop) {
      std::uniform_int_distribution<int> off(-pad, pad);
      oy = off(*rng);
      ox = off(*rng);
    }
    if (rng && aug.horizontal_flip) flip = std::uniform_int_distribution<int>(0, 1)(*rng) == 1;
    if (oy == 0 && ox == 0 && !flip) {
      std::copy_n(src, sample, dst);
      continue;
    }
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const int sy = y + oy;
          const int sx0 = flip ? s.w - 1 - x : x;
          const int sx = sx0 + ox;
          dst[(Eigen::Index(c) * s.h + y) * s.w + x] =
              (sy >= 0 && sy < s.h && sx >= 0 && sx < s.w) ? src[(Eigen::Index(c) * s.h + sy) * s.w + sx] : 0.0f;
        }
  }
  return batch;
}

std::vector<int> batch_labels(const Dataset& data, std::span<const int> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(data.labels[std::size_t(i)]);
  return out;
}

}  // namespace kdx
