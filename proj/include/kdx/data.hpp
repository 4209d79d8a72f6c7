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

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kdx/tensor.hpp"

namespace kdx {

enum class DataSource { cifar10_binary, cifar100_binary, synthetic };

std::string to_string(DataSource s);
DataSource parse_data_source(const std::string& s);

struct DatasetSpec {
  DataSource source = DataSource::synthetic;
  std::string root;
  int train_size = 0;  // 0 keeps the whole split
  int test_size = 0;
  std::array<float, 3> mean{0.4914f, 0.4822f, 0.4465f};
  std::array<float, 3> stddev{0.2470f, 0.2435f, 0.2616f};
  bool random_crop = false;
  bool horizontal_flip = false;

  // Synthetic task: K classes split into super-groups that share a blob
  // pattern, so teacher soft labels carry class-similarity information.
  int num_classes = 10;
  int image_size = 32;
  int synthetic_train = 5000;
  int synthetic_test = 1000;
  int synthetic_groups = 2;
  double synthetic_noise = 0.6;
  std::uint64_t synthetic_seed = 7;

  /// Class count implied by the source.
  int classes() const;
  void validate() const;
};

struct Dataset {
  Tensor<float> images;  // normalised, (N, 3, H, W)
  std::vector<int> labels;
  int num_classes = 0;
  std::uint64_t fingerprint = 0;

  int size() const { return int(labels.size()); }
  Shape image_shape() const { return {1, images.shape().c, images.shape().h, images.shape().w}; }
};

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Raw records of one CIFAR binary file.
struct CifarRecords {
  std::vector<std::uint8_t> pixels;  // 3072 bytes per record, plane-major RGB
  std::vector<int> labels;
};

/// Parses a CIFAR binary file with `label_bytes` label bytes per record
/// (1 for CIFAR-10, 2 for CIFAR-100) keeping label byte `label_index`.
/// Reads at most `limit` records (0 = all). Throws DataError with the byte
/// offset of a truncated record.
CifarRecords read_cifar_file(const std::string& path, int label_bytes, int label_index, int limit = 0);

/// Throws DataError when files are missing or truncated.
DataSplits load_dataset(const DatasetSpec& spec);

/// FNV-1a over labels and image bytes.
std::uint64_t fingerprint_of(const Tensor<float>& images, std::span<const int> labels);

/// Gathers `indices` into a batch, applying the enabled augmentations.
Tensor<float> make_batch(const Dataset& data, std::span<const int> indices, const DatasetSpec& aug,
                         std::mt19937_64* rng);
std::vector<int> batch_labels(const Dataset& data, std::span<const int> indices);

}  // namespace kdx
