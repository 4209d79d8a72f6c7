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

#include "kdx/vam.hpp"

namespace kdx {

int default_channels_per_block(Family family) {
  switch (family) {
    case Family::vgg8:
    case Family::wrn16_2:
    case Family::wrn40_1:
      return 8;
    case Family::resnet18:
      return 16;
    case Family::tiny_cnn:
      return 8;
  }
  return 8;
}

}  // namespace kdx
