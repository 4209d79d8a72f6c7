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

#include <string>

#include "kdx/parameter.hpp"

namespace kdx {

/// Writes every parameter (including BN running statistics) by name.
/// Values are stored as doubles, so float round-trips are exact.
template <typename Scalar>
void save_parameters(const std::string& path, const ParameterStore<Scalar>& store);

/// Loads values into a store of the same structure. Missing names, shape
/// mismatches and corrupt files throw DataError.
template <typename Scalar>
void load_parameters(const std::string& path, ParameterStore<Scalar>& store);

extern template void save_parameters(const std::string&, const ParameterStore<float>&);
extern template void save_parameters(const std::string&, const ParameterStore<double>&);
extern template void load_parameters(const std::string&, ParameterStore<float>&);
extern template void load_parameters(const std::string&, ParameterStore<double>&);

}  // namespace kdx
