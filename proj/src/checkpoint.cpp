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

#include "kdx/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <map>

#include "kdx/errors.hpp"

namespace kdx {

namespace {

constexpr char kMagic[4] = {'K', 'D', 'X', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw DataError(path + ": unexpected end of checkpoint at byte offset " + std::to_string(std::streamoff(in.tellg())));
  return v;
}

}  // namespace

template <typename Scalar>
void save_parameters(const std::string& path, const ParameterStore<Scalar>& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kMagic, 4);
  put(out, kVersion);
  put(out, std::uint64_t(store.size()));
  for (const auto& p : store) {
    put(out, std::uint32_t(p->name.size()));
    out.write(p->name.data(), std::streamsize(p->name.size()));
    const Shape s = p->value.shape();
    for (int d : {s.n, s.c, s.h, s.w}) put(out, std::int32_t(d));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) put(out, double(p->value.array()[i]));
  }
  if (!out) throw DataError("failed writing checkpoint " + path);
}

template <typename Scalar>
void load_parameters(const std::string& path, ParameterStore<Scalar>& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) throw DataError(path + ": not a kdx checkpoint");
  if (get<std::uint32_t>(in, path) != kVersion) throw DataError(path + ": unsupported checkpoint version");
  const auto count = get<std::uint64_t>(in, path);
  std::map<std::string, Parameter<Scalar>*> by_name;
  for (auto& p : store) by_name[p->name] = p.get();
  std::size_t loaded = 0;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError(path + ": truncated parameter name");
    Shape s;
    s.n = get<std::int32_t>(in, path);
    s.c = get<std::int32_t>(in, path);
    s.h = get<std::int32_t>(in, path);
    s.w = get<std::int32_t>(in, path);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError(path + ": unexpected parameter '" + name + "'");
    Parameter<Scalar>& p = *it->second;
    if (!(p.value.shape() == s))
      throw DataError(path + ": parameter '" + name + "' has shape " + s.str() + ", model expects " +
                      p.value.shape().str());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.array()[i] = Scalar(get<double>(in, path));
    ++loaded;
  }
  if (loaded != store.size())
    throw DataError(path + ": checkpoint holds " + std::to_string(loaded) + " of " + std::to_string(store.size()) +
                    " parameters");
}

template void save_parameters(const std::string&, const ParameterStore<float>&);
template void save_parameters(const std::string&, const ParameterStore<double>&);
template void load_parameters(const std::string&, ParameterStore<float>&);
template void load_parameters(const std::string&, ParameterStore<double>&);

}  // namespace kdx
