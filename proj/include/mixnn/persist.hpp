// Copyright 2026 The mixnn Authors.
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

#include <json.hpp>

#include "mixnn/model.hpp"

// Model persistence as a directory bundle: manifest.json (version, formula,
// schema, specs, hyperparameters, per-tensor layout with CRC32) plus
// params.bin (little-endian 64-bit reals concatenated in manifest order).
// Round trips are bit-exact.

namespace mixnn::persist {

inline constexpr int kFormatVersion = 1;

// `extra` is stored under "metadata" (train config, fit report, ...).
void save_model(const Model& model, const std::string& dir,
                const nlohmann::json* extra = nullptr);

Model load_model(const std::string& dir, nlohmann::json* extra = nullptr);

}  // namespace mixnn::persist
