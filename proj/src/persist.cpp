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

#include "mixnn/persist.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mixnn::persist {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "params.bin layout assumes a little-endian host");

namespace {

// Standard CRC-32 (IEEE 802.3), table-driven.
std::uint32_t crc32(const void* data, std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

json cov_to_json(const cov::CovarianceSpec& s) {
  json j;
  j["kind"] = cov::kind_name(s.kind);
  j["sigma2"] = s.sigma2;
  j["rho"] = s.rho;
  j["phi"] = s.phi;
  j["theta"] = s.theta;
  j["arma_sigma"] = s.arma_sigma;
  j["lengthscale"] = s.lengthscale;
  j["trainable"] = s.trainable;
  j["coordinate_cols"] = s.coordinate_cols;
  if (!s.train_rows.empty()) j["train_rows"] = s.train_rows;
  if (s.kinship.rows() > 0) {
    j["kinship_rows"] = s.kinship.rows();
    j["kinship_cols"] = s.kinship.cols();
  }
  if (s.coords.rows() > 0) {
    j["coords_rows"] = s.coords.rows();
    j["coords_cols"] = s.coords.cols();
  }
  for (const auto& c : s.components) j["components"].push_back(cov_to_json(c));
  return j;
}

cov::CovarianceSpec cov_from_json(const json& j) {
  cov::CovarianceSpec s;
  s.kind = cov::kind_from_name(j.at("kind").get<std::string>());
  s.sigma2 = j.value("sigma2", 1.0);
  s.rho = j.value("rho", 0.7);
  s.phi = j.value("phi", std::vector<double>{});
  s.theta = j.value("theta", std::vector<double>{});
  s.arma_sigma = j.value("arma_sigma", 1.0);
  s.lengthscale = j.value("lengthscale", 1.0);
  s.trainable = j.value("trainable", false);
  s.coordinate_cols = j.value("coordinate_cols", std::vector<std::string>{});
  s.train_rows = j.value("train_rows", std::vector<int>{});
  if (j.contains("components")) {
    for (const auto& c : j["components"]) s.components.push_back(cov_from_json(c));
  }
  return s;
}

struct NamedBlock {
  std::string name;
  ad::Shape shape;
  const double* data;
};

std::vector<double> matrix_flat(const Eigen::MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()) * m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      v[static_cast<std::size_t>(i) * m.cols() + j] = m(i, j);
  return v;
}

Eigen::MatrixXd matrix_from_flat(const std::vector<double>& v, int rows,
                                 int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      m(i, j) = v[static_cast<std::size_t>(i) * cols + j];
  return m;
}

}  // namespace

void save_model(const Model& model, const std::string& dir, const json* extra) {
  fs::create_directories(dir);

  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["formula"] = model.cfg.formula_text;
  manifest["build_seed"] = model.build_seed;
  manifest["encoder_width"] = model.encoder_width;

  for (const auto& [col, kind] : model.cfg.schema) {
    manifest["schema"][col] =
        kind == formula::ColKind::Categorical ? "categorical" : "continuous";
  }
  {
    const auto& e = model.cfg.encoder;
    manifest["encoder"] = {
        {"embed_dim", e.embed_dim},
        {"enforce_centering", e.enforce_centering},
        {"unknown_strategy",
         e.unknown_strategy == enc::UnknownStrategy::Zero ? "zero" : "learned"}};
    for (const auto& [col, w] : e.cat_embed_dims) {
      manifest["encoder"]["cat_embed_dims"][col] = w;
    }
  }
  {
    const auto& b = model.cfg.backbone;
    json jb;
    jb["kind"] = b.kind == BackboneConfig::Kind::Gsem ? "gsem" : "manifold";
    jb["aggregation"] = mani::aggregation_name(b.aggregation);
    jb["gsem"] = {{"hidden_dims", b.gsem.hidden_dims},
                  {"activation", gsem::activation_name(b.gsem.activation)},
                  {"dropout", b.gsem.dropout},
                  {"layer_norm", b.gsem.layer_norm},
                  {"residual", b.gsem.residual},
                  {"structure", gsem::structure_name(b.gsem.structure)},
                  {"n_heads", b.gsem.n_heads},
                  {"edge_threshold", b.gsem.edge_threshold}};
    for (const auto& blk : b.manifold) {
      jb["manifold"].push_back({{"grid_shape", blk.grid_shape},
                                {"use_spde", blk.use_spde},
                                {"spde_alpha", blk.spde_alpha},
                                {"spde_kappa_init", blk.spde_kappa_init},
                                {"use_sem", blk.use_sem},
                                {"sem_lengthscale", blk.sem_lengthscale},
                                {"train_kappa", blk.train_kappa}});
    }
    manifest["backbone"] = jb;
  }
  for (const auto& o : model.cfg.outcomes) {
    manifest["outcomes"].push_back({{"name", o.name},
                                    {"targets", o.targets},
                                    {"family", fam::family_name(o.family)},
                                    {"n_classes", o.n_classes},
                                    {"dispersion_init", o.dispersion_init},
                                    {"weight", o.weight}});
  }
  manifest["output_sem"] =
      model.cfg.output_sem == fam::OutputSemMode::None      ? "none"
      : model.cfg.output_sem == fam::OutputSemMode::Learned ? "learned"
                                                            : "edges";
  for (const auto& e : model.cfg.output_edges) {
    json je{{"from", e.from}, {"to", e.to}};
    if (e.weight) je["weight"] = *e.weight;
    manifest["output_edges"].push_back(je);
  }
  for (const auto& [g, spec] : model.cfg.cov_map) {
    manifest["cov_map"][g] = cov_to_json(spec);
  }
  for (const auto& [col, levels] : model.fitted_levels.levels) {
    manifest["levels"][col] = levels;
  }
  for (const auto& t : model.tables) {
    manifest["tables"].push_back({{"group", t.group},
                                  {"slope", t.slope},
                                  {"key", t.key},
                                  {"term_index", t.term_index},
                                  {"z_col", t.z_col},
                                  {"n_levels", t.n_levels},
                                  {"has_cov", t.has_cov}});
  }
  if (extra) manifest["metadata"] = *extra;

  // Tensor blocks: model parameters plus covariance side matrices.
  std::vector<std::pair<std::string, std::vector<double>>> extra_blocks;
  std::vector<std::pair<std::string, ad::Shape>> extra_shapes;
  for (const auto& [g, spec] : model.cfg.cov_map) {
    if (spec.kinship.rows() > 0) {
      extra_blocks.emplace_back("covdata/" + g + "/kinship",
                                matrix_flat(spec.kinship));
      extra_shapes.emplace_back("covdata/" + g + "/kinship",
                                ad::Shape{static_cast<int>(spec.kinship.rows()),
                                          static_cast<int>(spec.kinship.cols())});
    }
    if (spec.coords.rows() > 0) {
      extra_blocks.emplace_back("covdata/" + g + "/coords",
                                matrix_flat(spec.coords));
      extra_shapes.emplace_back("covdata/" + g + "/coords",
                                ad::Shape{static_cast<int>(spec.coords.rows()),
                                          static_cast<int>(spec.coords.cols())});
    }
  }

  std::string bin;
  auto append_block = [&](const std::string& name, ad::Shape shape,
                          const double* data, std::size_t count) {
    const std::size_t offset = bin.size();
    const std::size_t bytes = count * sizeof(double);
    bin.append(reinterpret_cast<const char*>(data), bytes);
    manifest["tensors"].push_back(
        {{"name", name},
         {"rows", shape.rows},
         {"cols", shape.cols},
         {"offset", offset},
         {"crc32", crc32(data, bytes)}});
  };
  for (const auto& name : model.params.names()) {
    const Tensor& t = model.params.at(name);
    append_block(name, t.shape, t.value.data(), t.value.size());
  }
  for (std::size_t i = 0; i < extra_blocks.size(); ++i) {
    append_block(extra_blocks[i].first, extra_shapes[i].second,
                 extra_blocks[i].second.data(), extra_blocks[i].second.size());
  }

  const fs::path base(dir);
  {
    std::ofstream out(base / "params.bin.tmp", std::ios::binary);
    if (!out) throw DataError("cannot write '" + dir + "/params.bin'");
    out.write(bin.data(), static_cast<std::streamsize>(bin.size()));
  }
  {
    std::ofstream out(base / "manifest.json.tmp", std::ios::binary);
    if (!out) throw DataError("cannot write '" + dir + "/manifest.json'");
    out << manifest.dump(2) << '\n';
  }
  fs::rename(base / "params.bin.tmp", base / "params.bin");
  fs::rename(base / "manifest.json.tmp", base / "manifest.json");
}

Model load_model(const std::string& dir, json* extra) {
  const fs::path base(dir);
  std::ifstream mf(base / "manifest.json");
  if (!mf) throw DataError("cannot open '" + dir + "/manifest.json'");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw DataError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  const int version = manifest.value("format_version", -1);
  if (version != kFormatVersion) {
    throw DataError("unsupported model format version " +
                    std::to_string(version) + " (expected " +
                    std::to_string(kFormatVersion) + ")");
  }

  std::ifstream bf(base / "params.bin", std::ios::binary);
  if (!bf) throw DataError("cannot open '" + dir + "/params.bin'");
  std::string bin((std::istreambuf_iterator<char>(bf)),
                  std::istreambuf_iterator<char>());

  std::map<std::string, std::pair<ad::Shape, std::vector<double>>> blocks;
  if (!manifest.contains("tensors")) {
    throw DataError("manifest.json lists no tensors");
  }
  for (const auto& jt : manifest["tensors"]) {
    const std::string name = jt.at("name").get<std::string>();
    const int rows = jt.at("rows").get<int>();
    const int cols = jt.at("cols").get<int>();
    const std::size_t offset = jt.at("offset").get<std::size_t>();
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    const std::size_t bytes = count * sizeof(double);
    if (offset + bytes > bin.size()) {
      throw DataError("params.bin is truncated at tensor '" + name + "'");
    }
    const std::uint32_t expect = jt.at("crc32").get<std::uint32_t>();
    const std::uint32_t got = crc32(bin.data() + offset, bytes);
    if (expect != got) {
      throw DataError("checksum mismatch for tensor '" + name + "'");
    }
    std::vector<double> v(count);
    std::memcpy(v.data(), bin.data() + offset, bytes);
    blocks[name] = {ad::Shape{rows, cols}, std::move(v)};
  }

  Model m;
  m.cfg.formula_text = manifest.at("formula").get<std::string>();
  m.ast = formula::parse_formula(m.cfg.formula_text);
  m.build_seed = manifest.value("build_seed", 0ull);
  m.encoder_width = manifest.at("encoder_width").get<int>();

  if (manifest.contains("schema")) {
    for (const auto& [col, kind] : manifest["schema"].items()) {
      m.cfg.schema[col] = kind.get<std::string>() == "categorical"
                              ? formula::ColKind::Categorical
                              : formula::ColKind::Continuous;
    }
  }
  {
    const auto& je = manifest.at("encoder");
    m.cfg.encoder.embed_dim = je.at("embed_dim").get<int>();
    m.cfg.encoder.enforce_centering = je.at("enforce_centering").get<bool>();
    m.cfg.encoder.unknown_strategy =
        je.at("unknown_strategy").get<std::string>() == "learned"
            ? enc::UnknownStrategy::Learned
            : enc::UnknownStrategy::Zero;
    if (je.contains("cat_embed_dims")) {
      for (const auto& [col, w] : je["cat_embed_dims"].items()) {
        m.cfg.encoder.cat_embed_dims[col] = w.get<int>();
      }
    }
  }
  {
    const auto& jb = manifest.at("backbone");
    m.cfg.backbone.kind = jb.at("kind").get<std::string>() == "manifold"
                              ? BackboneConfig::Kind::Manifold
                              : BackboneConfig::Kind::Gsem;
    m.cfg.backbone.aggregation =
        mani::aggregation_from_name(jb.at("aggregation").get<std::string>());
    const auto& jg = jb.at("gsem");
    m.cfg.backbone.gsem.hidden_dims = jg.at("hidden_dims").get<std::vector<int>>();
    m.cfg.backbone.gsem.activation =
        gsem::activation_from_name(jg.at("activation").get<std::string>());
    m.cfg.backbone.gsem.dropout = jg.at("dropout").get<double>();
    m.cfg.backbone.gsem.layer_norm = jg.at("layer_norm").get<bool>();
    m.cfg.backbone.gsem.residual = jg.at("residual").get<bool>();
    m.cfg.backbone.gsem.structure =
        gsem::structure_from_name(jg.at("structure").get<std::string>());
    m.cfg.backbone.gsem.n_heads = jg.at("n_heads").get<int>();
    m.cfg.backbone.gsem.edge_threshold = jg.value("edge_threshold", 0.3);
    if (jb.contains("manifold")) {
      for (const auto& jm : jb["manifold"]) {
        mani::ManifoldBlockConfig blk;
        blk.grid_shape = jm.at("grid_shape").get<std::vector<int>>();
        blk.use_spde = jm.at("use_spde").get<bool>();
        blk.spde_alpha = jm.at("spde_alpha").get<int>();
        blk.spde_kappa_init = jm.at("spde_kappa_init").get<double>();
        blk.use_sem = jm.at("use_sem").get<bool>();
        blk.sem_lengthscale = jm.value("sem_lengthscale", 2.0);
        blk.train_kappa = jm.value("train_kappa", true);
        m.cfg.backbone.manifold.push_back(blk);
      }
    }
  }
  for (const auto& jo : manifest.at("outcomes")) {
    fam::OutcomeSpec o;
    o.name = jo.at("name").get<std::string>();
    o.targets = jo.at("targets").get<std::vector<std::string>>();
    o.family = fam::family_from_name(jo.at("family").get<std::string>());
    o.n_classes = jo.at("n_classes").get<int>();
    o.dispersion_init = jo.at("dispersion_init").get<double>();
    o.weight = jo.at("weight").get<double>();
    m.cfg.outcomes.push_back(o);
  }
  {
    const std::string mode = manifest.at("output_sem").get<std::string>();
    m.cfg.output_sem = mode == "learned" ? fam::OutputSemMode::Learned
                       : mode == "edges" ? fam::OutputSemMode::Edges
                                         : fam::OutputSemMode::None;
  }
  if (manifest.contains("output_edges")) {
    for (const auto& je : manifest["output_edges"]) {
      fam::OutputEdge e;
      e.from = je.at("from").get<std::string>();
      e.to = je.at("to").get<std::string>();
      if (je.contains("weight")) e.weight = je["weight"].get<double>();
      m.cfg.output_edges.push_back(e);
    }
  }
  if (manifest.contains("cov_map")) {
    for (const auto& [g, jc] : manifest["cov_map"].items()) {
      auto spec = cov_from_json(jc);
      if (blocks.count("covdata/" + g + "/kinship")) {
        const auto& [shape, data] = blocks["covdata/" + g + "/kinship"];
        spec.kinship = matrix_from_flat(data, shape.rows, shape.cols);
      }
      if (blocks.count("covdata/" + g + "/coords")) {
        const auto& [shape, data] = blocks["covdata/" + g + "/coords"];
        spec.coords = matrix_from_flat(data, shape.rows, shape.cols);
      }
      m.cfg.cov_map[g] = spec;
    }
  }
  if (manifest.contains("levels")) {
    for (const auto& [col, lv] : manifest["levels"].items()) {
      m.fitted_levels.levels[col] = lv.get<std::vector<std::string>>();
    }
  }
  if (manifest.contains("tables")) {
    for (const auto& jt : manifest["tables"]) {
      TableInfo t;
      t.group = jt.at("group").get<std::string>();
      t.slope = jt.at("slope").get<std::string>();
      t.key = jt.at("key").get<std::string>();
      t.term_index = jt.at("term_index").get<int>();
      t.z_col = jt.at("z_col").get<int>();
      t.n_levels = jt.at("n_levels").get<int>();
      t.has_cov = jt.at("has_cov").get<bool>();
      if (t.has_cov) {
        auto it = m.cfg.cov_map.find(t.group);
        if (it != m.cfg.cov_map.end()) t.cov = it->second;
      }
      m.tables.push_back(t);
    }
  }

  for (auto& [name, block] : blocks) {
    if (name.rfind("covdata/", 0) == 0) continue;
    m.params.add(name, block.first, std::move(block.second));
  }
  if (extra && manifest.contains("metadata")) *extra = manifest["metadata"];
  return m;
}

}  // namespace mixnn::persist
