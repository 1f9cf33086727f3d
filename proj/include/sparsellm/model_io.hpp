#pragma once

// Tensor container: a directory holding manifest.json plus one raw
// little-endian row-major blob per tensor. Models and calibration sets are
// both stored this way; see docs/model_format.md.

#include <sparsellm/error.hpp>
#include <sparsellm/netmodel.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sparsellm::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kFormatName = "sparsellm-container";

struct Tensor {
  Matrix data;
  Dtype dtype = Dtype::F64;
};

struct Container {
  std::string kind;  // "model" or "calibration"
  json meta = json::object();
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("tensors." + name + ": missing");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

namespace detail {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <class T>
std::vector<char> encode(const Matrix& m) {
  std::vector<char> out(static_cast<std::size_t>(m.size()) * sizeof(T));
  std::size_t off = 0;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      const T v = to_little(static_cast<T>(m(i, j)));
      std::memcpy(out.data() + off, &v, sizeof(T));
      off += sizeof(T);
    }
  }
  return out;
}

template <class T>
Matrix decode(const std::vector<char>& bytes, Index rows, Index cols) {
  Matrix m(rows, cols);
  std::size_t off = 0;
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      T v;
      std::memcpy(&v, bytes.data() + off, sizeof(T));
      m(i, j) = static_cast<double>(to_little(v));
      off += sizeof(T);
    }
  }
  return m;
}

inline std::vector<char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const fs::path& p, const char* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(data, static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

}  // namespace detail

inline void write_container(const Container& c, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json manifest;
  manifest["format"] = kFormatName;
  manifest["version"] = kFormatVersion;
  manifest["kind"] = c.kind;
  manifest["meta"] = c.meta;
  json tensors = json::array();
  for (const auto& [name, t] : c.tensors) {
    const std::string file = name + ".bin";
    std::vector<char> blob = t.dtype == Dtype::F32 ? detail::encode<float>(t.data)
                                                   : detail::encode<double>(t.data);
    detail::write_file(dir / file, blob.data(), blob.size());
    tensors.push_back({{"name", name},
                       {"shape", {t.data.rows(), t.data.cols()}},
                       {"dtype", std::string(to_string(t.dtype))},
                       {"file", file}});
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump(2) + "\n";
  detail::write_file(dir / "manifest.json", text.data(), text.size());
}

inline Container read_container(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw FormatError("manifest: missing " + mpath.string());

  json manifest;
  try {
    const auto bytes = detail::read_file(mpath);
    manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }

  auto field = [&](const json& obj, const std::string& key, const std::string& path) -> const json& {
    if (!obj.is_object() || !obj.contains(key)) throw FormatError(path + key + ": missing");
    return obj.at(key);
  };

  try {
    if (field(manifest, "format", "") != kFormatName) throw FormatError("format: unrecognized");
    const json& ver = field(manifest, "version", "");
    if (!ver.is_number_integer() || ver.get<int>() != kFormatVersion) {
      throw FormatError("version: unsupported version " + ver.dump());
    }
    Container c;
    c.kind = field(manifest, "kind", "").get<std::string>();
    if (manifest.contains("meta")) c.meta = manifest.at("meta");

    const json& tensors = field(manifest, "tensors", "");
    if (!tensors.is_array()) throw FormatError("tensors: expected array");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const json& t = tensors[i];
      const std::string where = "tensors[" + std::to_string(i) + "].";
      const auto name = field(t, "name", where).get<std::string>();
      const json& shape = field(t, "shape", where);
      if (!shape.is_array() || shape.size() != 2) throw FormatError(where + "shape: expected [rows, cols]");
      const auto rows = shape[0].get<std::int64_t>();
      const auto cols = shape[1].get<std::int64_t>();
      if (rows < 0 || cols < 0) throw FormatError(where + "shape: negative extent");
      const Dtype dtype = parse_dtype(field(t, "dtype", where).get<std::string>());
      const auto file = field(t, "file", where).get<std::string>();

      if (!fs::exists(dir / file)) throw FormatError(where + "file: missing blob " + file);
      const auto bytes = detail::read_file(dir / file);
      const auto expected = static_cast<std::size_t>(rows * cols) * detail::dtype_size(dtype);
      if (bytes.size() != expected) {
        throw FormatError(where + "file: " + name + " declares " + std::to_string(rows) + "x" +
                          std::to_string(cols) + " " + std::string(to_string(dtype)) + " (" +
                          std::to_string(expected) + " bytes) but blob holds " +
                          std::to_string(bytes.size()) + " bytes");
      }
      Tensor tensor;
      tensor.dtype = dtype;
      tensor.data = dtype == Dtype::F32 ? detail::decode<float>(bytes, rows, cols)
                                        : detail::decode<double>(bytes, rows, cols);
      if (!tensor.data.allFinite()) throw FormatError(where + "file: non-finite values in " + name);
      if (!c.tensors.emplace(name, std::move(tensor)).second) {
        throw FormatError(where + "name: duplicate tensor " + name);
      }
    }
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Models

inline std::string tensor_name(std::size_t block, const std::string& layer, const char* part) {
  return "blocks." + std::to_string(block) + "." + layer + "." + part;
}

/// Keep-masks stored next to the weights, keyed like the weights. A missing
/// entry means the layer was left dense.
using MaskTensors = std::map<std::string, Matrix>;

inline Container model_to_container(const NetworkSpec& net, const MaskTensors& masks = {}) {
  net.validate();
  Container c;
  c.kind = "model";
  c.meta["input_dim"] = net.input_dim;
  json blocks = json::array();
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    const auto& b = net.blocks[i];
    blocks.push_back({{"kind", std::string(to_string(b.kind))}});
    const auto names = BlockSpec::layer_names(b.kind);
    for (std::size_t l = 0; l < names.size(); ++l) {
      const DenseLayer& layer = b.layers[l];
      c.tensors[tensor_name(i, names[l], "weight")] = {layer.weight, layer.dtype};
      if (layer.has_bias()) c.tensors[tensor_name(i, names[l], "bias")] = {layer.bias, layer.dtype};
      const auto mname = tensor_name(i, names[l], "mask");
      if (auto it = masks.find(mname); it != masks.end()) c.tensors[mname] = {it->second, Dtype::F32};
    }
  }
  c.meta["blocks"] = std::move(blocks);
  return c;
}

inline NetworkSpec model_from_container(const Container& c, MaskTensors* masks = nullptr) {
  if (c.kind != "model") throw FormatError("kind: expected 'model', found '" + c.kind + "'");
  try {
    NetworkSpec net;
    if (!c.meta.contains("input_dim")) throw FormatError("meta.input_dim: missing");
    net.input_dim = c.meta.at("input_dim").get<Index>();
    if (!c.meta.contains("blocks") || !c.meta.at("blocks").is_array()) {
      throw FormatError("meta.blocks: missing");
    }
    const json& blocks = c.meta.at("blocks");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      BlockSpec b;
      if (!blocks[i].contains("kind")) throw FormatError("meta.blocks[" + std::to_string(i) + "].kind: missing");
      b.kind = parse_block_kind(blocks[i].at("kind").get<std::string>());
      for (const auto& lname : BlockSpec::layer_names(b.kind)) {
        DenseLayer layer;
        const Tensor& w = c.at(tensor_name(i, lname, "weight"));
        layer.weight = w.data;
        layer.dtype = w.dtype;
        const auto bname = tensor_name(i, lname, "bias");
        if (c.has(bname)) {
          const Tensor& bias = c.at(bname);
          if (bias.data.cols() != 1) throw FormatError("tensors." + bname + ": bias must be a column");
          layer.bias = bias.data.col(0);
        }
        const auto mname = tensor_name(i, lname, "mask");
        if (masks && c.has(mname)) (*masks)[mname] = c.at(mname).data;
        b.layers.push_back(std::move(layer));
      }
      net.blocks.push_back(std::move(b));
    }
    try {
      net.validate();
    } catch (const ShapeError& e) {
      throw FormatError(std::string("meta.blocks: ") + e.what());
    }
    return net;
  } catch (const json::exception& e) {
    throw FormatError(std::string("meta: ") + e.what());
  }
}

inline void save_model(const NetworkSpec& net, const fs::path& dir, const MaskTensors& masks = {}) {
  write_container(model_to_container(net, masks), dir);
}

inline NetworkSpec load_model(const fs::path& dir, MaskTensors* masks = nullptr) {
  return model_from_container(read_container(dir), masks);
}

// ---------------------------------------------------------------------------
// Calibration

inline void save_calibration(const CalibrationSet& calib, const fs::path& dir,
                             Dtype dtype = Dtype::F64) {
  Container c;
  c.kind = "calibration";
  c.meta["columns"] = calib.x.cols();
  c.tensors["X"] = {calib.x, dtype};
  c.tensors["y_dense"] = {calib.y_dense, dtype};
  write_container(c, dir);
}

inline CalibrationSet load_calibration(const fs::path& dir) {
  Container c = read_container(dir);
  if (c.kind != "calibration") {
    throw FormatError("kind: expected 'calibration', found '" + c.kind + "'");
  }
  CalibrationSet calib;
  calib.x = c.at("X").data;
  calib.y_dense = c.at("y_dense").data;
  if (calib.x.cols() < 1) throw FormatError("tensors.X: needs at least one sample");
  if (calib.y_dense.cols() != calib.x.cols()) {
    throw FormatError("tensors.y_dense: sample count differs from X");
  }
  return calib;
}

}  // namespace sparsellm::io
