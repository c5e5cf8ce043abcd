#ifndef FISHERPRUNE_MODEL_IO_HPP
#define FISHERPRUNE_MODEL_IO_HPP

// Model document: JSON text with a version field, the ordered node list
// (id, kind, params, inputs), input shape, class count and last-hidden tag.
// Weights live in a sidecar binary file of little-endian float64 values;
// each node's blobs are referenced by element offset and count.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "fisherprune/dataset.hpp"
#include "fisherprune/graph.hpp"

namespace fisherprune {

inline constexpr int kModelFormatVersion = 1;

struct SerializedModel {
  std::string text;
  std::string weights;  // empty for count-only graphs
};

inline SerializedModel save_model(const NetGraph& g, const std::string& weights_file = "") {
  using nlohmann::json;
  SerializedModel out;
  std::size_t offset = 0;
  auto put_blob = [&](const std::vector<double>& v) {
    json ref = {{"offset", offset}, {"count", v.size()}};
    for (double x : v) detail::append_le<double>(out.weights, x);
    offset += v.size();
    return ref;
  };

  json nodes = json::array();
  for (const auto& n : g.nodes) {
    json j = {{"id", n.id}, {"kind", kind_name(n.kind)}, {"inputs", n.inputs}};
    json p = json::object();
    switch (n.kind) {
      case LayerKind::Conv:
        p = {{"filters", n.filters}, {"channels", n.channels}, {"kernel", {n.kh, n.kw}},
             {"stride", n.stride}, {"pad", n.pad}};
        break;
      case LayerKind::Dense:
        p = {{"units", n.filters}, {"in_features", n.channels}};
        break;
      case LayerKind::MaxPool:
        p = {{"window", n.pool}, {"stride", n.stride}};
        break;
      case LayerKind::Dropout:
        p = {{"rate", n.rate}};
        break;
      default:
        break;
    }
    j["params"] = p;
    if (n.has_params() && n.materialized()) {
      json blobs = {{"weight", put_blob(n.weight.storage())}, {"bias", put_blob(n.bias.storage())}};
      if (!n.frozen.empty()) blobs["frozen"] = put_blob({n.frozen.begin(), n.frozen.end()});
      j["blobs"] = blobs;
    }
    nodes.push_back(std::move(j));
  }
  json doc = {{"format", "fisherprune-model"},
              {"version", kModelFormatVersion},
              {"input_shape", {g.input.c, g.input.h, g.input.w}},
              {"classes", g.classes},
              {"last_hidden", g.last_hidden},
              {"nodes", nodes}};
  if (!out.weights.empty()) doc["weights_file"] = weights_file;
  out.text = doc.dump(1) + "\n";
  return out;
}

/// Parses and validates a model document. `weights` is the sidecar content
/// (may be empty for count-only documents).
inline NetGraph load_model(const std::string& text, const std::string& weights = "") {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Schema, std::string("model: not valid JSON: ") + e.what());
  }
  NetGraph g;
  std::string current = "<document>";
  try {
    require(doc.value("format", "") == "fisherprune-model", ErrorKind::Schema,
            "model: missing or wrong 'format' field");
    const int version = doc.at("version").get<int>();
    require(version == kModelFormatVersion, ErrorKind::Schema,
            "model: unsupported version " + std::to_string(version));
    const auto in = doc.at("input_shape").get<std::vector<std::size_t>>();
    require(in.size() == 3, ErrorKind::Schema, "model: input_shape must be [c,h,w]");
    g.input = {in[0], in[1], in[2]};
    g.classes = doc.at("classes").get<std::size_t>();
    g.last_hidden = doc.at("last_hidden").get<std::string>();
    const std::size_t blob_values = weights.size() / 8;
    require(weights.size() % 8 == 0, ErrorKind::Schema, "model: weight sidecar size not a multiple of 8");
    auto get_blob = [&](const json& ref) {
      const auto off = ref.at("offset").get<std::size_t>();
      const auto cnt = ref.at("count").get<std::size_t>();
      require(off + cnt <= blob_values, ErrorKind::Schema,
              "node '" + current + "': blob [" + std::to_string(off) + ", +" +
                  std::to_string(cnt) + ") exceeds weight sidecar");
      std::vector<double> v(cnt);
      for (std::size_t k = 0; k < cnt; ++k)
        v[k] = detail::from_le<double>(weights.data() + 8 * (off + k));
      return v;
    };
    for (const auto& j : doc.at("nodes")) {
      LayerNode n;
      n.id = j.at("id").get<std::string>();
      current = n.id;
      n.kind = parse_kind(j.at("kind").get<std::string>());
      n.inputs = j.at("inputs").get<std::vector<std::string>>();
      const json p = j.value("params", json::object());
      switch (n.kind) {
        case LayerKind::Conv: {
          n.filters = p.at("filters").get<std::size_t>();
          n.channels = p.value("channels", std::size_t{0});
          const auto k = p.at("kernel").get<std::vector<std::size_t>>();
          require(k.size() == 2, ErrorKind::Schema, "node '" + n.id + "': kernel must be [h,w]");
          n.kh = k[0];
          n.kw = k[1];
          n.stride = p.value("stride", std::size_t{1});
          n.pad = p.value("pad", std::size_t{0});
          break;
        }
        case LayerKind::Dense:
          n.filters = p.at("units").get<std::size_t>();
          n.channels = p.value("in_features", std::size_t{0});
          break;
        case LayerKind::MaxPool:
          n.pool = p.at("window").get<std::size_t>();
          n.stride = p.value("stride", n.pool);
          break;
        case LayerKind::Dropout:
          n.rate = p.at("rate").get<double>();
          break;
        default:
          break;
      }
      if (j.contains("blobs")) {
        require(n.has_params(), ErrorKind::Schema, "node '" + n.id + "': blobs on a parameter-free layer");
        const json& b = j.at("blobs");
        auto w = get_blob(b.at("weight"));
        auto bias = get_blob(b.at("bias"));
        require(n.filters > 0 && bias.size() == n.filters, ErrorKind::Schema,
                "node '" + n.id + "': bias blob length " + std::to_string(bias.size()) +
                    " != " + std::to_string(n.filters));
        if (n.channels == 0 && n.kind == LayerKind::Dense) n.channels = w.size() / n.filters;
        if (n.channels == 0 && n.kind == LayerKind::Conv && n.kh * n.kw > 0)
          n.channels = w.size() / (n.filters * n.kh * n.kw);
        require(w.size() == shape_size(n.weight_shape()), ErrorKind::Schema,
                "node '" + n.id + "': weight blob length " + std::to_string(w.size()) +
                    " != expected " + std::to_string(shape_size(n.weight_shape())));
        n.weight = Tensor(n.weight_shape(), std::move(w));
        n.bias = Tensor({n.filters}, std::move(bias));
        if (b.contains("frozen")) {
          const auto f = get_blob(b.at("frozen"));
          n.frozen.assign(f.size(), 0);
          for (std::size_t k = 0; k < f.size(); ++k) n.frozen[k] = f[k] != 0.0;
        }
      }
      g.nodes.push_back(std::move(n));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, "model: node '" + current + "': " + e.what());
  }
  g.validate();
  return g;
}

inline std::filesystem::path weights_path_for(const std::filesystem::path& model_path) {
  auto p = model_path;
  p.replace_extension(".bin");
  return p;
}

inline void save_model_file(const NetGraph& g, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto wpath = weights_path_for(path);
  const SerializedModel s = save_model(g, wpath.filename().string());
  std::ofstream(path) << s.text;
  if (!s.weights.empty()) {
    std::ofstream out(wpath, std::ios::binary);
    out.write(s.weights.data(), static_cast<std::streamsize>(s.weights.size()));
    require(out.good(), ErrorKind::Data, "cannot write " + wpath.string());
  }
}

inline NetGraph load_model_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Data, "cannot open model " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::string weights;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, path.string() + ": not valid JSON: " + e.what());
  }
  if (doc.contains("weights_file")) {
    const auto wpath = path.parent_path() / doc.at("weights_file").get<std::string>();
    const auto bytes = detail::read_file(wpath);
    weights.assign(bytes.begin(), bytes.end());
  }
  return load_model(text, weights);
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_MODEL_IO_HPP
