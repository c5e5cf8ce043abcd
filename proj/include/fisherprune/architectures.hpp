#ifndef FISHERPRUNE_ARCHITECTURES_HPP
#define FISHERPRUNE_ARCHITECTURES_HPP

// Reference graphs. VGG-16 and GoogLeNet are count-only (unmaterialized);
// the desk nets are small enough to train on one CPU core.

#include <string>
#include <vector>

#include "fisherprune/graph.hpp"

namespace fisherprune {

namespace detail {

inline std::string conv_relu(std::vector<LayerNode>& nodes, const std::string& id,
                             const std::string& in, std::size_t filters, std::size_t k,
                             std::size_t stride = 1, std::size_t pad = 0) {
  nodes.push_back(conv_node(id, in, filters, k, stride, pad));
  nodes.push_back(simple_node(id + "_relu", LayerKind::ReLU, {id}));
  return id + "_relu";
}

struct InceptionSpec {
  std::size_t b1, b2_reduce, b2, b3_reduce, b3, proj;  // proj == 0 drops the fourth branch
};

// 1x1 | 1x1->3x3 | 1x1->5x5 | (1x1 projection) joined by Concat.
inline std::string inception(std::vector<LayerNode>& nodes, const std::string& name,
                             const std::string& in, const InceptionSpec& s) {
  std::vector<std::string> outs;
  outs.push_back(conv_relu(nodes, name + "_1x1", in, s.b1, 1));
  const auto r3 = conv_relu(nodes, name + "_3x3_reduce", in, s.b2_reduce, 1);
  outs.push_back(conv_relu(nodes, name + "_3x3", r3, s.b2, 3, 1, 1));
  const auto r5 = conv_relu(nodes, name + "_5x5_reduce", in, s.b3_reduce, 1);
  outs.push_back(conv_relu(nodes, name + "_5x5", r5, s.b3, 5, 1, 2));
  if (s.proj > 0) outs.push_back(conv_relu(nodes, name + "_pool_proj", in, s.proj, 1));
  nodes.push_back(simple_node(name + "_concat", LayerKind::Concat, outs));
  return name + "_concat";
}

}  // namespace detail

/// VGG-16 (configuration D) at 3x224x224.
inline NetGraph vgg16(std::size_t classes = 1000) {
  NetGraph g;
  g.input = {3, 224, 224};
  g.classes = classes;
  auto& v = g.nodes;
  const std::vector<std::vector<std::size_t>> blocks = {
      {64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
  std::string x = kInputId;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t k = 0; k < blocks[b].size(); ++k)
      x = detail::conv_relu(v, "conv" + std::to_string(b + 1) + "_" + std::to_string(k + 1), x,
                            blocks[b][k], 3, 1, 1);
    v.push_back(pool_node("pool" + std::to_string(b + 1), x, 2, 2));
    x = "pool" + std::to_string(b + 1);
  }
  v.push_back(simple_node("flatten", LayerKind::Flatten, {x}));
  v.push_back(dense_node("fc6", "flatten", 4096));
  v.push_back(simple_node("fc6_relu", LayerKind::ReLU, {"fc6"}));
  v.push_back(dropout_node("drop6", "fc6_relu", 0.5));
  v.push_back(dense_node("fc7", "drop6", 4096));
  v.push_back(simple_node("fc7_relu", LayerKind::ReLU, {"fc7"}));
  v.push_back(dropout_node("drop7", "fc7_relu", 0.5));
  v.push_back(dense_node("fc8", "drop7", classes));
  v.push_back(simple_node("prob", LayerKind::Softmax, {"fc8"}));
  g.last_hidden = "fc7_relu";
  g.validate();
  return g;
}

/// GoogLeNet (Inception v1) at 3x224x224 without auxiliary heads. The
/// inception pool branch is reduced to its 1x1 projection and the stride-2
/// 3x3 pools to 2x2/2, which leaves parameter and multiply-add counts
/// unchanged; the final 7x7 average pool is modeled as a 7x7 max pool.
/// Default class count is the eight Adience age groups.
inline NetGraph googlenet(std::size_t classes = 8) {
  using detail::InceptionSpec;
  NetGraph g;
  g.input = {3, 224, 224};
  g.classes = classes;
  auto& v = g.nodes;
  std::string x = detail::conv_relu(v, "conv1_7x7", kInputId, 64, 7, 2, 3);
  v.push_back(pool_node("pool1", x, 2, 2));
  x = detail::conv_relu(v, "conv2_reduce", "pool1", 64, 1);
  x = detail::conv_relu(v, "conv2_3x3", x, 192, 3, 1, 1);
  v.push_back(pool_node("pool2", x, 2, 2));
  x = detail::inception(v, "inc3a", "pool2", InceptionSpec{64, 96, 128, 16, 32, 32});
  x = detail::inception(v, "inc3b", x, InceptionSpec{128, 128, 192, 32, 96, 64});
  v.push_back(pool_node("pool3", x, 2, 2));
  x = detail::inception(v, "inc4a", "pool3", InceptionSpec{192, 96, 208, 16, 48, 64});
  x = detail::inception(v, "inc4b", x, InceptionSpec{160, 112, 224, 24, 64, 64});
  x = detail::inception(v, "inc4c", x, InceptionSpec{128, 128, 256, 24, 64, 64});
  x = detail::inception(v, "inc4d", x, InceptionSpec{112, 144, 288, 32, 64, 64});
  x = detail::inception(v, "inc4e", x, InceptionSpec{256, 160, 320, 32, 128, 128});
  v.push_back(pool_node("pool4", x, 2, 2));
  x = detail::inception(v, "inc5a", "pool4", InceptionSpec{256, 160, 320, 32, 128, 128});
  x = detail::inception(v, "inc5b", x, InceptionSpec{384, 192, 384, 48, 128, 128});
  v.push_back(pool_node("pool5", x, 7, 7));
  v.push_back(dropout_node("drop5", "pool5", 0.4));
  v.push_back(dense_node("classifier", "drop5", classes));
  v.push_back(simple_node("prob", LayerKind::Softmax, {"classifier"}));
  g.last_hidden = "pool5";
  g.validate();
  return g;
}

/// Four 3x3 conv layers and two dense layers for side x side grayscale input.
inline NetGraph desk_cnn(std::size_t side = 16, std::size_t classes = 10) {
  NetGraph g;
  g.input = {1, side, side};
  g.classes = classes;
  auto& v = g.nodes;
  std::string x = detail::conv_relu(v, "conv1", kInputId, 8, 3, 1, 1);
  x = detail::conv_relu(v, "conv2", x, 16, 3, 1, 1);
  v.push_back(pool_node("pool1", x, 2, 2));
  x = detail::conv_relu(v, "conv3", "pool1", 16, 3, 1, 1);
  x = detail::conv_relu(v, "conv4", x, 32, 3, 1, 1);
  v.push_back(pool_node("pool2", x, 2, 2));
  v.push_back(simple_node("flatten", LayerKind::Flatten, {"pool2"}));
  v.push_back(dense_node("fc1", "flatten", 64));
  v.push_back(simple_node("fc1_relu", LayerKind::ReLU, {"fc1"}));
  v.push_back(dropout_node("drop1", "fc1_relu", 0.3));
  v.push_back(dense_node("fc2", "drop1", classes));
  v.push_back(simple_node("prob", LayerKind::Softmax, {"fc2"}));
  g.last_hidden = "fc1_relu";
  g.validate();
  return g;
}

/// Conv stem, one three-branch inception module, two dense layers.
inline NetGraph desk_modular(std::size_t side = 16, std::size_t classes = 10) {
  NetGraph g;
  g.input = {1, side, side};
  g.classes = classes;
  auto& v = g.nodes;
  std::string x = detail::conv_relu(v, "stem", kInputId, 12, 3, 1, 1);
  v.push_back(pool_node("pool1", x, 2, 2));
  x = detail::inception(v, "inc", "pool1", detail::InceptionSpec{8, 6, 12, 4, 8, 0});
  v.push_back(pool_node("pool2", x, 2, 2));
  v.push_back(simple_node("flatten", LayerKind::Flatten, {"pool2"}));
  v.push_back(dense_node("fc1", "flatten", 64));
  v.push_back(simple_node("fc1_relu", LayerKind::ReLU, {"fc1"}));
  v.push_back(dropout_node("drop1", "fc1_relu", 0.3));
  v.push_back(dense_node("fc2", "drop1", classes));
  v.push_back(simple_node("prob", LayerKind::Softmax, {"fc2"}));
  g.last_hidden = "fc1_relu";
  g.validate();
  return g;
}

inline NetGraph architecture_by_name(const std::string& name, std::size_t side = 16,
                                     std::size_t classes = 0) {
  if (name == "vgg16") return vgg16(classes ? classes : 1000);
  if (name == "googlenet") return googlenet(classes ? classes : 8);
  if (name == "desk-cnn") return desk_cnn(side, classes ? classes : 10);
  if (name == "desk-modular") return desk_modular(side, classes ? classes : 10);
  fail(ErrorKind::Usage, "unknown architecture '" + name +
                             "' (expected vgg16, googlenet, desk-cnn, desk-modular)");
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_ARCHITECTURES_HPP
