#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flatland/tensor.hpp"

namespace flatland {

/// One residual-join draw: the gate bit and the forward/backward mixing
/// coefficients. gamma stays NaN until the backward pass actually samples it.
struct ShakeDropSample {
  int beta = 1;
  double alpha = 1.0;
  double gamma = std::numeric_limits<double>::quiet_NaN();
};

enum class OpKind {
  kLeaf,
  kConstant,
  kDense,
  kConv2d,
  kBatchNorm2d,
  kRelu,
  kGlobalAvgPool,
  kAvgPool2x2,
  kPadChannels,
  kAdd,
  kScalarMul,
  kSoftmax,
  kLogSoftmax,
  kShakeDropJoin,
  kSoftCrossEntropy,
  kKlDivergence,
  kSumAll,
};

/// Named trainable tensor. Gradients accumulate in double regardless of the
/// value scalar type, so long reductions do not lose low-order bits.
template <typename T>
struct ParameterT {
  std::string id;
  TensorT<T> value;
  std::vector<double> grad;

  ParameterT() = default;
  ParameterT(std::string id_, TensorT<T> v) : id(std::move(id_)), value(std::move(v)) {
    grad.assign(static_cast<std::size_t>(value.numel()), 0.0);
  }

  void zero_grad() { grad.assign(grad.size(), 0.0); }
};

using Parameter = ParameterT<float>;

/// Record-and-replay reverse-mode tape. Ops append nodes during the forward
/// pass; backward() walks the recorded graph once in reverse order.
template <typename T>
class TapeT {
 public:
  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<int> inputs;
    TensorT<T> out;
    std::vector<double> grad;
    std::function<void(TapeT&, int)> backward;
    ParameterT<T>* param = nullptr;
    std::shared_ptr<std::vector<ShakeDropSample>> join_record;
  };

  int push(Node n) {
    for (int in : n.inputs) check_id(in, "op input");
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  /// Parameter entry point. The node aliases the parameter's current value;
  /// backward adds this node's gradient into the parameter's accumulator.
  int leaf(ParameterT<T>& p) {
    Node n;
    n.kind = OpKind::kLeaf;
    n.out = p.value;
    n.param = &p;
    n.backward = [](TapeT& t, int id) {
      Node& self = t.node(id);
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.param->grad[i] += self.grad[i];
    };
    return push(std::move(n));
  }

  /// Non-trainable input (data batches, targets).
  int constant(TensorT<T> v) {
    Node n;
    n.kind = OpKind::kConstant;
    n.out = std::move(v);
    return push(std::move(n));
  }

  const TensorT<T>& value(int id) const { return node(id).out; }

  const std::vector<double>& grad(int id) const {
    const Node& n = node(id);
    if (n.grad.empty() && n.out.numel() > 0) {
      throw std::runtime_error("gradient not populated for node " + std::to_string(id) +
                               "; run backward() over a graph that reaches it");
    }
    return n.grad;
  }

  Node& node(int id) {
    check_id(id, "node id");
    return nodes_[static_cast<std::size_t>(id)];
  }
  const Node& node(int id) const {
    check_id(id, "node id");
    return nodes_[static_cast<std::size_t>(id)];
  }

  int size() const { return static_cast<int>(nodes_.size()); }
  bool empty() const { return nodes_.empty(); }

  /// Reverse sweep from a scalar root. Node gradients are reset on every
  /// call while parameter accumulators are not, so two consecutive calls
  /// deliver twice the parameter gradient.
  void backward(int root) {
    if (nodes_.empty()) throw std::runtime_error("backward() on an empty tape");
    check_id(root, "backward root");
    if (node(root).out.numel() != 1) {
      throw std::invalid_argument("backward() root must be a scalar, got shape " +
                                  shape_str(node(root).out.shape));
    }

    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<int> stack{root};
    reachable[static_cast<std::size_t>(root)] = 1;
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      for (int in : nodes_[static_cast<std::size_t>(id)].inputs) {
        if (!reachable[static_cast<std::size_t>(in)]) {
          reachable[static_cast<std::size_t>(in)] = 1;
          stack.push_back(in);
        }
      }
    }

    for (int id = 0; id < size(); ++id) {
      if (!reachable[static_cast<std::size_t>(id)]) continue;
      Node& n = nodes_[static_cast<std::size_t>(id)];
      n.grad.assign(static_cast<std::size_t>(n.out.numel()), 0.0);
    }
    nodes_[static_cast<std::size_t>(root)].grad[0] = 1.0;

    for (int id = root; id >= 0; --id) {
      if (!reachable[static_cast<std::size_t>(id)]) continue;
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward) n.backward(*this, id);
    }
  }

 private:
  void check_id(int id, const char* what) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
      throw std::out_of_range(std::string(what) + " " + std::to_string(id) +
                              " not on tape (size " + std::to_string(nodes_.size()) + ")");
    }
  }

  std::vector<Node> nodes_;
};

using Tape = TapeT<float>;

}  // namespace flatland
