#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "harfuse/errors.hpp"

namespace harfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense float32 array with a gradient slot. Row-major.
struct TensorValue {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty, or same length as data
  bool requires_grad = false;

  TensorValue() = default;
  TensorValue(Shape s, std::vector<float> d, bool rg = false)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static TensorValue zeros(Shape s, bool rg = false) {
    std::vector<float> d(numel(s), 0.0f);
    return TensorValue(std::move(s), std::move(d), rg);
  }

  static TensorValue scalar(float v, bool rg = false) {
    return TensorValue({1}, {v}, rg);
  }

  std::size_t size() const { return data.size(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }

  void zero_grad() { grad.assign(data.size(), 0.0f); }
};

// Handle into a Tape.
struct Var {
  std::size_t idx = static_cast<std::size_t>(-1);
  bool valid() const { return idx != static_cast<std::size_t>(-1); }
};

// Record of one forward pass. Nodes are appended in evaluation order, so the
// tape is topologically ordered by construction; backward replays it once in
// reverse. Single-threaded per tape.
class Tape {
 public:
  using BackFn = std::function<void(Tape&)>;

  // Hash of every branch taken by a piecewise-defined op (ReLU sign, clamp
  // saturation) during the forward pass. Two evaluations with the same inputs
  // modulo a perturbation that flips no branch produce the same signature;
  // gradient checkers use this to recognize perturbations that cross a kink,
  // where a finite difference is not a valid derivative estimate.
  std::uint64_t kink_signature = 0xcbf29ce484222325ULL;
  void fold_kink(bool branch) {
    kink_signature =
        (kink_signature ^ (branch ? 0x9e3779b97f4a7c15ULL : 0x2545f4914f6cdd1dULL)) *
        1099511628211ULL;
  }

  Var push(Shape shape, std::vector<float> data, BackFn back = {}) {
    if (numel(shape) != data.size())
      throw ShapeError("node data length does not match shape " +
                       shape_str(shape));
    nodes_.push_back(Node{std::move(shape), std::move(data), {},
                          std::move(back), nullptr});
    return Var{nodes_.size() - 1};
  }

  Var leaf(Shape shape, std::vector<float> data) {
    return push(std::move(shape), std::move(data));
  }

  Var leaf(const TensorValue& t) { return push(t.shape, t.data); }

  // Leases a parameter onto the tape; backward() accumulates into p.grad.
  Var param(TensorValue& p) {
    Var v = push(p.shape, p.data);
    nodes_[v.idx].external = &p;
    p.ensure_grad();
    return v;
  }

  const Shape& shape(Var v) const { return node(v).shape; }
  const std::vector<float>& data(Var v) const { return node(v).data; }
  std::vector<float>& grad(Var v) { return node(v).grad; }

  float scalar(Var v) const {
    const Node& n = node(v);
    if (n.data.size() != 1)
      throw ContractError("scalar() on tensor of shape " + shape_str(n.shape));
    return n.data[0];
  }

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from `loss`. Node gradients accumulate additively; leased
  // parameters receive their gradient on top of whatever p.grad already
  // holds (callers zero grads between steps).
  void backward(Var loss) {
    if (nodes_.empty()) throw ContractError("backward() on empty tape");
    const Node& ln = node(loss);
    if (ln.data.size() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(ln.shape));
    for (Node& n : nodes_) n.grad.assign(n.data.size(), 0.0f);
    nodes_[loss.idx].grad[0] = 1.0f;
    for (std::size_t i = loss.idx + 1; i-- > 0;) {
      if (nodes_[i].back) nodes_[i].back(*this);
    }
    for (Node& n : nodes_) {
      if (n.external) {
        n.external->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          n.external->grad[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    BackFn back;
    TensorValue* external;
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.idx >= nodes_.size())
      throw ContractError("invalid tape handle");
    return nodes_[v.idx];
  }
  Node& node(Var v) {
    if (!v.valid() || v.idx >= nodes_.size())
      throw ContractError("invalid tape handle");
    return nodes_[v.idx];
  }

  std::vector<Node> nodes_;
};

// Named trainable tensors. std::map keeps iteration order stable, which makes
// optimizer sweeps and checkpoints deterministic.
struct ParamSet {
  std::map<std::string, TensorValue> entries;

  TensorValue& at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  const TensorValue& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end())
      throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  TensorValue& add(const std::string& name, TensorValue t) {
    t.requires_grad = true;
    auto [it, fresh] = entries.emplace(name, std::move(t));
    if (!fresh) throw ContractError("duplicate parameter '" + name + "'");
    return it->second;
  }

  void zero_grad() {
    for (auto& [name, t] : entries) t.zero_grad();
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries) n += t.size();
    return n;
  }
};

}  // namespace harfuse
