#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cmfd/tensor.hpp"

namespace cmfd {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // empty until a backward pass touches it

  void zero_grad() { grad = Tensor<T>::zeros_like(value); }
};

// Owns every learnable tensor of a model; addresses stay stable for the
// lifetime of the store so blocks can hold raw Parameter pointers.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<T>* add(std::string name, Tensor<T> value);
  Parameter<T>* find(const std::string& name);
  const Parameter<T>* find(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::vector<Parameter<T>*> all();
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
class Graph;

// Handle to a value recorded in a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }
  bool valid() const { return graph != nullptr && id >= 0; }
};

// Tape of recorded operations. Nodes are appended in execution order, so the
// record is topologically sorted by construction and backward is a reverse
// sweep. One graph per forward/backward step; not thread-safe.
template <class T>
class Graph {
 public:
  // Called with the upstream gradient of the node's output. Implementations
  // accumulate into their inputs through Graph::grad().
  using BackwardFn = std::function<void(Graph&, const Tensor<T>&)>;

  explicit Graph(bool record_grad = true) : record_grad_(record_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> param(Parameter<T>& p);

  Var<T> record(const char* op, Tensor<T> value, std::vector<int> inputs, BackwardFn backward);

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool recording() const { return record_grad_; }

  // Gradient buffer of a node, zero-initialised on first access.
  Tensor<T>& grad(int id);

  // Reverse sweep from a scalar loss. Writes Parameter::grad (accumulating)
  // for every parameter registered in this graph and returns them by name;
  // parameters the loss does not reach receive zeros.
  std::map<std::string, Tensor<T>> backward(Var<T> loss);

  // First node whose value contains NaN/Inf, as "#id op shape", or empty.
  std::string first_non_finite() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  bool record_grad_;
  std::deque<Node> nodes_;  // deque: references to values stay valid while recording
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(id);
}

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace cmfd
