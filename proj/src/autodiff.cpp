#include "cmfd/autodiff.hpp"

#include <numeric>
#include <sstream>

namespace cmfd {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

template <class T>
Parameter<T>* ParamStore<T>::add(std::string name, Tensor<T> value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_[name] = params_.size();
  auto p = std::make_unique<Parameter<T>>();
  p->name = std::move(name);
  p->value = std::move(value);
  params_.push_back(std::move(p));
  return params_.back().get();
}

template <class T>
Parameter<T>* ParamStore<T>::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

template <class T>
const Parameter<T>* ParamStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

template <class T>
std::vector<Parameter<T>*> ParamStore<T>::all() {
  std::vector<Parameter<T>*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <class T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <class T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node node;
  node.op = "constant";
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Var<T> Graph<T>::param(Parameter<T>& p) {
  Node node;
  node.op = "param";
  node.value = p.value;
  node.param = &p;
  node.requires_grad = record_grad_;
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Var<T> Graph<T>::record(const char* op, Tensor<T> value, std::vector<int> inputs,
                        BackwardFn backward) {
  Node node;
  node.op = op;
  node.value = std::move(value);
  bool needs = false;
  if (record_grad_) {
    for (int id : inputs) needs = needs || nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  node.requires_grad = needs;
  if (needs) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Tensor<T>& Graph<T>::grad(int id) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.grad.empty()) node.grad = Tensor<T>::zeros_like(node.value);
  return node.grad;
}

template <class T>
std::map<std::string, Tensor<T>> Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw std::invalid_argument("loss belongs to a different graph");
  if (value(loss.id).size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(value(loss.id).shape()));
  }
  grad(loss.id).fill(T(1));
  for (int i = loss.id; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, node.grad);
  }
  std::map<std::string, Tensor<T>> out;
  for (Node& node : nodes_) {
    if (!node.param) continue;
    Parameter<T>& p = *node.param;
    if (p.grad.empty() || p.grad.shape() != p.value.shape()) p.zero_grad();
    if (!node.grad.empty()) {
      auto dst = p.grad.data();
      auto src = node.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    out[p.name] = p.grad;
  }
  return out;
}

template <class T>
std::string Graph<T>::first_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].value.all_finite()) {
      return "#" + std::to_string(i) + " " + nodes_[i].op + " " + to_string(nodes_[i].value.shape());
    }
  }
  return {};
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace cmfd
