#ifndef VOLMIL_PARAMETERS_HPP_
#define VOLMIL_PARAMETERS_HPP_

#include "volmil/rng.hpp"
#include "volmil/tensor.hpp"

#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace volmil {

/// A trainable tensor. `grad` always matches `value` in shape.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Non-trainable state carried with a model (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

/// Insertion-ordered collection of named parameters and buffers.
///
/// Iteration order is registration order, which makes checkpoints and
/// optimizer buffers deterministic.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(value.shape());
    p->value = std::move(value);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Buffer<T>& add_buffer(const std::string& name, Tensor<T> value) {
    if (buffer_index_.count(name)) throw std::invalid_argument("duplicate buffer name: " + name);
    auto b = std::make_unique<Buffer<T>>();
    b->name = name;
    b->value = std::move(value);
    buffer_index_[name] = buffers_.size();
    buffers_.push_back(std::move(b));
    return *buffers_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  bool contains_buffer(const std::string& name) const { return buffer_index_.count(name) > 0; }

  Parameter<T>& at(const std::string& name) { return *params_.at(lookup(index_, name)); }
  const Parameter<T>& at(const std::string& name) const { return *params_.at(lookup(index_, name)); }
  Buffer<T>& buffer(const std::string& name) { return *buffers_.at(lookup(buffer_index_, name)); }
  const Buffer<T>& buffer(const std::string& name) const {
    return *buffers_.at(lookup(buffer_index_, name));
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<Buffer<T>*> buffers() {
    std::vector<Buffer<T>*> out;
    for (auto& b : buffers_) out.push_back(b.get());
    return out;
  }
  std::vector<const Buffer<T>*> buffers() const {
    std::vector<const Buffer<T>*> out;
    for (auto& b : buffers_) out.push_back(b.get());
    return out;
  }

  /// Total number of parameter scalars (trainable or frozen).
  Index scalar_count() const {
    Index n = 0;
    for (auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T(0));
  }

  /// Sets the trainable flag on every parameter whose name starts with prefix.
  void set_trainable(std::string_view prefix, bool trainable) {
    for (auto& p : params_)
      if (std::string_view(p->name).substr(0, prefix.size()) == prefix) p->trainable = trainable;
  }

 private:
  static std::size_t lookup(const std::map<std::string, std::size_t>& idx, const std::string& name) {
    auto it = idx.find(name);
    if (it == idx.end()) throw std::out_of_range("unknown parameter or buffer: " + name);
    return it->second;
  }

  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::vector<std::unique_ptr<Buffer<T>>> buffers_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::size_t> buffer_index_;
};

/// Weight initializers. All draw from the given stream in row-major order.
namespace init {

template <typename T>
Tensor<T> normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
Tensor<T> uniform(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// He-normal for a convolution kernel of shape O x I x k...
template <typename T>
Tensor<T> kaiming(Shape shape, Rng& rng) {
  Index fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  return normal<T>(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

}  // namespace init

}  // namespace volmil

#endif  // VOLMIL_PARAMETERS_HPP_
