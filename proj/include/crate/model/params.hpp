#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "crate/numerics/autograd.hpp"
#include "crate/numerics/tensor.hpp"

namespace crate::model {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
  bool decay = false;  // weight decay applies to matrices only
};

/// Ordered, named parameter set. Order is the serialization and binding order.
template <class T>
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool decay);

  std::size_t size() const { return params_.size(); }
  NamedParam<T>& operator[](std::size_t i) { return params_[i]; }
  const NamedParam<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t index_of(std::string_view name) const;
  Tensor<T>& at(std::string_view name) { return params_[index_of(name)].value; }
  const Tensor<T>& at(std::string_view name) const { return params_[index_of(name)].value; }

  std::size_t numel() const;

  /// One tape leaf per parameter, in store order.
  std::vector<ag::Var> bind(ag::Tape<T>& tape, bool requires_grad) const;

  /// Concatenation of every parameter, in store order.
  Tensor<T> flatten() const;
  void assign_flat(std::span<const T> flat);

 private:
  std::vector<NamedParam<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace crate::model
