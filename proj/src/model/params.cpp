#include "crate/model/params.hpp"

#include <algorithm>

namespace crate::model {

template <class T>
std::size_t ParamStore<T>::add(std::string name, Tensor<T> value, bool decay) {
  require(!index_.count(name), "duplicate_param", "parameter '" + name + "' registered twice");
  index_.emplace(name, params_.size());
  params_.push_back(NamedParam<T>{std::move(name), std::move(value), decay});
  return params_.size() - 1;
}

template <class T>
std::size_t ParamStore<T>::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  require(it != index_.end(), "unknown_param", "no parameter named '" + std::string(name) + "'");
  return it->second;
}

template <class T>
std::size_t ParamStore<T>::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <class T>
std::vector<ag::Var> ParamStore<T>::bind(ag::Tape<T>& tape, bool requires_grad) const {
  std::vector<ag::Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.leaf(Mat<T>(p.value.matrix()), requires_grad));
  return vars;
}

template <class T>
Tensor<T> ParamStore<T>::flatten() const {
  std::vector<T> flat;
  flat.reserve(numel());
  for (const auto& p : params_) flat.insert(flat.end(), p.value.values.begin(), p.value.values.end());
  const std::size_t n = flat.size();
  return Tensor<T>({n}, std::move(flat));
}

template <class T>
void ParamStore<T>::assign_flat(std::span<const T> flat) {
  require(flat.size() == numel(), "bad_shape", "flat parameter vector has the wrong length");
  std::size_t offset = 0;
  for (auto& p : params_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), p.value.numel(),
                p.value.values.begin());
    offset += p.value.numel();
  }
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace crate::model
