// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>

#include "glip/autodiff.hpp"

namespace glip {

/// Named dense parameter arrays. std::map keeps iteration order stable, which
/// the checkpoint format and the parameter hash rely on.
template <typename Scalar>
using ParameterSet = std::map<std::string, ad::Matrix<Scalar>>;

template <typename To, typename From>
ParameterSet<To> cast_parameters(const ParameterSet<From>& params) {
  ParameterSet<To> out;
  for (const auto& [name, m] : params) out.emplace(name, m.template cast<To>());
  return out;
}

template <typename Scalar>
ParameterSet<Scalar> zeros_like(const ParameterSet<Scalar>& params) {
  ParameterSet<Scalar> out;
  for (const auto& [name, m] : params) out.emplace(name, ad::Matrix<Scalar>::Zero(m.rows(), m.cols()));
  return out;
}

template <typename Scalar>
std::size_t parameter_count(const ParameterSet<Scalar>& params) {
  std::size_t n = 0;
  for (const auto& [name, m] : params) n += static_cast<std::size_t>(m.size());
  return n;
}

/// Predicate deciding which parameters receive gradients.
using TrainablePredicate = std::function<bool(std::string_view)>;

inline TrainablePredicate all_trainable() {
  return [](std::string_view) { return true; };
}
inline TrainablePredicate none_trainable() {
  return [](std::string_view) { return false; };
}

/// Places parameters on a tape on first use and collects their gradients.
template <typename Scalar>
class Binding {
 public:
  Binding(const ParameterSet<Scalar>& params, ad::Tape<Scalar>& tape,
          TrainablePredicate trainable = none_trainable())
      : params_(params), tape_(tape), trainable_(std::move(trainable)) {}

  ad::Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto p = params_.find(name);
    if (p == params_.end()) throw Error(ErrorCode::InvalidArgument, "unknown parameter: " + name);
    const ad::Var v = tape_.leaf(p->second, trainable_(name));
    bound_.emplace(name, v);
    return v;
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  ad::Tape<Scalar>& tape() { return tape_; }

  /// Adds d(root)/d(param) for every bound trainable parameter into `grads`.
  void accumulate(ParameterSet<Scalar>& grads) {
    for (const auto& [name, v] : bound_) {
      if (!tape_.requires_grad(v)) continue;
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, tape_.grad(v));
      } else {
        it->second += tape_.grad(v);
      }
    }
  }

 private:
  const ParameterSet<Scalar>& params_;
  ad::Tape<Scalar>& tape_;
  TrainablePredicate trainable_;
  std::map<std::string, ad::Var> bound_;
};

}  // namespace glip
