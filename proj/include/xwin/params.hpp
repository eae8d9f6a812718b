#pragma once

#include "xwin/autograd.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace xwin::nn {

using ag::Mat;

/// Named tensors, iterated in lexicographic name order.
class ParamStore {
 public:
  void set(const std::string& name, Mat value);
  const Mat& get(const std::string& name) const;
  Mat& get_mut(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t size() const { return tensors_.size(); }
  std::size_t parameter_count() const;

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  /// Sub-store of all tensors whose name starts with one of the prefixes.
  ParamStore subset(const std::vector<std::string>& prefixes) const;

  /// FNV-1a over names and raw values; detects any mutation.
  std::uint64_t fingerprint() const;

  bool operator==(const ParamStore& other) const;

 private:
  std::map<std::string, Mat> tensors_;
};

/// Lazily wraps parameters as graph leaves (trainable) or constants (frozen).
class Binding {
 public:
  Binding(const ParamStore& store, bool trainable) : store_(&store), trainable_(trainable) {}

  /// View that returns detached copies of `source`'s variables: same values,
  /// no gradient reaches `source` through it.
  static Binding detached(const Binding& source);

  ag::Var operator()(const std::string& name) const;
  bool trainable() const { return trainable_; }
  const ParamStore& store() const { return *store_; }

  /// Gradients of every parameter bound so far (zero matrices for bound
  /// parameters that received no gradient).
  std::map<std::string, Mat> gradients() const;
  const std::map<std::string, ag::Var>& bound() const { return vars_; }
  void zero_grad();

 private:
  const ParamStore* store_;
  bool trainable_;
  const Binding* source_ = nullptr;
  mutable std::map<std::string, ag::Var> vars_;
};

/// Sum of squares of all gradient entries whose name starts with `prefix`.
double grad_sq_norm(const std::map<std::string, Mat>& grads, const std::string& prefix = "");

}  // namespace xwin::nn
