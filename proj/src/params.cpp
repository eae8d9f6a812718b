#include "xwin/params.hpp"

#include "xwin/error.hpp"

namespace xwin::nn {

void ParamStore::set(const std::string& name, Mat value) { tensors_[name] = std::move(value); }

const Mat& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InvalidArgument("unknown parameter: " + name);
  return it->second;
}

Mat& ParamStore::get_mut(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InvalidArgument("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, m] : tensors_) n += static_cast<std::size_t>(m.size());
  return n;
}

ParamStore ParamStore::subset(const std::vector<std::string>& prefixes) const {
  ParamStore out;
  for (const auto& [name, m] : tensors_) {
    for (const auto& p : prefixes) {
      if (name.rfind(p, 0) == 0) {
        out.set(name, m);
        break;
      }
    }
  }
  return out;
}

std::uint64_t ParamStore::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, m] : tensors_) {
    mix(name.data(), name.size());
    mix(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return h;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (const auto& [name, m] : tensors_) {
    auto it = other.tensors_.find(name);
    if (it == other.tensors_.end()) return false;
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) return false;
    if (it->second != m) return false;
  }
  return true;
}

Binding Binding::detached(const Binding& source) {
  Binding b(*source.store_, false);
  b.source_ = &source;
  return b;
}

ag::Var Binding::operator()(const std::string& name) const {
  auto it = vars_.find(name);
  if (it != vars_.end()) return it->second;
  ag::Var v = source_ ? ag::detach((*source_)(name))
              : trainable_ ? ag::leaf(store_->get(name))
                           : ag::constant(store_->get(name));
  vars_.emplace(name, v);
  return v;
}

std::map<std::string, Mat> Binding::gradients() const {
  std::map<std::string, Mat> out;
  for (const auto& [name, v] : vars_) {
    out[name] = v.has_grad() ? v.grad() : Mat::Zero(v.rows(), v.cols());
  }
  return out;
}

void Binding::zero_grad() {
  for (auto& [_, v] : vars_) v.zero_grad();
}

double grad_sq_norm(const std::map<std::string, Mat>& grads, const std::string& prefix) {
  double s = 0.0;
  for (const auto& [name, g] : grads) {
    if (name.rfind(prefix, 0) == 0) s += g.squaredNorm();
  }
  return s;
}

}  // namespace xwin::nn
