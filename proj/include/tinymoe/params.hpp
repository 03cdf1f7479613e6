#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tinymoe/errors.hpp"

namespace tinymoe {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// chi: vision stub, omega: adaptor, phi: LM backbone, phi_e: experts + routers.
enum class ParamGroup { Chi, Omega, Phi, PhiE };

inline constexpr std::array<ParamGroup, 4> kAllGroups = {ParamGroup::Chi, ParamGroup::Omega,
                                                         ParamGroup::Phi, ParamGroup::PhiE};

constexpr std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Chi: return "chi";
    case ParamGroup::Omega: return "omega";
    case ParamGroup::Phi: return "phi";
    case ParamGroup::PhiE: return "phi_e";
  }
  return "?";
}

inline ParamGroup parse_group(std::string_view s) {
  for (auto g : kAllGroups) {
    if (group_name(g) == s) {
      return g;
    }
  }
  throw Error(ErrorCode::InvalidConfig, "unknown parameter group '" + std::string(s) + "'");
}

using ParamId = std::size_t;

template <class T>
struct Param {
  std::string name;
  // 1-D tensors are stored as a single row.
  std::vector<std::size_t> shape;
  ParamGroup group = ParamGroup::Phi;
  Mat<T> value;
  Mat<T> grad;
  bool trainable = true;

  std::size_t numel() const { return static_cast<std::size_t>(value.size()); }
};

template <class T>
class ParamStore {
 public:
  ParamId add(std::string name, std::vector<std::size_t> shape, ParamGroup group) {
    check(!index_.contains(name), ErrorCode::InvalidConfig, "duplicate parameter " + name);
    const auto rows = shape.size() == 1 ? std::size_t{1} : shape.at(0);
    const auto cols = shape.size() == 1 ? shape.at(0) : shape.at(1);
    Param<T> p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.group = group;
    p.value = Mat<T>::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    p.grad = Mat<T>::Zero(p.value.rows(), p.value.cols());
    index_.emplace(p.name, params_.size());
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Param<T>& operator[](ParamId id) { return params_[id]; }
  const Param<T>& operator[](ParamId id) const { return params_[id]; }

  ParamId id_of(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), ErrorCode::InvalidConfig, "no parameter named " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      n += p.numel();
    }
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      p.grad.setZero();
    }
  }

  // Parameters outside `groups` stop accumulating weight gradients.
  template <class Range>
  void set_trainable_groups(const Range& groups) {
    for (auto& p : params_) {
      p.trainable = false;
      for (auto g : groups) {
        if (p.group == g) {
          p.trainable = true;
        }
      }
    }
  }

  void set_all_trainable(bool on) {
    for (auto& p : params_) {
      p.trainable = on;
    }
  }

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, ParamId, std::less<>> index_;
};

// Group name -> member parameter names.
struct ParamGroups {
  std::map<ParamGroup, std::vector<std::string>> members;
  std::map<ParamGroup, std::size_t> numel;

  std::size_t count(ParamGroup g) const {
    auto it = numel.find(g);
    return it == numel.end() ? 0 : it->second;
  }
  bool empty(ParamGroup g) const {
    auto it = members.find(g);
    return it == members.end() || it->second.empty();
  }
};

template <class T>
ParamGroups param_groups(const ParamStore<T>& store) {
  ParamGroups out;
  for (auto g : kAllGroups) {
    out.members[g];
    out.numel[g] = 0;
  }
  for (const auto& p : store) {
    out.members[p.group].push_back(p.name);
    out.numel[p.group] += p.numel();
  }
  return out;
}

}  // namespace tinymoe
