// Copyright 2026 The tapmicro Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Flat parameter storage with named matrix views. Keeping every learnable
// tensor in one contiguous buffer makes the optimizer, gradient clipping,
// checksums and finite-difference checks single loops over one array.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "tapmicro/core.hpp"

namespace tapmicro {

struct TensorEntry {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  std::size_t offset = 0;  // element offset into the flat buffer
  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

/// Handle to a registered tensor; cheap to copy, resolved against the store.
struct ParamId {
  std::size_t index = static_cast<std::size_t>(-1);
  bool valid() const { return index != static_cast<std::size_t>(-1); }
};

template <typename S>
class ParamStore {
 public:
  using Map = Eigen::Map<MatX<S>>;
  using ConstMap = Eigen::Map<const MatX<S>>;

  ParamId add(const std::string& name, Index rows, Index cols, bool decay = true) {
    require(by_name_.find(name) == by_name_.end(), "duplicate parameter: " + name);
    TensorEntry e;
    e.name = name;
    e.rows = rows;
    e.cols = cols;
    e.offset = data_.size();
    entries_.push_back(e);
    decay_.push_back(decay);
    by_name_[name] = entries_.size() - 1;
    data_.resize(data_.size() + e.size(), S(0));
    grad_.resize(data_.size(), S(0));
    return ParamId{entries_.size() - 1};
  }

  Map value(ParamId id) {
    const TensorEntry& e = entries_.at(id.index);
    return Map(data_.data() + e.offset, e.rows, e.cols);
  }
  ConstMap value(ParamId id) const {
    const TensorEntry& e = entries_.at(id.index);
    return ConstMap(data_.data() + e.offset, e.rows, e.cols);
  }
  Map grad(ParamId id) {
    const TensorEntry& e = entries_.at(id.index);
    return Map(grad_.data() + e.offset, e.rows, e.cols);
  }
  ConstMap grad(ParamId id) const {
    const TensorEntry& e = entries_.at(id.index);
    return ConstMap(grad_.data() + e.offset, e.rows, e.cols);
  }

  // Row-vector views for biases / gains registered as [1, n].
  Eigen::Map<RowVecX<S>> row(ParamId id) {
    const TensorEntry& e = entries_.at(id.index);
    require_shape(e.rows == 1, "row view on non-row tensor " + e.name);
    return Eigen::Map<RowVecX<S>>(data_.data() + e.offset, e.cols);
  }
  Eigen::Map<const RowVecX<S>> row(ParamId id) const {
    const TensorEntry& e = entries_.at(id.index);
    require_shape(e.rows == 1, "row view on non-row tensor " + e.name);
    return Eigen::Map<const RowVecX<S>>(data_.data() + e.offset, e.cols);
  }
  Eigen::Map<RowVecX<S>> row_grad(ParamId id) {
    const TensorEntry& e = entries_.at(id.index);
    return Eigen::Map<RowVecX<S>>(grad_.data() + e.offset, e.cols);
  }

  ParamId find(const std::string& name) const {
    auto it = by_name_.find(name);
    require(it != by_name_.end(), "unknown parameter: " + name);
    return ParamId{it->second};
  }

  const std::vector<TensorEntry>& entries() const { return entries_; }
  const TensorEntry& entry(ParamId id) const { return entries_.at(id.index); }
  bool decays(std::size_t entry_index) const { return decay_.at(entry_index); }

  std::size_t size() const { return data_.size(); }
  std::vector<S>& flat() { return data_; }
  const std::vector<S>& flat() const { return data_; }
  std::vector<S>& flat_grad() { return grad_; }
  const std::vector<S>& flat_grad() const { return grad_; }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), S(0)); }

  std::uint64_t checksum(std::size_t entry_index) const {
    const TensorEntry& e = entries_[entry_index];
    return fnv1a64(data_.data() + e.offset, e.size() * sizeof(S));
  }

 private:
  std::vector<S> data_;
  std::vector<S> grad_;
  std::vector<TensorEntry> entries_;
  std::vector<bool> decay_;  // participates in weight decay
  std::map<std::string, std::size_t> by_name_;
};

}  // namespace tapmicro
