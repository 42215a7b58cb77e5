// Copyright 2026 xsa contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "xsa/autodiff.hpp"
#include "xsa/common.hpp"

namespace xsa {

/// Named dense parameter matrices in insertion order. Non-trainable entries
/// (batch-norm running stats) are serialized but skipped by the optimizer.
class ParamStore {
 public:
  Matrix& add(const std::string& name, Eigen::Index rows, Eigen::Index cols,
              bool trainable = true);
  Matrix& add(const std::string& name, Matrix init, bool trainable = true);
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  bool trainable(const std::string& name) const { return frozen_.count(name) == 0; }
  const std::vector<std::string>& names() const { return order_; }
  std::size_t n_scalars() const;

  /// Order- and content-sensitive fingerprint of every tensor.
  std::uint64_t checksum() const;

  bool all_finite() const;

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Matrix> tensors_;
  std::set<std::string> frozen_;
};

/// Creates tape leaves for parameters on demand and collects their gradients
/// after backward. One binding per tape.
class ParamBinding {
 public:
  ParamBinding(ag::Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}

  ag::Var operator[](const std::string& name);

  /// Gradients of every bound trainable parameter (zero if none flowed).
  std::map<std::string, Matrix> grads() const;

  ParamStore& store() { return *store_; }
  ag::Tape& tape() { return *tape_; }

 private:
  ag::Tape* tape_;
  ParamStore* store_;
  std::map<std::string, ag::Var> bound_;
};

/// Adaptive moment estimation with bias correction.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& params, const std::map<std::string, Matrix>& grads);
  void reset() {
    m_.clear();
    v_.clear();
    t_ = 0;
  }
  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::map<std::string, Matrix> m_, v_;
};

/// Versioned binary checkpoint: one container holds every named array plus a
/// free-form JSON config block (model configs, seed, flags).
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& config);

struct Checkpoint {
  ParamStore params;
  nlohmann::json config;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace xsa
