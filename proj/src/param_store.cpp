// Copyright 2026 xsa contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "xsa/param_store.hpp"

#include <cstring>
#include <fstream>

namespace xsa {

namespace {
constexpr char kMagic[8] = {'X', 'S', 'A', 'C', 'K', 'P', 'T', '\x01'};
}

Matrix& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                        bool trainable) {
  return add(name, Matrix::Zero(rows, cols), trainable);
}

Matrix& ParamStore::add(const std::string& name, Matrix init, bool trainable) {
  require(!has(name), "ParamStore: duplicate parameter " + name);
  order_.push_back(name);
  if (!trainable) frozen_.insert(name);
  return tensors_.emplace(name, std::move(init)).first->second;
}

Matrix& ParamStore::at(const std::string& name) {
  auto it = tensors_.find(name);
  require(it != tensors_.end(), "ParamStore: unknown parameter " + name);
  return it->second;
}

const Matrix& ParamStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  require(it != tensors_.end(), "ParamStore: unknown parameter " + name);
  return it->second;
}

std::size_t ParamStore::n_scalars() const {
  std::size_t n = 0;
  for (const auto& name : order_) n += static_cast<std::size_t>(at(name).size());
  return n;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& name : order_) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(at(name), h);
  }
  return h;
}

bool ParamStore::all_finite() const {
  for (const auto& name : order_)
    if (!at(name).allFinite()) return false;
  return true;
}

ag::Var ParamBinding::operator[](const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ag::Var v = tape_->leaf(store_->at(name), store_->trainable(name));
  bound_.emplace(name, v);
  return v;
}

std::map<std::string, Matrix> ParamBinding::grads() const {
  std::map<std::string, Matrix> out;
  for (const auto& [name, var] : bound_) {
    if (store_->trainable(name)) out.emplace(name, tape_->grad(var));
  }
  return out;
}

void Adam::step(ParamStore& params, const std::map<std::string, Matrix>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (const auto& [name, g] : grads) {
    if (!params.trainable(name)) continue;
    Matrix& p = params.at(name);
    auto mi = m_.find(name);
    if (mi == m_.end()) {
      mi = m_.emplace(name, Matrix::Zero(p.rows(), p.cols())).first;
      v_.emplace(name, Matrix::Zero(p.rows(), p.cols()));
    }
    Matrix& m = mi->second;
    Matrix& v = v_.at(name);
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    p.array() -= lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
  }
}

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& config) {
  nlohmann::json header;
  header["version"] = 1;
  header["config"] = config;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& name : params.names()) {
    const Matrix& m = params.at(name);
    arrays.push_back({{"name", name},
                      {"rows", m.rows()},
                      {"cols", m.cols()},
                      {"trainable", params.trainable(name)}});
  }
  header["arrays"] = arrays;
  const std::string js = header.dump();

  std::ofstream f(path, std::ios::binary);
  require(f.good(), "save_checkpoint: cannot open " + path);
  f.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = js.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const auto& name : params.names()) {
    const Matrix& m = params.at(name);
    f.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  require(f.good(), "save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  require(f.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
          "load_checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string js(len, '\0');
  f.read(js.data(), static_cast<std::streamsize>(len));
  require(f.good(), "load_checkpoint: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(js);
  require(header.at("version").get<int>() == 1, "load_checkpoint: unsupported version");

  Checkpoint ck;
  ck.config = header.at("config");
  for (const auto& a : header.at("arrays")) {
    const auto name = a.at("name").get<std::string>();
    const auto rows = a.at("rows").get<Eigen::Index>();
    const auto cols = a.at("cols").get<Eigen::Index>();
    Matrix m(rows, cols);
    f.read(reinterpret_cast<char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double) * m.size()));
    require(f.good(), "load_checkpoint: truncated array " + name);
    ck.params.add(name, std::move(m), a.at("trainable").get<bool>());
  }
  return ck;
}

}  // namespace xsa
