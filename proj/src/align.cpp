// Copyright 2026 xsa contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "xsa/align.hpp"

#include <Eigen/Eigenvalues>

#include <fstream>

#include "json.hpp"

namespace xsa {

Matrix mean_covariance(const std::vector<Matrix>& trials) {
  require(!trials.empty(), "mean_covariance: empty trial list");
  const Eigen::Index c = trials.front().rows();
  Matrix acc = Matrix::Zero(c, c);
  for (const Matrix& x : trials) {
    require(x.rows() == c, "mean_covariance: inconsistent channel count");
    require(x.allFinite(), "mean_covariance: non-finite trial");
    acc.noalias() += x * x.transpose();
  }
  acc /= static_cast<double>(trials.size());
  // symmetrize exactly; x*x^T is symmetric only up to rounding
  return 0.5 * (acc + acc.transpose());
}

double default_eps_floor(const Matrix& cov) {
  return 1e-8 * cov.trace() / static_cast<double>(cov.rows());
}

Matrix inverse_sqrt(const Matrix& cov, double eps_floor) {
  require(cov.rows() == cov.cols(), "inverse_sqrt: matrix must be square");
  const double asym = (cov - cov.transpose()).cwiseAbs().maxCoeff();
  require(asym <= 1e-8 * std::max(1.0, cov.cwiseAbs().maxCoeff()),
          "inverse_sqrt: input not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  require(es.info() == Eigen::Success, "inverse_sqrt: eigendecomposition failed");
  Vector lam = es.eigenvalues().cwiseMax(eps_floor);
  require((lam.array() > 0.0).all(), "inverse_sqrt: non-positive eigenvalue after flooring");
  const Vector inv = lam.array().rsqrt();
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

std::pair<std::vector<Matrix>, WhiteningState> euclidean_align(
    const std::vector<Matrix>& trials) {
  WhiteningState st;
  st.mean_cov = mean_covariance(trials);
  st.eps_floor = default_eps_floor(st.mean_cov);
  st.inv_sqrt = inverse_sqrt(st.mean_cov, st.eps_floor);
  std::vector<Matrix> aligned;
  aligned.reserve(trials.size());
  for (const Matrix& x : trials) aligned.push_back(st.inv_sqrt * x);
  return {std::move(aligned), std::move(st)};
}

std::map<std::string, WhiteningState> euclidean_align_per_subject(TrialSet& trials) {
  std::map<std::string, WhiteningState> states;
  for (const auto& [subject, idx] : trials.indices_by_subject()) {
    std::vector<Matrix> xs;
    xs.reserve(idx.size());
    for (std::size_t i : idx) xs.push_back(trials.data[i]);
    auto [aligned, st] = euclidean_align(xs);
    for (std::size_t k = 0; k < idx.size(); ++k) trials.data[idx[k]] = std::move(aligned[k]);
    states.emplace(subject, std::move(st));
  }
  return states;
}

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  require(rows > 0, "matrix_from_json: empty matrix");
  const auto cols = static_cast<Eigen::Index>(j.at(0).size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

}  // namespace

void save_whitening(const std::string& path,
                    const std::map<std::string, WhiteningState>& states) {
  nlohmann::json j;
  for (const auto& [subject, st] : states) {
    j[subject] = {{"mean_cov", matrix_to_json(st.mean_cov)},
                  {"inv_sqrt", matrix_to_json(st.inv_sqrt)},
                  {"eps_floor", st.eps_floor}};
  }
  std::ofstream f(path);
  require(f.good(), "save_whitening: cannot open " + path);
  f << j.dump(2) << "\n";
}

std::map<std::string, WhiteningState> load_whitening(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "load_whitening: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  std::map<std::string, WhiteningState> states;
  for (auto it = j.begin(); it != j.end(); ++it) {
    WhiteningState st;
    st.mean_cov = matrix_from_json(it.value().at("mean_cov"));
    st.inv_sqrt = matrix_from_json(it.value().at("inv_sqrt"));
    st.eps_floor = it.value().at("eps_floor").get<double>();
    states.emplace(it.key(), std::move(st));
  }
  return states;
}

}  // namespace xsa
