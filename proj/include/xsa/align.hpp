// Copyright 2026 xsa contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <vector>

#include "xsa/common.hpp"
#include "xsa/trial_set.hpp"

namespace xsa {

/// Per-subject whitening state: mean trial covariance and its inverse square
/// root. eps_floor is the eigenvalue floor actually used.
struct WhiteningState {
  Matrix mean_cov;
  Matrix inv_sqrt;
  double eps_floor = 0.0;
};

/// (1/N) sum_n X_n X_n^T over a subject's trials. Symmetric by construction.
Matrix mean_covariance(const std::vector<Matrix>& trials);

/// Inverse matrix square root via symmetric eigendecomposition, with
/// eigenvalues floored at eps_floor. Input must be symmetric within 1e-8.
Matrix inverse_sqrt(const Matrix& cov, double eps_floor);

/// Scale-relative eigenvalue floor: 1e-8 * trace(cov) / C.
double default_eps_floor(const Matrix& cov);

/// Whiten one subject's trials so their mean covariance becomes the identity.
/// All trials must share a shape and belong to the same subject.
std::pair<std::vector<Matrix>, WhiteningState> euclidean_align(
    const std::vector<Matrix>& trials);

/// Applies euclidean_align independently per subject, in place. Trials with
/// the same subject id share one whitening state. Returns states keyed by
/// subject id.
std::map<std::string, WhiteningState> euclidean_align_per_subject(TrialSet& trials);

void save_whitening(const std::string& path,
                    const std::map<std::string, WhiteningState>& states);
std::map<std::string, WhiteningState> load_whitening(const std::string& path);

}  // namespace xsa
