// Copyright 2026 xsa contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "xsa/common.hpp"

namespace xsa {

enum class Species { canine, human };
enum class Modality { intracranial, scalp };

std::string to_string(Species s);
std::string to_string(Modality m);
Species species_from_string(const std::string& s);
Modality modality_from_string(const std::string& s);

/// Records label reads while "armed" with a protected index set. The harness
/// arms the audit with the test indices for the duration of training; any
/// read of a protected label is a protocol violation.
class LabelAudit {
 public:
  void arm(std::set<std::size_t> protected_indices) {
    protected_ = std::move(protected_indices);
    armed_ = true;
  }
  void disarm() {
    armed_ = false;
    protected_.clear();
  }
  void record(std::size_t i) const {
    ++total_reads_;
    if (armed_ && protected_.count(i)) ++violations_;
  }
  std::uint64_t violations() const { return violations_; }
  std::uint64_t total_reads() const { return total_reads_; }
  bool armed() const { return armed_; }

 private:
  bool armed_ = false;
  std::set<std::size_t> protected_;
  mutable std::uint64_t violations_ = 0;
  mutable std::uint64_t total_reads_ = 0;
};

/// A batch of fixed-length multichannel trials. data[i] is channels x samples
/// (microvolts). Labels are 0 (non-seizure class) / 1 (seizure class) and are
/// readable only through label(), which feeds the access audit.
class TrialSet {
 public:
  std::vector<Matrix> data;
  std::vector<std::string> subject_ids;
  std::vector<int> chronological_index;
  std::vector<std::uint8_t> boundary;  // trial straddled a seizure boundary
  std::vector<std::string> channel_names;
  double sampling_rate_hz = 0.0;
  Species species = Species::human;
  Modality modality = Modality::scalp;

  TrialSet() : audit_(std::make_shared<LabelAudit>()) {}

  std::size_t size() const { return data.size(); }
  Eigen::Index n_channels() const { return data.empty() ? 0 : data.front().rows(); }
  Eigen::Index n_samples() const { return data.empty() ? 0 : data.front().cols(); }

  int label(std::size_t i) const {
    audit_->record(i);
    return labels_[i];
  }

  void set_labels(std::vector<int> labels) { labels_ = std::move(labels); }
  void push_label(int y) { labels_.push_back(y); }
  std::size_t n_labels() const { return labels_.size(); }

  const std::shared_ptr<LabelAudit>& audit() const { return audit_; }

  /// Trial indices per subject, in stored order.
  std::map<std::string, std::vector<std::size_t>> indices_by_subject() const;

  /// Shape, finiteness and ordering invariants. Throws on violation.
  void validate() const;

  std::uint64_t content_hash() const;

  TrialSet subset(const std::vector<std::size_t>& idx) const;

 private:
  std::vector<int> labels_;
  std::shared_ptr<LabelAudit> audit_;
};

}  // namespace xsa
