// Copyright 2026 xsa contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#include "xsa/trial_set.hpp"

namespace xsa {

std::string to_string(Species s) { return s == Species::canine ? "canine" : "human"; }
std::string to_string(Modality m) { return m == Modality::intracranial ? "intracranial" : "scalp"; }

Species species_from_string(const std::string& s) {
  if (s == "canine") return Species::canine;
  if (s == "human") return Species::human;
  throw std::invalid_argument("unknown species: " + s);
}

Modality modality_from_string(const std::string& s) {
  if (s == "intracranial") return Modality::intracranial;
  if (s == "scalp") return Modality::scalp;
  throw std::invalid_argument("unknown modality: " + s);
}

std::map<std::string, std::vector<std::size_t>> TrialSet::indices_by_subject() const {
  std::map<std::string, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < subject_ids.size(); ++i) out[subject_ids[i]].push_back(i);
  return out;
}

void TrialSet::validate() const {
  require(data.size() == labels_.size(), "TrialSet: data/label count mismatch");
  require(data.size() == subject_ids.size(), "TrialSet: data/subject count mismatch");
  require(data.size() == chronological_index.size(),
          "TrialSet: data/chronological_index count mismatch");
  require(boundary.empty() || boundary.size() == data.size(),
          "TrialSet: boundary flag count mismatch");
  require(sampling_rate_hz > 0.0, "TrialSet: sampling rate must be positive");
  const Eigen::Index c = n_channels();
  const Eigen::Index t = n_samples();
  for (std::size_t i = 0; i < data.size(); ++i) {
    require(data[i].rows() == c && data[i].cols() == t, "TrialSet: inconsistent trial shape");
    require(data[i].allFinite(), "TrialSet: non-finite sample value");
    require(labels_[i] == 0 || labels_[i] == 1, "TrialSet: labels must be 0 or 1");
  }
  for (const auto& [subject, idx] : indices_by_subject()) {
    for (std::size_t k = 1; k < idx.size(); ++k) {
      require(chronological_index[idx[k - 1]] < chronological_index[idx[k]],
              "TrialSet: chronological_index not strictly increasing for subject " + subject);
    }
  }
}

std::uint64_t TrialSet::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& m : data) h = fnv1a(m, h);
  for (int y : labels_) h = fnv1a(&y, sizeof(y), h);
  for (const auto& s : subject_ids) h = fnv1a(s.data(), s.size(), h);
  return h;
}

TrialSet TrialSet::subset(const std::vector<std::size_t>& idx) const {
  TrialSet out;
  out.sampling_rate_hz = sampling_rate_hz;
  out.species = species;
  out.modality = modality;
  out.channel_names = channel_names;
  for (std::size_t i : idx) {
    require(i < size(), "TrialSet::subset: index out of range");
    out.data.push_back(data[i]);
    out.subject_ids.push_back(subject_ids[i]);
    out.chronological_index.push_back(chronological_index[i]);
    if (!boundary.empty()) out.boundary.push_back(boundary[i]);
    out.push_label(labels_[i]);
  }
  return out;
}

}  // namespace xsa
