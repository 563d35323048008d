// SPDX-License-Identifier: Apache-2.0
#pragma once

// Representation diagnostics: pooled decoder states, cross-lingual cosine,
// PCA, cross/self-attention norm ratios, aligner weights and gate
// trajectories, plus a CSV report writer.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "layalign/model.hpp"
#include "layalign/train.hpp"

namespace layalign {

struct PooledRep {
  std::string lang;
  std::string id;
  std::vector<double> vector;  // d_dec
};

struct PoolingOptions {
  /// Also pool <bos> and the soft-prompt slots. By default only <sep> and
  /// the record's own input tokens are pooled.
  bool include_soft_prompt = false;
  std::size_t batch_size = 64;
};

/// Mean of the final decoder state T_m over the pooled valid positions of
/// each record. The record's source fills the user segment of the task
/// layout and no answer is appended.
template <class T>
std::vector<PooledRep> pooled_representations(const LayAlignModel<T>& model,
                                              const std::vector<TokenizedExample>& data,
                                              const PoolingOptions& options = {});

double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct PairedCosine {
  std::vector<std::pair<std::string, double>> pairs;  // (id, cosine), sorted by id
  double mean = 0.0;
};

/// Pairs reps by sentence id. Throws InputError listing ids present on only
/// one side.
PairedCosine pooled_cosine(const std::vector<PooledRep>& a, const std::vector<PooledRep>& b);

struct PcaResult {
  std::vector<std::array<double, 2>> coords;   // one row per input point
  std::array<std::vector<double>, 2> components;
  std::array<double, 2> eigenvalues{};
  std::optional<std::string> warning;
};

/// Covariance eigendecomposition; each component's largest-magnitude entry
/// is made positive. Identical points give zero coordinates and a warning.
PcaResult pca_project(const std::vector<std::vector<double>>& points);

struct NormRatioProfile {
  std::vector<double> ratio;         // per decoder layer
  std::vector<double> mean_ca_norm;  // of g * CA
  std::vector<double> mean_sa_norm;
  std::vector<std::size_t> skipped;  // positions with a zero self-attention output
  std::size_t examples = 0;
};

/// Per-layer mean over examples of the per-example mean over positions of
/// |g_i CA| / |SA|. Examples are combined in dataset order, so the result
/// does not depend on how batches are formed. Throws ContractError on an
/// empty dataset.
template <class T>
NormRatioProfile norm_ratio_profile(const LayAlignModel<T>& model,
                                    const std::vector<TokenizedExample>& data, Stage stage,
                                    std::size_t batch_size = 64);

struct GateTrajectory {
  std::vector<std::size_t> steps;
  std::vector<std::vector<double>> series;  // [layer][snapshot]
  bool partial = false;  // no snapshot at the first or the last row of the trace
};

GateTrajectory gate_trajectory(const LossTrace& trace);

struct DiagnosticsReport {
  std::vector<std::string> languages;
  std::vector<std::pair<std::string, std::string>> cosine_pairs;
  std::vector<PairedCosine> cosine;  // aligned with cosine_pairs
  std::vector<PooledRep> reps;
  PcaResult pca;                     // rows aligned with reps
  NormRatioProfile norm_ratio;
  std::vector<std::vector<double>> aligner_matrix;
  std::vector<std::size_t> aligner_states;  // column labels
  std::vector<double> gates;
  std::optional<GateTrajectory> trajectory;
};

struct AnalysisOptions {
  std::string base_language = "en";
  PoolingOptions pooling;
  std::size_t batch_size = 64;
};

/// Builds every diagnostic from a parallel set (records sharing ids across
/// languages) and an optional loss trace.
template <class T>
DiagnosticsReport analyze(const LayAlignModel<T>& model,
                          const std::vector<TokenizedExample>& parallel,
                          const LossTrace* trace, const AnalysisOptions& options = {});

/// cosine.csv, pca.csv, norm_ratio.csv, aligner_matrix.csv and gates.csv.
void write_report(const DiagnosticsReport& report, const std::filesystem::path& dir);

}  // namespace layalign
