// SPDX-License-Identifier: Apache-2.0
#include "layalign/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace layalign {

namespace {

std::vector<std::vector<const TokenizedExample*>> batches(const std::vector<TokenizedExample>& data,
                                                          std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("analysis batch size must be positive");
  std::vector<std::vector<const TokenizedExample*>> out;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    out.emplace_back();
    for (std::size_t j = i; j < std::min(data.size(), i + batch_size); ++j) out.back().push_back(&data[j]);
  }
  return out;
}

}  // namespace

template <class T>
std::vector<PooledRep> pooled_representations(const LayAlignModel<T>& model,
                                              const std::vector<TokenizedExample>& data,
                                              const PoolingOptions& options) {
  NoGradScope<T> no_grad;
  std::vector<PooledRep> out;
  const std::size_t d = model.config().decoder.d_model;
  for (const auto& rows : batches(data, options.batch_size)) {
    std::vector<std::vector<std::int32_t>> user, targets(rows.size());
    for (const auto* r : rows) user.push_back(r->source);
    const auto fwd = model.run(model.encode(rows), Stage::kTask, user, targets);
    const AssembledInput<T>& in = fwd.input;
    const std::size_t first = options.include_soft_prompt ? 0 : in.prompt_begin + in.prompt_len;
    const T* h = fwd.output.hidden.data().data();
    for (std::size_t b = 0; b < rows.size(); ++b) {
      PooledRep rep;
      rep.lang = rows[b]->lang;
      rep.id = rows[b]->id;
      rep.vector.assign(d, 0.0);
      std::size_t count = 0;
      for (std::size_t t = first; t < in.length; ++t) {
        const std::size_t slot = b * in.length + t;
        if (!in.valid[slot]) continue;
        for (std::size_t j = 0; j < d; ++j) rep.vector[j] += static_cast<double>(h[slot * d + j]);
        ++count;
      }
      for (double& v : rep.vector) v /= static_cast<double>(count);
      out.push_back(std::move(rep));
    }
  }
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("cosine of vectors with different lengths");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  // Multiplying the norms before the square root keeps f(a, b) == f(b, a) bitwise.
  return dot / std::sqrt(na * nb);
}

PairedCosine pooled_cosine(const std::vector<PooledRep>& a, const std::vector<PooledRep>& b) {
  const auto index = [](const std::vector<PooledRep>& reps) {
    std::map<std::string, const PooledRep*> m;
    for (const auto& r : reps) {
      if (!m.emplace(r.id, &r).second) throw InputError("duplicate sentence id " + r.id);
    }
    return m;
  };
  const auto ia = index(a), ib = index(b);
  std::string missing;
  for (const auto& [id, r] : ia) {
    if (!ib.count(id)) missing += (missing.empty() ? "" : ", ") + id;
  }
  for (const auto& [id, r] : ib) {
    if (!ia.count(id)) missing += (missing.empty() ? "" : ", ") + id;
  }
  if (!missing.empty()) throw InputError("unpaired sentence ids: " + missing);
  if (ia.empty()) throw ContractError("no sentence pairs to compare");
  PairedCosine out;
  double sum = 0.0;
  for (const auto& [id, ra] : ia) {
    const double c = cosine(ra->vector, ib.at(id)->vector);
    out.pairs.emplace_back(id, c);
    sum += c;
  }
  out.mean = sum / static_cast<double>(out.pairs.size());
  return out;
}

PcaResult pca_project(const std::vector<std::vector<double>>& points) {
  if (points.size() < 3) throw ContractError("PCA needs at least three points");
  const std::size_t n = points.size(), d = points.front().size();
  if (d < 2) throw ContractError("PCA needs dimension at least two");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].size() != d) throw ContractError("PCA points differ in dimension");
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = points[i][j];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  PcaResult r;
  r.coords.assign(n, {0.0, 0.0});
  const double scale = x.cwiseAbs().maxCoeff();
  if (scale == 0.0) {
    r.warning = "all points are identical; coordinates set to zero";
    r.components[0].assign(d, 0.0);
    r.components[1].assign(d, 0.0);
    return r;
  }
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
  const auto& vals = solver.eigenvalues();  // ascending
  const auto& vecs = solver.eigenvectors();
  for (int c = 0; c < 2; ++c) {
    const Eigen::Index col = static_cast<Eigen::Index>(d) - 1 - c;
    Eigen::VectorXd v = vecs.col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    r.eigenvalues[static_cast<std::size_t>(c)] = std::max(0.0, vals(col));
    r.components[static_cast<std::size_t>(c)].assign(v.data(), v.data() + v.size());
    const Eigen::VectorXd proj = x * v;
    for (std::size_t i = 0; i < n; ++i) r.coords[i][static_cast<std::size_t>(c)] = proj(static_cast<Eigen::Index>(i));
  }
  return r;
}

template <class T>
NormRatioProfile norm_ratio_profile(const LayAlignModel<T>& model,
                                    const std::vector<TokenizedExample>& data, Stage stage,
                                    std::size_t batch_size) {
  if (data.empty()) throw ContractError("norm ratio profile of an empty dataset");
  NoGradScope<T> no_grad;
  const std::size_t m = model.config().decoder.n_layers;
  std::vector<std::vector<double>> per_example(m, std::vector<double>(data.size(), 0.0));
  NormRatioProfile p;
  p.mean_ca_norm.assign(m, 0.0);
  p.mean_sa_norm.assign(m, 0.0);
  p.skipped.assign(m, 0);
  std::size_t offset = 0;
  for (const auto& rows : batches(data, batch_size)) {
    const auto fwd = model.forward(rows, stage, true);
    const auto& layers = fwd.output.diagnostics->layers;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t b = 0; b < rows.size(); ++b) per_example[i][offset + b] = layers[i].example_ratio[b];
      p.mean_ca_norm[i] += layers[i].mean_ca_norm * static_cast<double>(rows.size());
      p.mean_sa_norm[i] += layers[i].mean_sa_norm * static_cast<double>(rows.size());
      p.skipped[i] += layers[i].skipped;
    }
    offset += rows.size();
  }
  p.examples = data.size();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (double v : per_example[i]) s += v;
    p.ratio.push_back(s / static_cast<double>(data.size()));
    p.mean_ca_norm[i] /= static_cast<double>(data.size());
    p.mean_sa_norm[i] /= static_cast<double>(data.size());
  }
  return p;
}

GateTrajectory gate_trajectory(const LossTrace& trace) {
  GateTrajectory g;
  g.series.resize(trace.n_gates);
  for (const auto& r : trace.rows) {
    if (r.gates.empty()) continue;
    if (r.gates.size() != trace.n_gates) throw InputError("gate snapshot of the wrong width");
    g.steps.push_back(r.step);
    for (std::size_t i = 0; i < trace.n_gates; ++i) g.series[i].push_back(r.gates[i]);
  }
  g.partial = trace.rows.empty() || trace.n_gates == 0 || trace.rows.front().gates.empty() ||
              trace.rows.back().gates.empty();
  return g;
}

template <class T>
DiagnosticsReport analyze(const LayAlignModel<T>& model,
                          const std::vector<TokenizedExample>& parallel, const LossTrace* trace,
                          const AnalysisOptions& options) {
  if (parallel.empty()) throw ContractError("analysis needs a nonempty parallel set");
  DiagnosticsReport r;
  PoolingOptions pooling = options.pooling;
  pooling.batch_size = options.batch_size;
  r.reps = pooled_representations(model, parallel, pooling);
  std::map<std::string, std::vector<PooledRep>> by_lang;
  for (const auto& rep : r.reps) by_lang[rep.lang].push_back(rep);
  for (const auto& [lang, reps] : by_lang) r.languages.push_back(lang);
  if (!by_lang.count(options.base_language)) {
    throw InputError("parallel set has no " + options.base_language + " records");
  }
  for (const auto& lang : r.languages) {
    if (lang == options.base_language) continue;
    r.cosine_pairs.emplace_back(options.base_language, lang);
    r.cosine.push_back(pooled_cosine(by_lang.at(options.base_language), by_lang.at(lang)));
  }
  std::vector<std::vector<double>> points;
  for (const auto& rep : r.reps) points.push_back(rep.vector);
  r.pca = pca_project(points);
  const std::size_t m = model.config().decoder.n_layers;
  if (!model.config().ablation.no_aligner) {
    r.norm_ratio = norm_ratio_profile(model, parallel, Stage::kTranslation, options.batch_size);
    r.aligner_matrix = model.aligner().weight_matrix();
    r.aligner_states = model.aligner().selected_states();
  } else {
    // Without cross-attention every ratio is zero by construction.
    r.norm_ratio.ratio.assign(m, 0.0);
    r.norm_ratio.mean_ca_norm.assign(m, 0.0);
    r.norm_ratio.mean_sa_norm.assign(m, 0.0);
    r.norm_ratio.skipped.assign(m, 0);
    r.norm_ratio.examples = parallel.size();
  }
  r.gates = model.gates().snapshot();
  if (trace != nullptr) r.trajectory = gate_trajectory(*trace);
  return r;
}

void write_report(const DiagnosticsReport& r, const std::filesystem::path& dir) {
  std::string cos = "lang_a,lang_b,pairs,mean_cosine\n";
  for (std::size_t i = 0; i < r.cosine.size(); ++i) {
    cos += r.cosine_pairs[i].first + "," + r.cosine_pairs[i].second + "," +
           std::to_string(r.cosine[i].pairs.size()) + "," + format_double(r.cosine[i].mean) + "\n";
  }
  std::string pca = "lang,id,pc1,pc2\n";
  for (std::size_t i = 0; i < r.reps.size(); ++i) {
    pca += r.reps[i].lang + "," + r.reps[i].id + "," + format_double(r.pca.coords[i][0]) + "," +
           format_double(r.pca.coords[i][1]) + "\n";
  }
  std::string nr = "layer,ratio,mean_ca_norm,mean_sa_norm,skipped\n";
  for (std::size_t i = 0; i < r.norm_ratio.ratio.size(); ++i) {
    nr += std::to_string(i + 1) + "," + format_double(r.norm_ratio.ratio[i]) + "," +
          format_double(r.norm_ratio.mean_ca_norm[i]) + "," + format_double(r.norm_ratio.mean_sa_norm[i]) +
          "," + std::to_string(r.norm_ratio.skipped[i]) + "\n";
  }
  std::string am = "layer";
  for (std::size_t s : r.aligner_states) am += ",state_" + std::to_string(s);
  am += "\n";
  for (std::size_t i = 0; i < r.aligner_matrix.size(); ++i) {
    am += std::to_string(i + 1);
    for (double w : r.aligner_matrix[i]) am += "," + format_double(w);
    am += "\n";
  }
  std::string gates = "step";
  for (std::size_t i = 1; i <= r.gates.size(); ++i) gates += ",gate_" + std::to_string(i);
  gates += "\n";
  if (r.trajectory) {
    for (std::size_t k = 0; k < r.trajectory->steps.size(); ++k) {
      gates += std::to_string(r.trajectory->steps[k]);
      for (const auto& s : r.trajectory->series) gates += "," + format_double(s[k]);
      gates += "\n";
    }
  }
  gates += "final";
  for (double g : r.gates) gates += "," + format_double(g);
  gates += "\n";
  write_file_atomic(dir / "cosine.csv", cos);
  write_file_atomic(dir / "pca.csv", pca);
  write_file_atomic(dir / "norm_ratio.csv", nr);
  write_file_atomic(dir / "aligner_matrix.csv", am);
  write_file_atomic(dir / "gates.csv", gates);
}

template std::vector<PooledRep> pooled_representations(const LayAlignModel<float>&,
                                                       const std::vector<TokenizedExample>&,
                                                       const PoolingOptions&);
template std::vector<PooledRep> pooled_representations(const LayAlignModel<double>&,
                                                       const std::vector<TokenizedExample>&,
                                                       const PoolingOptions&);
template NormRatioProfile norm_ratio_profile(const LayAlignModel<float>&,
                                             const std::vector<TokenizedExample>&, Stage, std::size_t);
template NormRatioProfile norm_ratio_profile(const LayAlignModel<double>&,
                                             const std::vector<TokenizedExample>&, Stage, std::size_t);
template DiagnosticsReport analyze(const LayAlignModel<float>&, const std::vector<TokenizedExample>&,
                                   const LossTrace*, const AnalysisOptions&);
template DiagnosticsReport analyze(const LayAlignModel<double>&, const std::vector<TokenizedExample>&,
                                   const LossTrace*, const AnalysisOptions&);

}  // namespace layalign
