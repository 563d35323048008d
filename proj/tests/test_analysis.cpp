// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "layalign/analysis.hpp"
#include "layalign/errors.hpp"
#include "model_fixtures.hpp"

using namespace layalign;
using namespace layalign::fixtures;

namespace {

// Cyclic Jacobi eigensolver for a symmetric matrix, used as the PCA oracle.
void jacobi_eigen(std::vector<std::vector<double>> a, std::vector<double>& values,
                  std::vector<std::vector<double>>& vectors) {
  const std::size_t n = a.size();
  vectors.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) vectors[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-26) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vectors[k][p], vkq = vectors[k][q];
          vectors[k][p] = c * vkp - s * vkq;
          vectors[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a[i][i];
}

std::vector<std::vector<double>> random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> pts(n, std::vector<double>(d));
  for (auto& p : pts)
    for (std::size_t j = 0; j < d; ++j) p[j] = nd(rng) * (1.0 + static_cast<double>(j));
  return pts;
}

PooledRep rep(const std::string& lang, const std::string& id, std::vector<double> v) {
  return {lang, id, std::move(v)};
}

void set_gates(LayAlignModel<double>& model, std::vector<double> g) {
  auto d = model.gates().values.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i];
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Cosine, BasicValuesAndSymmetry) {
  EXPECT_DOUBLE_EQ(cosine({1, 2, 3}, {2, 4, 6}), 1.0);
  EXPECT_DOUBLE_EQ(cosine({1, 0}, {0, 5}), 0.0);
  EXPECT_DOUBLE_EQ(cosine({1, 1}, {-1, -1}), -1.0);
  const auto pts = random_points(10, 7, 3);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    EXPECT_EQ(cosine(pts[i - 1], pts[i]), cosine(pts[i], pts[i - 1]));
  }
}

TEST(Cosine, PairsById) {
  std::vector<PooledRep> a = {rep("en", "2", {1, 0}), rep("en", "1", {1, 1})};
  std::vector<PooledRep> b = {rep("xa", "1", {1, 1}), rep("xa", "2", {0, 1})};
  const auto r = pooled_cosine(a, b);
  ASSERT_EQ(r.pairs.size(), 2u);
  EXPECT_EQ(r.pairs[0].first, "1");
  EXPECT_NEAR(r.pairs[0].second, 1.0, 1e-15);
  EXPECT_NEAR(r.pairs[1].second, 0.0, 1e-15);
  EXPECT_NEAR(r.mean, 0.5, 1e-15);
  EXPECT_EQ(pooled_cosine(b, a).mean, r.mean);

  b.push_back(rep("xa", "9", {1, 0}));
  try {
    pooled_cosine(a, b);
    FAIL() << "unpaired id accepted";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
  }
}

TEST(Pca, LineHasOneComponent) {
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 6; ++i) pts.push_back({1.0 + i, 2.0 + 2 * i, -1.0 * i});
  const auto r = pca_project(pts);
  EXPECT_NEAR(r.eigenvalues[1], 0.0, 1e-12);
  for (const auto& c : r.coords) EXPECT_NEAR(c[1], 0.0, 1e-9);
  // Distances along the line are preserved by the first coordinate.
  const double unit = std::sqrt(1.0 + 4.0 + 1.0);
  EXPECT_NEAR(std::abs(r.coords[5][0] - r.coords[0][0]), 5 * unit, 1e-9);
  EXPECT_FALSE(r.warning.has_value());
}

TEST(Pca, MatchesJacobiOracle) {
  const auto pts = random_points(25, 5, 8);
  const auto r = pca_project(pts);
  const std::size_t n = pts.size(), d = pts[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& p : pts)
    for (std::size_t j = 0; j < d; ++j) mean[j] += p[j] / static_cast<double>(n);
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (const auto& p : pts)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / static_cast<double>(n - 1);
  std::vector<double> vals;
  std::vector<std::vector<double>> vecs;
  jacobi_eigen(cov, vals, vecs);
  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < d; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return vals[x] > vals[y]; });
  for (int k = 0; k < 2; ++k) {
    const std::size_t c = order[k];
    EXPECT_NEAR(r.eigenvalues[k], vals[c], 1e-9 * vals[c]);
    std::size_t big = 0;
    for (std::size_t j = 0; j < d; ++j)
      if (std::abs(vecs[j][c]) > std::abs(vecs[big][c])) big = j;
    const double sign = vecs[big][c] > 0 ? 1.0 : -1.0;
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(r.components[k][j], sign * vecs[j][c], 1e-8);
    EXPECT_GT(r.components[k][big], 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double proj = 0;
      for (std::size_t j = 0; j < d; ++j) proj += (pts[i][j] - mean[j]) * sign * vecs[j][c];
      EXPECT_NEAR(r.coords[i][k], proj, 1e-8);
    }
  }
}

TEST(Pca, PermutingPointsPermutesCoordinates) {
  auto pts = random_points(12, 4, 9);
  const auto r = pca_project(pts);
  std::vector<std::size_t> perm = {3, 0, 11, 5, 7, 1, 2, 10, 4, 9, 6, 8};
  std::vector<std::vector<double>> shuffled;
  for (auto i : perm) shuffled.push_back(pts[i]);
  const auto s = pca_project(shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_NEAR(s.coords[i][0], r.coords[perm[i]][0], 1e-9);
    EXPECT_NEAR(s.coords[i][1], r.coords[perm[i]][1], 1e-9);
  }
}

TEST(Pca, DegenerateInputs) {
  const auto same = pca_project({{1, 2}, {1, 2}, {1, 2}});
  ASSERT_TRUE(same.warning.has_value());
  for (const auto& c : same.coords) {
    EXPECT_EQ(c[0], 0.0);
    EXPECT_EQ(c[1], 0.0);
  }
  EXPECT_THROW(pca_project({{1, 2}, {3, 4}}), ContractError);
  EXPECT_THROW(pca_project({{1}, {2}, {3}}), ContractError);
}

TEST(NormRatio, ZeroAtInitialization) {
  LayAlignModel<double> model(tiny_config());
  const auto p = norm_ratio_profile(model, random_examples(5, 1), Stage::kTranslation);
  ASSERT_EQ(p.ratio.size(), 2u);
  for (double r : p.ratio) EXPECT_EQ(r, 0.0);
  EXPECT_EQ(p.examples, 5u);
}

TEST(NormRatio, DoublingOneGateDoublesItsLayer) {
  // The input of layer i depends only on gates below i, so its ratio is
  // linear in |g_i|.
  const auto data = random_examples(6, 2);
  LayAlignModel<double> model(tiny_config());
  const std::vector<double> base = {0.3, -0.5};
  set_gates(model, base);
  const auto r = norm_ratio_profile(model, data, Stage::kTranslation).ratio;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto doubled = base;
    doubled[i] *= 2;
    set_gates(model, doubled);
    const auto r2 = norm_ratio_profile(model, data, Stage::kTranslation).ratio;
    EXPECT_GT(r[i], 0.0);
    EXPECT_NEAR(r2[i], 2.0 * r[i], 1e-10 * r[i]) << i;
    for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(r2[j], r[j]);
  }
}

TEST(NormRatio, IndependentOfBatching) {
  const auto data = random_examples(7, 3);
  LayAlignModel<double> model(tiny_config());
  set_gates(model, {0.2, -0.4});
  const auto a = norm_ratio_profile(model, data, Stage::kTask, 1);
  const auto b = norm_ratio_profile(model, data, Stage::kTask, 3);
  const auto c = norm_ratio_profile(model, data, Stage::kTask, 64);
  for (std::size_t i = 0; i < a.ratio.size(); ++i) {
    EXPECT_NEAR(a.ratio[i], b.ratio[i], 1e-12);
    EXPECT_NEAR(a.ratio[i], c.ratio[i], 1e-12);
    EXPECT_GT(a.ratio[i], 0.0);
  }
  EXPECT_THROW(norm_ratio_profile(model, {}, Stage::kTask), ContractError);
}

TEST(Pooling, PaddingDoesNotChangeRepresentations) {
  LayAlignModel<double> model(tiny_config());
  set_gates(model, {0.5, 0.5});
  const auto data = random_examples(6, 4);
  const auto batched = pooled_representations(model, data, {false, 64});
  const auto single = pooled_representations(model, data, {false, 1});
  ASSERT_EQ(batched.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(batched[i].id, data[i].id);
    ASSERT_EQ(batched[i].vector.size(), 12u);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(batched[i].vector[j], single[i].vector[j], 1e-10);
  }
  const auto with_prompt = pooled_representations(model, data, {true, 64});
  EXPECT_LT(cosine(with_prompt[0].vector, batched[0].vector), 1.0 - 1e-9);
}

TEST(GateTrajectory, SeriesAndPartialFlag) {
  LossTrace t;
  t.n_gates = 2;
  t.rows = {{0, 1, 1.0, 0.1, {0, 0}}, {1, 1, 0.9, 0.1, {}}, {2, 1, 0.8, 0.1, {0.1, -0.2}}};
  auto g = gate_trajectory(t);
  EXPECT_EQ(g.steps, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(g.series[1], (std::vector<double>{0, -0.2}));
  EXPECT_FALSE(g.partial);
  t.rows.push_back({3, 2, 0.7, 0.1, {}});
  EXPECT_TRUE(gate_trajectory(t).partial);
}

TEST(Report, WritesDeterministicCsvFiles) {
  ModelConfig cfg = tiny_config();
  LayAlignModel<double> model(cfg);
  set_gates(model, {0.1, 0.2});
  std::vector<TokenizedExample> parallel;
  for (const char* lang : {"en", "xa", "xb"}) {
    for (auto e : random_examples(4, 5)) {
      e.lang = lang;
      parallel.push_back(e);
    }
  }
  const auto r = analyze(model, parallel, nullptr);
  ASSERT_EQ(r.cosine.size(), 2u);
  EXPECT_EQ(r.cosine_pairs[0], (std::pair<std::string, std::string>{"en", "xa"}));
  for (const auto& row : r.aligner_matrix) {
    double s = 0;
    for (double v : row) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const auto tmp = std::filesystem::temp_directory_path() / "layalign_report_test";
  std::filesystem::remove_all(tmp);
  write_report(r, tmp / "a");
  write_report(analyze(model, parallel, nullptr), tmp / "b");
  for (const char* f : {"cosine.csv", "pca.csv", "norm_ratio.csv", "aligner_matrix.csv", "gates.csv"}) {
    ASSERT_TRUE(std::filesystem::exists(tmp / "a" / f)) << f;
    EXPECT_EQ(slurp(tmp / "a" / f), slurp(tmp / "b" / f)) << f;
  }
  EXPECT_EQ(slurp(tmp / "a" / "cosine.csv").substr(0, 34), "lang_a,lang_b,pairs,mean_cosine\nen");
  std::filesystem::remove_all(tmp);
}
