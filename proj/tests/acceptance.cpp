// SPDX-License-Identifier: Apache-2.0
// End-to-end acceptance checks. Prints one "criterion N: PASS|FAIL ..." line
// per check and exits non-zero if any check fails.
//
//   acceptance [--only 1,2,8] [--seeds 3] [--work DIR] [--keep]

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "layalign/commands.hpp"
#include "layalign/errors.hpp"
#include "model_fixtures.hpp"

using namespace layalign;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return m;
}

std::vector<std::vector<std::int32_t>> sources(const std::vector<TokenizedExample>& rows) {
  std::vector<std::vector<std::int32_t>> out;
  for (const auto& r : rows) out.push_back(r.source);
  return out;
}

std::vector<std::vector<std::int32_t>> targets(const std::vector<TokenizedExample>& rows) {
  std::vector<std::vector<std::int32_t>> out;
  for (const auto& r : rows) out.push_back(r.target);
  return out;
}

/// A mid-sized model over a 60-token vocabulary for the property checks.
ModelConfig property_config() {
  ModelConfig c = fixtures::tiny_config();
  c.encoder.vocab_size = c.decoder.vocab_size = 60;
  c.encoder.d_model = 16;
  c.encoder.d_ff = 32;
  c.encoder.n_layers = 4;
  c.decoder.d_model = 16;
  c.decoder.d_ff = 32;
  c.decoder.n_layers = 3;
  c.bridge.fusion_hidden = 12;
  return c;
}

template <class T>
void randomize(const NamedParams<T>& params, double std, std::uint64_t seed, bool skip_gates) {
  for (const auto& [name, t] : params) {
    if (skip_gates && name.rfind("gates", 0) == 0) continue;
    fixtures::fill_normal(t, std, ++seed);
  }
}

Outcome gate_zero_equivalence() {
  const auto start = Clock::now();
  LayAlignModel<float> model(property_config());
  randomize(model.trainable_parameters(), 0.5, 100, true);
  double worst = 0;
  for (std::uint64_t b = 0; b < 100; ++b) {
    const auto rows = fixtures::random_examples(4, 1000 + b, 60);
    const auto stack = model.encode(fixtures::pointers(rows));
    const Stage st = b % 2 == 0 ? Stage::kTranslation : Stage::kTask;
    const auto full = model.run(stack, st, sources(rows), targets(rows));
    const auto ref = model.run(stack, st, sources(rows), targets(rows), false, true);
    worst = std::max(worst, max_abs_diff(full.output.logits, ref.output.logits));
  }
  const double secs = seconds_since(start);
  return {worst <= 1e-6 && secs < 60,
          "100 batches, max |diff| " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Outcome gradient_check() {
  const auto start = Clock::now();
  LayAlignModel<double> model(property_config());
  randomize(model.trainable_parameters(), 0.5, 200, false);
  const auto rows = fixtures::random_examples(3, 7, 60);
  std::vector<Tensor<double>> params;
  std::set<std::string> groups;
  for (const auto& [name, t] : model.trainable_parameters()) {
    params.push_back(t);
    groups.insert(name.substr(0, name.find('.')));
  }
  const auto r = oracle::check_gradients(
      params, [&] { return model.loss(model.forward(fixtures::pointers(rows), Stage::kTask)); }, 3);
  std::string names;
  for (const auto& g : groups) names += (names.empty() ? "" : "/") + g;
  const double secs = seconds_since(start);
  return {r.checked >= 20 && r.worst_relative < 1e-3 && groups.size() == 3 && secs < 300,
          std::to_string(r.checked) + " scalars over " + names + ", worst rel " + fmt(r.worst_relative) +
              ", " + fmt(secs) + " s"};
}

Outcome ablation_perturbation() {
  // Under no_aligner the fused states are never read; under no_adapter the
  // soft prompt from H_n is never built.
  auto perturb = [](const LayerStack<double>& stack, std::size_t layer, double by) {
    auto out = stack;
    out.states[layer] = add(stack.states[layer], Tensor<double>::full(stack.states[layer].shape(), by));
    return out;
  };
  double worst_aligner = 0, worst_adapter = 0, control = 0;
  for (const bool drop_aligner : {true, false}) {
    ModelConfig cfg = property_config();
    (drop_aligner ? cfg.ablation.no_aligner : cfg.ablation.no_adapter) = true;
    LayAlignModel<double> model(cfg);
    randomize(model.trainable_parameters(), 0.5, 300, false);
    for (std::uint64_t b = 0; b < 5; ++b) {
      const auto rows = fixtures::random_examples(3, 50 + b, 60);
      const auto stack = model.encode(fixtures::pointers(rows));
      const auto base = model.run(stack, Stage::kTask, sources(rows), targets(rows)).output.logits;
      const std::size_t n = stack.n_layers();
      if (drop_aligner) {
        for (std::size_t l = 0; l < n; ++l) {
          const auto p = model.run(perturb(stack, l, 0.7), Stage::kTask, sources(rows), targets(rows));
          worst_aligner = std::max(worst_aligner, max_abs_diff(base, p.output.logits));
        }
        const auto p = model.run(perturb(stack, n, 0.7), Stage::kTask, sources(rows), targets(rows));
        control = std::max(control, max_abs_diff(base, p.output.logits));
      } else {
        const auto p = model.run(perturb(stack, n, 0.7), Stage::kTask, sources(rows), targets(rows));
        worst_adapter = std::max(worst_adapter, max_abs_diff(base, p.output.logits));
      }
    }
  }
  return {worst_aligner <= 1e-7 && worst_adapter <= 1e-7 && control > 1e-6,
          "no_aligner H_0..H_{n-1} diff " + fmt(worst_aligner) + ", no_adapter H_n diff " +
              fmt(worst_adapter) + ", no_aligner H_n control " + fmt(control)};
}

// ---------------------------------------------------------------------------
// Synthetic runs

struct ArmResult {
  double lrl = 0, hrl = 0;
  fs::path dir;
};

struct SeedRun {
  std::uint64_t seed = 0;
  fs::path base;
  std::map<std::string, ArmResult> arms;
};

RunConfig arm_config(const fs::path& base, std::uint64_t seed, const fs::path& out) {
  RunConfig c = RunConfig::defaults();
  c.seed = seed;
  c.output_dir = out.string();
  c.corpus_dir = (base / "corpus").string();
  c.backbone = (base / "pretrain.ckpt").string();
  c.validate();
  return c;
}

std::unique_ptr<LayAlignModel<float>> load_trained(const RunConfig& c, const fs::path& ckpt) {
  const CorpusInfo corpus = load_corpus_info(c.resolved_corpus_dir());
  auto model = std::make_unique<LayAlignModel<float>>(resolve_model_config(c, corpus.vocab));
  apply_tensors(load_checkpoint(ckpt), model->named_parameters(), true);
  return model;
}

void save_initial(const RunConfig& c, const fs::path& path) {
  auto model = build_model(c, load_corpus_info(c.resolved_corpus_dir()));
  Checkpoint init;
  init.stage = "init";
  init.config_digest = config_digest(model->config(), c.lexicon_prior);
  init.metadata = "{}";
  init.tensors = capture_tensors(model->named_parameters());
  save_checkpoint(init, path);
}

SeedRun run_seed(const fs::path& root, std::uint64_t seed) {
  SeedRun run;
  run.seed = seed;
  run.base = root / ("seed" + std::to_string(seed)) / "base";
  RunConfig base = RunConfig::defaults();
  base.seed = seed;
  base.output_dir = run.base.string();
  cmd_gen_synth(base);
  cmd_pretrain(base);

  for (const std::string arm : {"untrained", "skip_stage1", "no_aligner", "full"}) {
    const fs::path dir = run.base.parent_path() / arm;
    RunConfig c = arm_config(run.base, seed, dir);
    if (arm == "no_aligner") c.model.ablation.no_aligner = true;
    fs::path final_ckpt;
    if (arm == "untrained") {
      fs::create_directories(dir);
      final_ckpt = dir / "init.ckpt";
      save_initial(c, final_ckpt);
    } else if (arm == "skip_stage1") {
      final_ckpt = cmd_train(c, 2, std::nullopt).checkpoint;
    } else {
      cmd_train(c, 1, std::nullopt);
      final_ckpt = cmd_train(c, 2, dir / "stage1.ckpt").checkpoint;
    }
    const EvalReport r = cmd_eval(c, final_ckpt, "eval");
    run.arms[arm] = {r.lrl.value_or(0.0), r.hrl.value_or(0.0), dir};
    std::cout << "  seed " << seed << " " << arm << ": Lrl " << fmt(run.arms[arm].lrl) << " Hrl "
              << fmt(run.arms[arm].hrl) << std::endl;
  }
  return run;
}

Outcome synthetic_experiment(const std::vector<SeedRun>& runs, double secs) {
  std::map<std::string, double> mean;
  for (const auto& r : runs) {
    for (const auto& [arm, res] : r.arms) mean[arm] += res.lrl / static_cast<double>(runs.size());
  }
  const double full = mean["full"];
  const bool ok = full - mean["skip_stage1"] >= 5 && full - mean["no_aligner"] >= 5 &&
                  full - mean["untrained"] >= 30 && secs < 1800;
  return {ok, "mean Lrl over " + std::to_string(runs.size()) + " seeds: full " + fmt(full) +
                  ", skip_stage1 " + fmt(mean["skip_stage1"]) + ", no_aligner " + fmt(mean["no_aligner"]) +
                  ", untrained " + fmt(mean["untrained"]) + ", " + fmt(secs / 60) + " min"};
}

Outcome frozen_contract(const SeedRun& run) {
  const fs::path dir = run.arms.at("full").dir;
  const RunConfig c = arm_config(run.base, run.seed, dir);
  auto init = build_model(c, load_corpus_info(c.resolved_corpus_dir()));
  auto trained = load_trained(c, dir / "stage2.ckpt");
  const auto gates = trained->gates().snapshot();
  std::size_t nonzero = 0;
  for (double g : gates) nonzero += g != 0.0;
  const bool same = init->frozen_digest() == trained->frozen_digest();
  return {same && nonzero == gates.size(),
          std::string("frozen digest ") + (same ? "unchanged" : "CHANGED") + " (" +
              trained->frozen_digest().substr(0, 12) + "), " + std::to_string(nonzero) + "/" +
              std::to_string(gates.size()) + " gates nonzero"};
}

std::vector<std::vector<double>> read_matrix_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);  // header
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');  // layer label
    rows.emplace_back();
    while (std::getline(ss, cell, ',')) rows.back().push_back(std::stod(cell));
  }
  return rows;
}

struct AnalysisPair {
  DiagnosticsReport before, after;
  std::vector<std::vector<double>> csv_before, csv_after;
};

AnalysisPair analyze_before_after(const SeedRun& run) {
  const fs::path dir = run.arms.at("full").dir;
  RunConfig c = arm_config(run.base, run.seed, dir / "init_analysis");
  AnalysisPair p;
  p.before = cmd_analyze(c, run.arms.at("untrained").dir / "init.ckpt", "parallel", std::nullopt);
  p.csv_before = read_matrix_csv(dir / "init_analysis" / "analysis" / "aligner_matrix.csv");
  c.output_dir = dir.string();
  p.after = cmd_analyze(c, dir / "stage2.ckpt", "parallel", dir / "stage1_loss.csv");
  p.csv_after = read_matrix_csv(dir / "analysis" / "aligner_matrix.csv");
  return p;
}

Outcome alignment_direction(const std::vector<SeedRun>& runs, const std::vector<AnalysisPair>& pairs) {
  std::size_t improved = 0, total = 0;
  std::string detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto& p = pairs[s];
    for (std::size_t i = 0; i < p.after.cosine.size(); ++i) {
      const double b = p.before.cosine[i].mean, a = p.after.cosine[i].mean;
      ++total;
      improved += a > b;
      if (s == 0) detail += " " + p.after.cosine_pairs[i].second + " " + fmt(b) + "->" + fmt(a);
    }
  }
  return {total > 0 && improved == total,
          std::to_string(improved) + "/" + std::to_string(total) + " language-seed pairs improved; seed " +
              std::to_string(runs.front().seed) + ":" + detail};
}

Outcome aligner_normalization(const std::vector<AnalysisPair>& pairs) {
  double worst_sum = 0, worst_uniform = 0;
  std::size_t rows = 0;
  for (const auto& p : pairs) {
    for (const auto* m : {&p.csv_before, &p.csv_after, &p.before.aligner_matrix, &p.after.aligner_matrix}) {
      for (const auto& row : *m) {
        double sum = 0;
        for (double v : row) sum += v;
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        ++rows;
      }
    }
    // The model runs in float, so exactly uniform means float(1/k).
    for (const auto& row : p.before.aligner_matrix) {
      const double uniform = static_cast<float>(1.0 / static_cast<double>(row.size()));
      for (double v : row) worst_uniform = std::max(worst_uniform, std::abs(v - uniform));
    }
  }
  return {rows > 0 && worst_sum <= 1e-6 && worst_uniform == 0.0,
          std::to_string(rows) + " rows, max |sum-1| " + fmt(worst_sum) + ", init max |w-1/n| " +
              fmt(worst_uniform)};
}

Outcome norm_ratio_homogeneity(const SeedRun& run) {
  const fs::path dir = run.arms.at("full").dir;
  const RunConfig c = arm_config(run.base, run.seed, dir);
  auto model = load_trained(c, dir / "stage2.ckpt");
  const CorpusInfo corpus = load_corpus_info(c.resolved_corpus_dir());
  const auto data = tokenize(read_corpus(corpus.dir / "parallel.jsonl"), corpus.vocab);
  const auto base = norm_ratio_profile(*model, data, Stage::kTranslation).ratio;
  double worst = 0;
  auto g = model->gates().values.mutable_data();
  for (std::size_t i = 0; i < base.size(); ++i) {
    const float saved = g[i];
    g[i] = 2.0f * saved;
    const auto doubled = norm_ratio_profile(*model, data, Stage::kTranslation).ratio;
    g[i] = saved;
    worst = std::max(worst, std::abs(doubled[i] - 2.0 * base[i]) / std::max(base[i], 1e-300));
  }
  return {worst <= 1e-6, std::to_string(base.size()) + " layers, max relative deviation " + fmt(worst)};
}

Outcome determinism(const SeedRun& run) {
  // Shorter schedule: the property does not depend on training length.
  const fs::path root = run.base.parent_path() / "determinism";
  std::map<std::string, std::string> first;
  std::size_t compared = 0, differing = 0;
  std::string which;
  for (const char* name : {"a", "b"}) {
    RunConfig c = arm_config(run.base, run.seed, root / name);
    c.stage1.epochs = 2;
    c.stage2.epochs = 2;
    cmd_train(c, 1, std::nullopt);
    cmd_train(c, 2, root / name / "stage1.ckpt");
    cmd_analyze(c, root / name / "stage2.ckpt", "parallel", root / name / "stage1_loss.csv");
    for (const auto& e : fs::recursive_directory_iterator(root / name)) {
      if (!e.is_regular_file()) continue;
      const std::string rel = fs::relative(e.path(), root / name).string();
      const std::string bytes = read_file(e.path());
      if (*name == 'a') {
        first[rel] = bytes;
      } else {
        ++compared;
        if (!first.count(rel) || first[rel] != bytes) {
          ++differing;
          which += " " + rel;
        }
      }
    }
  }
  return {compared > 0 && compared == first.size() && differing == 0,
          std::to_string(compared) + " files compared, " + std::to_string(differing) + " differ" + which};
}

Outcome reference_bookkeeping(const SeedRun& run) {
  const fs::path dir = run.arms.at("full").dir;
  bool ok = true;
  std::string detail;
  for (const char* stage : {"stage1", "stage2"}) {
    const json meta = json::parse(load_checkpoint(dir / (std::string(stage) + ".ckpt")).metadata);
    const json& ref = meta.at("reference_hyperparameters").at(stage);
    const double lr = std::string(stage) == "stage1" ? 4e-5 : 3e-5;
    ok = ok && ref.at("learning_rate").get<double>() == lr && ref.at("batch_size").get<int>() == 128 &&
         ref.at("epochs").get<int>() == 3 && ref.at("warmup_ratio").get<double>() == 0.05;
    detail += std::string(detail.empty() ? "" : "; ") + stage + " " + ref.dump();
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string only;
  std::size_t n_seeds = 3;
  std::string work = (fs::temp_directory_path() / "layalign_acceptance").string();
  bool keep = false;
  app.add_option("--only", only, "Comma separated criterion numbers");
  app.add_option("--seeds", n_seeds, "Seeds for the synthetic experiment")->check(CLI::Range(1, 10));
  app.add_option("--work", work, "Scratch directory");
  app.add_flag("--keep", keep, "Keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  std::set<int> wanted;
  {
    std::stringstream ss(only);
    for (std::string t; std::getline(ss, t, ',');) {
      if (!t.empty()) wanted.insert(std::stoi(t));
    }
    if (wanted.empty()) {
      for (int i = 1; i <= 10; ++i) wanted.insert(i);
    }
  }

  int failures = 0;
  auto report = [&](int id, const std::function<Outcome()>& fn) {
    if (!wanted.count(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  };

  report(1, gate_zero_equivalence);
  report(2, gradient_check);
  report(4, ablation_perturbation);

  const bool need_runs = std::any_of(wanted.begin(), wanted.end(), [](int i) { return i == 3 || i >= 5; });
  if (need_runs) {
    fs::remove_all(work);
    std::vector<SeedRun> runs;
    std::vector<AnalysisPair> pairs;
    std::string setup_error;
    const auto start = Clock::now();
    try {
      for (std::uint64_t s = 1; s <= n_seeds; ++s) runs.push_back(run_seed(work, s));
    } catch (const std::exception& e) {
      setup_error = std::string("synthetic run failed: ") + e.what();
    }
    const double secs = seconds_since(start);
    auto with_runs = [&](const std::function<Outcome()>& fn) {
      return [&, fn]() -> Outcome {
        if (!setup_error.empty()) return {false, setup_error};
        return fn();
      };
    };
    report(3, with_runs([&] { return frozen_contract(runs.front()); }));
    report(5, with_runs([&] { return synthetic_experiment(runs, secs); }));
    if (wanted.count(6) || wanted.count(7)) {
      try {
        if (setup_error.empty()) {
          for (const auto& r : runs) pairs.push_back(analyze_before_after(r));
        }
      } catch (const std::exception& e) {
        setup_error = std::string("analysis failed: ") + e.what();
      }
    }
    report(6, with_runs([&] { return alignment_direction(runs, pairs); }));
    report(7, with_runs([&] { return aligner_normalization(pairs); }));
    report(8, with_runs([&] { return norm_ratio_homogeneity(runs.front()); }));
    report(9, with_runs([&] { return determinism(runs.front()); }));
    report(10, with_runs([&] { return reference_bookkeeping(runs.front()); }));
    if (!keep) fs::remove_all(work);
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
