// SPDX-License-Identifier: Apache-2.0
#include "layalign/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "layalign/optim.hpp"

namespace layalign {

StagePlan StagePlan::reference(Stage stage) {
  StagePlan p;
  p.stage = stage;
  p.learning_rate = stage == Stage::kTranslation ? 4e-5 : 3e-5;
  return p;
}

void StagePlan::validate() const {
  if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw ConfigError("warmup_ratio must be in [0, 1]");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be nonnegative");
  if (snapshot_every == 0) throw ConfigError("snapshot_every must be positive");
  if (!(cross_lr_scale > 0.0) || !std::isfinite(cross_lr_scale)) {
    throw ConfigError("cross_lr_scale must be positive");
  }
}

std::size_t StagePlan::total_steps(std::size_t n) const {
  const std::size_t per_epoch = (n + batch_size - 1) / batch_size;
  const std::size_t total = per_epoch * epochs;
  return max_steps > 0 ? std::min(total, max_steps) : total;
}

void PretrainPlan::validate() const {
  if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw ConfigError("warmup_ratio must be in [0, 1]");
  if (prompt_noise < 0.0) throw ConfigError("prompt_noise must be nonnegative");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InputError("line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

/// Batches of indices for one epoch, shuffled with a per-epoch seed.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch,
                                                    std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed * 1000003u + epoch);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  }
  return out;
}

template <class T>
void require_finite_loss(const Tensor<T>& loss, std::size_t step) {
  if (!std::isfinite(static_cast<double>(loss.data()[0]))) {
    throw NumericError("non-finite loss at step " + std::to_string(step));
  }
}

}  // namespace

std::string LossTrace::to_csv() const {
  std::string s = "step,stage,loss,lr";
  for (std::size_t i = 1; i <= n_gates; ++i) s += ",gate_" + std::to_string(i);
  s += "\n";
  for (const auto& r : rows) {
    s += std::to_string(r.step) + "," + std::to_string(r.stage) + "," + format_double(r.loss) + "," +
         format_double(r.learning_rate);
    for (std::size_t i = 0; i < n_gates; ++i) {
      s += ",";
      if (!r.gates.empty()) s += format_double(r.gates[i]);
    }
    s += "\n";
  }
  return s;
}

LossTrace LossTrace::parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty loss trace");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "step" || header[1] != "stage" || header[2] != "loss" ||
      header[3] != "lr") {
    throw InputError("line 1: loss trace header must start with step,stage,loss,lr");
  }
  LossTrace t;
  t.n_gates = header.size() - 4;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw InputError("line " + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " columns");
    }
    LossRecord r;
    r.step = static_cast<std::size_t>(parse_double(cells[0], lineno));
    r.stage = static_cast<int>(parse_double(cells[1], lineno));
    r.loss = parse_double(cells[2], lineno);
    r.learning_rate = parse_double(cells[3], lineno);
    const bool any = std::any_of(cells.begin() + 4, cells.end(), [](auto& c) { return !c.empty(); });
    if (any) {
      for (std::size_t i = 4; i < cells.size(); ++i) r.gates.push_back(parse_double(cells[i], lineno));
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

template <class T>
StageResult train_stage(LayAlignModel<T>& model, const std::vector<TokenizedExample>& data,
                        const StagePlan& plan, std::size_t first_step,
                        const EpochCallback& on_epoch) {
  plan.validate();
  if (data.empty()) throw ContractError("training set is empty");
  std::vector<Tensor<T>> params;
  std::vector<double> scale;
  for (const auto& [name, t] : model.trainable_parameters()) {
    params.push_back(t);
    const bool cross = name.rfind("aligner.", 0) == 0 || name.rfind("gates.", 0) == 0;
    scale.push_back(cross ? plan.cross_lr_scale : 1.0);
  }
  if (params.empty()) throw ConfigError("no trainable parameters under the active ablations");

  AdamConfig ac;
  ac.learning_rate = plan.learning_rate;
  ac.warmup_ratio = plan.warmup_ratio;
  ac.total_steps = plan.total_steps(data.size());
  ac.clip_norm = plan.clip_norm;
  Adam<T> adam(ac, params, scale);

  StageResult res;
  res.trace.n_gates = model.gates().size();
  const int stage_no = plan.stage == Stage::kTranslation ? 1 : 2;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < plan.epochs && step < ac.total_steps; ++epoch) {
    double epoch_sum = 0.0;
    std::size_t epoch_n = 0;
    for (const auto& idx : epoch_batches(data.size(), plan.batch_size, plan.seed, epoch)) {
      if (step >= ac.total_steps) break;
      std::vector<const TokenizedExample*> rows;
      for (std::size_t i : idx) rows.push_back(&data[i]);
      LossRecord rec;
      rec.step = first_step + step;
      rec.stage = stage_no;
      if (step % plan.snapshot_every == 0 || step + 1 == ac.total_steps) {
        rec.gates = model.gates().snapshot();
      }
      Tape<T> tape;
      {
        TapeScope<T> scope(tape);
        const Tensor<T> loss = model.loss(model.forward(rows, plan.stage));
        require_finite_loss(loss, first_step + step);
        tape.backward(loss);
        rec.loss = static_cast<double>(loss.data()[0]);
      }
      adam.step();
      adam.zero_grad();
      rec.learning_rate = adam.last_learning_rate();
      epoch_sum += rec.loss;
      ++epoch_n;
      res.trace.rows.push_back(std::move(rec));
      ++step;
    }
    res.epoch_means.push_back(epoch_sum / static_cast<double>(epoch_n));
    res.steps = step;
    res.final_loss = res.epoch_means.back();
    if (on_epoch) on_epoch(epoch, res);
  }
  return res;
}

std::vector<PretrainExample> pretrain_examples(const std::vector<ParallelExample>& records,
                                               const Vocabulary& vocab, std::uint64_t seed) {
  std::vector<PretrainExample> out;
  const auto tok = tokenize(records, vocab);
  const auto first_content = static_cast<std::int32_t>(std::size(Vocabulary::kSpecials));
  if (vocab.size() <= static_cast<std::size_t>(first_content)) {
    throw ConfigError("vocabulary has no content tokens");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> noise(first_content,
                                                    static_cast<std::int32_t>(vocab.size()) - 1);
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back({tok[i], Stage::kTranslation, {}});
    if (records[i].stage != Stage::kTask) continue;
    out.push_back({tok[i], Stage::kTask, tok[i].source});
    std::vector<std::int32_t> scrambled(tok[i].source.size());
    for (auto& t : scrambled) t = noise(rng);
    out.push_back({tok[i], Stage::kTask, std::move(scrambled)});
  }
  return out;
}

template <class T>
StageResult pretrain_decoder(Decoder<T>& decoder, const std::vector<PretrainExample>& data,
                             const PretrainPlan& plan) {
  plan.validate();
  if (data.empty()) throw ContractError("pretraining set is empty");
  const DecoderConfig& dc = decoder.config();

  // Batches never mix layouts.
  std::vector<std::vector<std::size_t>> by_stage(2);
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_stage[data[i].stage == Stage::kTask ? 1 : 0].push_back(i);
  }
  const auto batches_for_epoch = [&](std::size_t epoch) {
    std::vector<std::vector<std::size_t>> all;
    for (const auto& group : by_stage) {
      for (auto& b : epoch_batches(group.size(), plan.batch_size, plan.seed, epoch)) {
        for (auto& i : b) i = group[i];
        all.push_back(std::move(b));
      }
    }
    std::mt19937_64 rng(plan.seed * 7777u + epoch);
    std::shuffle(all.begin(), all.end(), rng);
    return all;
  };
  std::size_t per_epoch = 0;
  for (const auto& g : by_stage) per_epoch += (g.size() + plan.batch_size - 1) / plan.batch_size;
  AdamConfig ac;
  ac.learning_rate = plan.learning_rate;
  ac.warmup_ratio = plan.warmup_ratio;
  ac.clip_norm = plan.clip_norm;
  ac.total_steps = per_epoch * plan.epochs;
  if (plan.max_steps > 0) ac.total_steps = std::min(ac.total_steps, plan.max_steps);

  decoder.set_trainable(true);
  std::vector<Tensor<T>> params;
  for (const auto& [name, t] : decoder.named_parameters()) params.push_back(t);
  Adam<T> adam(ac, params);

  StageResult res;
  std::size_t step = 0;
  std::mt19937_64 noise_rng(plan.seed ^ 0x9e3779b97f4a7c15ull);
  try {
    for (std::size_t epoch = 0; epoch < plan.epochs && step < ac.total_steps; ++epoch) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& idx : batches_for_epoch(epoch)) {
        if (step >= ac.total_steps) break;
        const Stage stage = data[idx.front()].stage;
        std::size_t src_len = 0;
        for (std::size_t i : idx) src_len = std::max(src_len, data[i].example.source.size());
        std::vector<std::int32_t> ids(idx.size() * src_len, dc.special.pad);
        std::vector<std::uint8_t> valid(idx.size() * src_len, 0);
        std::vector<std::vector<std::int32_t>> user, targets;
        for (std::size_t b = 0; b < idx.size(); ++b) {
          const auto& ex = data[idx[b]].example;
          for (std::size_t t = 0; t < ex.source.size(); ++t) {
            ids[b * src_len + t] = ex.source[t];
            valid[b * src_len + t] = 1;
          }
          user.push_back(data[idx[b]].user);
          targets.push_back(ex.target);
        }
        LossRecord rec;
        rec.step = step;
        rec.stage = 0;
        Tape<T> tape;
        {
          TapeScope<T> scope(tape);
          Tensor<T> prompt = decoder.embed(ids, {idx.size(), src_len});
          if (plan.prompt_noise > 0.0) {
            prompt = add(prompt, Tensor<T>::randn(prompt.shape(), plan.prompt_noise, noise_rng));
          }
          const auto in = decoder.assemble_input(stage, prompt, valid,
                                                 stage == Stage::kTask ? &user : nullptr, targets);
          const auto out = decoder.forward(in, CrossInputs<T>{});
          const Tensor<T> loss = cross_entropy(out.logits, in.targets, in.loss_mask);
          require_finite_loss(loss, step);
          tape.backward(loss);
          rec.loss = static_cast<double>(loss.data()[0]);
        }
        adam.step();
        adam.zero_grad();
        rec.learning_rate = adam.last_learning_rate();
        sum += rec.loss;
        ++n;
        res.trace.rows.push_back(std::move(rec));
        ++step;
      }
      res.epoch_means.push_back(sum / static_cast<double>(n));
    }
  } catch (...) {
    decoder.set_trainable(false);
    throw;
  }
  decoder.set_trainable(false);
  res.steps = step;
  res.final_loss = res.epoch_means.back();
  return res;
}

const EvalBucket& EvalReport::language(const std::string& name) const {
  for (const auto& b : languages) {
    if (b.name == name) return b;
  }
  throw ContractError("no evaluation bucket for language " + name);
}

std::string EvalReport::to_csv() const {
  const auto acc = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  std::string s = "bucket,tier,examples,correct,accuracy\n";
  for (const auto& b : languages) {
    s += b.name + "," + b.tier + "," + std::to_string(b.examples) + "," + std::to_string(b.correct) +
         "," + acc(b.accuracy) + "\n";
  }
  s += "Avg,aggregate,,," + acc(avg) + "\n";
  s += "Lrl,aggregate,,," + acc(lrl) + "\n";
  s += "Hrl,aggregate,,," + acc(hrl) + "\n";
  return s;
}

EvalReport EvalReport::parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "bucket,tier,examples,correct,accuracy") {
    throw InputError("line 1: unexpected evaluation table header");
  }
  EvalReport r;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 5) throw InputError("line " + std::to_string(lineno) + ": expected 5 columns");
    std::optional<double> acc;
    if (!c[4].empty()) acc = parse_double(c[4], lineno);
    if (c[1] == "aggregate") {
      if (c[0] == "Avg") r.avg = acc;
      else if (c[0] == "Lrl") r.lrl = acc;
      else if (c[0] == "Hrl") r.hrl = acc;
      else throw InputError("line " + std::to_string(lineno) + ": unknown aggregate " + c[0]);
      continue;
    }
    EvalBucket b;
    b.name = c[0];
    b.tier = c[1];
    b.examples = static_cast<std::size_t>(parse_double(c[2], lineno));
    b.correct = static_cast<std::size_t>(parse_double(c[3], lineno));
    b.accuracy = acc;
    r.languages.push_back(std::move(b));
  }
  return r;
}

EvalReport aggregate(const std::vector<Prediction>& predictions,
                     const std::map<std::string, std::string>& tiers) {
  std::map<std::string, EvalBucket> buckets;
  for (const auto& p : predictions) {
    EvalBucket& b = buckets[p.lang];
    b.name = p.lang;
    const auto it = tiers.find(p.lang);
    b.tier = it == tiers.end() ? "unseen" : it->second;
    ++b.examples;
    if (p.correct) ++b.correct;
  }
  EvalReport r;
  r.predictions = predictions;
  const auto mean_of = [&](const std::function<bool(const EvalBucket&)>& pick) -> std::optional<double> {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& b : r.languages) {
      if (pick(b)) {
        s += *b.accuracy;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
  };
  for (auto& [name, b] : buckets) {
    b.accuracy = 100.0 * static_cast<double>(b.correct) / static_cast<double>(b.examples);
    r.languages.push_back(b);
  }
  r.avg = mean_of([](const EvalBucket& b) { return b.tier != "unseen"; });
  r.lrl = mean_of([](const EvalBucket& b) { return b.tier == "low"; });
  r.hrl = mean_of([](const EvalBucket& b) { return b.tier == "high"; });
  return r;
}

template <class T>
EvalReport evaluate(const LayAlignModel<T>& model, const std::vector<TokenizedExample>& data,
                    const Vocabulary& vocab, const std::map<std::string, std::string>& tiers,
                    Stage stage, std::size_t max_new_tokens, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("evaluation batch size must be positive");
  std::vector<Prediction> preds;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    std::vector<const TokenizedExample*> rows;
    for (std::size_t j = i; j < std::min(data.size(), i + batch_size); ++j) rows.push_back(&data[j]);
    const auto out = model.generate(rows, stage, max_new_tokens);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      Prediction p;
      p.lang = rows[b]->lang;
      p.id = rows[b]->id;
      p.expected = normalize_whitespace(vocab.decode(rows[b]->target));
      p.predicted = normalize_whitespace(vocab.decode(out[b]));
      p.correct = p.expected == p.predicted;
      preds.push_back(std::move(p));
    }
  }
  return aggregate(preds, tiers);
}

template StageResult train_stage(LayAlignModel<float>&, const std::vector<TokenizedExample>&,
                                 const StagePlan&, std::size_t, const EpochCallback&);
template StageResult train_stage(LayAlignModel<double>&, const std::vector<TokenizedExample>&,
                                 const StagePlan&, std::size_t, const EpochCallback&);
template StageResult pretrain_decoder(Decoder<float>&, const std::vector<PretrainExample>&,
                                      const PretrainPlan&);
template StageResult pretrain_decoder(Decoder<double>&, const std::vector<PretrainExample>&,
                                      const PretrainPlan&);
template EvalReport evaluate(const LayAlignModel<float>&, const std::vector<TokenizedExample>&,
                             const Vocabulary&, const std::map<std::string, std::string>&, Stage,
                             std::size_t, std::size_t);
template EvalReport evaluate(const LayAlignModel<double>&, const std::vector<TokenizedExample>&,
                             const Vocabulary&, const std::map<std::string, std::string>&, Stage,
                             std::size_t, std::size_t);

}  // namespace layalign
