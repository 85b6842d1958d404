#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "compprobe/dataset.hpp"
#include "compprobe/error.hpp"
#include "compprobe/model.hpp"
#include "compprobe/parallel.hpp"
#include "compprobe/rng.hpp"

namespace compprobe::train {

struct TrainConfig {
  std::int64_t steps = 8000;
  std::size_t batch_size = 64;
  std::int64_t warmup_steps = 500;
  double peak_lr = 1e-3;
  std::string decay = "inverse_sqrt";  // or "constant"
  std::int64_t eval_every = 1000;
  std::int64_t log_every = 50;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;
  std::string dtype = "float32";
  std::size_t eval_batch = 64;
  // Optional early stop once every gate template reaches this exact match.
  std::optional<double> stop_at_exact_match;
  std::vector<int> gate_templates{1, 5};
  // Template weight in the training mixture is (set size)^mixture_power:
  // 0 samples templates uniformly, 1 samples problems uniformly.
  double mixture_power = 0.0;
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;  // checkpoints and logs; empty disables file output
  model::ModelConfig model;

  void validate() const;
  double learning_rate(std::int64_t step) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
// Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EvalReport {
  std::string split_tag;
  std::size_t n = 0;
  double exact_match = 0.0;
  std::map<int, double> per_template;
  std::map<int, std::size_t> per_template_n;
  std::int64_t step = 0;
};

nlohmann::json to_json(const EvalReport& r);

struct LogRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

class NonFiniteLossError : public Error {
 public:
  // ids are "t<template>:<problem id>"
  NonFiniteLossError(std::int64_t step, std::vector<std::string> ids);
  std::int64_t step() const { return step_; }
  const std::vector<std::string>& problem_ids() const { return ids_; }

 private:
  std::int64_t step_;
  std::vector<std::string> ids_;
};

class SplitOverlapError : public Error {
 public:
  SplitOverlapError(int template_id, std::vector<dataset::Operands> overlap);
  const std::vector<dataset::Operands>& overlap() const { return overlap_; }

 private:
  std::vector<dataset::Operands> overlap_;
};

// Throws SplitOverlapError when any operand vector appears in both lists for
// the same template.
void check_disjoint(std::span<const dataset::ProblemSet> a, std::span<const dataset::ProblemSet> b);

struct Batch {
  std::vector<const dataset::Problem*> problems;
  std::vector<std::string> questions;
  std::vector<std::string> answers;
  model::TokenBatch tokens;  // questions padded to the longest in the batch
  std::size_t epoch = 0;
};

// Seeded per-epoch shuffles of one set, cut into batches; the last batch of
// an epoch may be short.
class Batcher {
 public:
  Batcher(const dataset::ProblemSet& set, std::size_t batch_size, std::uint64_t seed,
          model::Vocab vocab = model::Vocab::standard());
  Batch next();
  std::size_t epoch() const { return epoch_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  void reshuffle();

  const dataset::ProblemSet* set_;
  std::size_t batch_size_;
  Rng rng_;
  model::Vocab vocab_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// Training stream over several sets: each batch slot picks a set with
// probability proportional to size^power, then takes that set's next problem
// in its own reshuffled epoch order.
class MixtureSampler {
 public:
  MixtureSampler(std::span<const dataset::ProblemSet> sets, std::size_t batch_size, std::uint64_t seed,
                 model::Vocab vocab = model::Vocab::standard(), double power = 0.0);
  Batch next();

 private:
  struct Stream {
    const dataset::ProblemSet* set;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::size_t epoch = 0;
  };
  const dataset::Problem* draw(Stream& s);

  std::vector<Stream> streams_;
  std::vector<double> cumulative_;  // empty when sets are drawn uniformly
  std::size_t batch_size_;
  Rng rng_;
  model::Vocab vocab_;
};

Batch make_batch(std::vector<const dataset::Problem*> problems, const model::Vocab& vocab);

// Scores predictions against reference answers, grouped per template.
EvalReport score(std::span<const dataset::ProblemSet> sets, const std::vector<std::vector<std::string>>& predictions,
                 std::string split_tag, std::int64_t step);

// Greedy-decodes every problem in fixed-size chunks; chunk boundaries do not
// depend on `threads`. Model needs greedy_decode(span<const string>).
template <typename Model>
std::vector<std::vector<std::string>> predict(const Model& model, std::span<const dataset::ProblemSet> sets,
                                              std::size_t chunk, int threads) {
  struct Job {
    std::size_t set, begin, end;
  };
  std::vector<Job> jobs;
  std::vector<std::vector<std::string>> out(sets.size());
  for (std::size_t s = 0; s < sets.size(); ++s) {
    out[s].resize(sets[s].problems.size());
    for (std::size_t b = 0; b < sets[s].problems.size(); b += chunk)
      jobs.push_back({s, b, std::min(b + chunk, sets[s].problems.size())});
  }
  parallel_for(jobs.size(), threads, [&](std::size_t j) {
    const Job& job = jobs[j];
    std::vector<std::string> qs;
    for (std::size_t i = job.begin; i < job.end; ++i) qs.push_back(sets[job.set].problems[i].question);
    const auto answers = model.greedy_decode(std::span<const std::string>(qs));
    for (std::size_t i = job.begin; i < job.end; ++i) out[job.set][i] = answers[i - job.begin];
  });
  return out;
}

template <typename Model>
EvalReport evaluate_exact_match(const Model& model, std::span<const dataset::ProblemSet> sets, std::int64_t step = 0,
                                int threads = 1, std::size_t chunk = 64) {
  const std::string tag = sets.empty() ? "heldout" : std::string(dataset::to_string(sets.front().split));
  return score(sets, predict(model, sets, chunk, threads), tag, step);
}

struct TrainResult {
  std::vector<EvalReport> history;
  std::vector<LogRecord> log;
  std::int64_t steps_run = 0;
  std::filesystem::path final_checkpoint;
};

// Teacher-forced training. With cfg.out_dir set, writes checkpoints at every
// evaluation point plus final.ckpt, train_log.jsonl and eval_history.jsonl.
template <typename T>
TrainResult train_loop(model::Transformer<T>& model, const TrainConfig& cfg,
                       std::span<const dataset::ProblemSet> train_sets,
                       std::span<const dataset::ProblemSet> heldout_sets, int threads = 1,
                       const std::function<void(const LogRecord&)>& on_log = {});

}  // namespace compprobe::train
