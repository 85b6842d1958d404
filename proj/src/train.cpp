#include "compprobe/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "compprobe/checkpoint.hpp"
#include "compprobe/optim.hpp"

namespace compprobe {

int resolve_threads(std::optional<int> flag) {
  if (flag) return std::max(1, *flag);
  if (const char* env = std::getenv("COMPPROBE_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n >= 1) return static_cast<int>(n);
  }
  return 1;
}

}  // namespace compprobe

namespace compprobe::train {

using nlohmann::json;
using tensor::Tensor;

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw Error("invalid train config: " + what);
  };
  need(steps >= 0, "steps must be non-negative");
  need(batch_size >= 1, "batch_size must be positive");
  need(warmup_steps >= 1, "warmup_steps must be positive");
  need(peak_lr > 0, "peak_lr must be positive");
  need(decay == "inverse_sqrt" || decay == "constant", "decay must be inverse_sqrt or constant");
  need(log_every >= 1 && eval_every >= 1, "log_every and eval_every must be positive");
  need(eval_every % log_every == 0, "eval_every must be a multiple of log_every");
  need(dtype == "float32" || dtype == "float64", "dtype must be float32 or float64");
  need(clip_norm >= 0, "clip_norm must be non-negative");
  need(eval_batch >= 1, "eval_batch must be positive");
  need(mixture_power >= 0 && mixture_power <= 1, "mixture_power must be in [0, 1]");
  if (stop_at_exact_match) need(*stop_at_exact_match > 0 && *stop_at_exact_match <= 1, "stop_at_exact_match in (0,1]");
  model.validate();
}

double TrainConfig::learning_rate(std::int64_t step) const {
  const double s = static_cast<double>(std::max<std::int64_t>(step, 1));
  const double w = static_cast<double>(warmup_steps);
  if (s < w) return peak_lr * s / w;
  return decay == "constant" ? peak_lr : peak_lr * std::sqrt(w / s);
}

json to_json(const TrainConfig& c) {
  json j = {{"steps", c.steps},
            {"batch_size", c.batch_size},
            {"warmup_steps", c.warmup_steps},
            {"peak_lr", c.peak_lr},
            {"decay", c.decay},
            {"eval_every", c.eval_every},
            {"log_every", c.log_every},
            {"seed", c.seed},
            {"clip_norm", c.clip_norm},
            {"dtype", c.dtype},
            {"eval_batch", c.eval_batch},
            {"gate_templates", c.gate_templates},
            {"mixture_power", c.mixture_power},
            {"data_dir", c.data_dir.string()},
            {"out_dir", c.out_dir.string()},
            {"model", model::to_json(c.model)}};
  j["stop_at_exact_match"] = c.stop_at_exact_match ? json(*c.stop_at_exact_match) : json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.decay = j.value("decay", c.decay);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.log_every = j.value("log_every", c.log_every);
  c.seed = j.value("seed", c.seed);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.dtype = j.value("dtype", c.dtype);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  c.gate_templates = j.value("gate_templates", c.gate_templates);
  c.mixture_power = j.value("mixture_power", c.mixture_power);
  if (j.contains("stop_at_exact_match") && !j.at("stop_at_exact_match").is_null())
    c.stop_at_exact_match = j.at("stop_at_exact_match").get<double>();
  c.data_dir = j.value("data_dir", std::string());
  c.out_dir = j.value("out_dir", std::string());
  if (j.contains("model")) c.model = model::config_from_json(j.at("model"));
  c.validate();
  return c;
}

json to_json(const EvalReport& r) {
  json per = json::object(), per_n = json::object();
  for (const auto& [t, acc] : r.per_template) per[std::to_string(t)] = acc;
  for (const auto& [t, n] : r.per_template_n) per_n[std::to_string(t)] = n;
  return {{"split_tag", r.split_tag}, {"step", r.step},          {"n", r.n},
          {"exact_match", r.exact_match}, {"per_template", per}, {"per_template_n", per_n}};
}

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? "," : "") << ids[i];
  return os.str();
}

std::string describe_overlap(int template_id, const std::vector<dataset::Operands>& overlap) {
  std::ostringstream os;
  os << "split overlap in template " << template_id << ": " << overlap.size() << " operand vectors";
  for (const auto& v : overlap) {
    os << "\n  (";
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << ")";
  }
  return os.str();
}

}  // namespace

NonFiniteLossError::NonFiniteLossError(std::int64_t step, std::vector<std::string> ids)
    : Error("non-finite loss at step " + std::to_string(step) + ", batch problem ids [" + join_ids(ids) + "]"),
      step_(step),
      ids_(std::move(ids)) {}

SplitOverlapError::SplitOverlapError(int template_id, std::vector<dataset::Operands> overlap)
    : Error(describe_overlap(template_id, overlap)), overlap_(std::move(overlap)) {}

void check_disjoint(std::span<const dataset::ProblemSet> a, std::span<const dataset::ProblemSet> b) {
  std::map<int, std::set<dataset::Operands>> seen;
  for (const auto& s : a)
    for (const auto& p : s.problems) seen[p.template_id].insert(p.operands);
  std::map<int, std::set<dataset::Operands>> overlap;
  for (const auto& s : b)
    for (const auto& p : s.problems)
      if (seen[p.template_id].count(p.operands)) overlap[p.template_id].insert(p.operands);
  if (!overlap.empty()) {
    const auto& [t, ops] = *overlap.begin();
    throw SplitOverlapError(t, {ops.begin(), ops.end()});
  }
}

Batch make_batch(std::vector<const dataset::Problem*> problems, const model::Vocab& vocab) {
  Batch b;
  b.problems = std::move(problems);
  std::size_t width = 0;
  for (const auto* p : b.problems) {
    b.questions.push_back(p->question);
    b.answers.push_back(std::to_string(p->answer));
    width = std::max(width, p->question.size());
  }
  b.tokens.width = width;
  b.tokens.ids.assign(b.problems.size() * width, model::kPad);
  for (std::size_t r = 0; r < b.problems.size(); ++r) {
    const auto ids = vocab.encode(b.questions[r]);
    std::copy(ids.begin(), ids.end(), b.tokens.ids.begin() + static_cast<std::ptrdiff_t>(r * width));
    b.tokens.lengths.push_back(ids.size());
  }
  return b;
}

Batcher::Batcher(const dataset::ProblemSet& set, std::size_t batch_size, std::uint64_t seed, model::Vocab vocab)
    : set_(&set), batch_size_(batch_size), rng_(seed), vocab_(std::move(vocab)) {
  if (batch_size_ == 0) throw Error("batch_size must be positive");
  if (set.problems.empty()) throw Error("cannot batch an empty problem set");
  reshuffle();
}

void Batcher::reshuffle() {
  order_.resize(set_->problems.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  rng_.shuffle(std::span<std::size_t>(order_));
  cursor_ = 0;
}

Batch Batcher::next() {
  if (cursor_ == order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
  std::vector<const dataset::Problem*> picked;
  for (std::size_t i = cursor_; i < end; ++i) picked.push_back(&set_->problems[order_[i]]);
  cursor_ = end;
  Batch b = make_batch(std::move(picked), vocab_);
  b.epoch = epoch_;
  return b;
}

MixtureSampler::MixtureSampler(std::span<const dataset::ProblemSet> sets, std::size_t batch_size, std::uint64_t seed,
                               model::Vocab vocab, double power)
    : batch_size_(batch_size), rng_(seed), vocab_(std::move(vocab)) {
  if (batch_size_ == 0) throw Error("batch_size must be positive");
  for (const auto& s : sets)
    if (!s.problems.empty()) streams_.push_back({&s, {}, 0, 0});
  if (streams_.empty()) throw Error("cannot sample from empty training sets");
  for (auto& s : streams_) {
    s.order.resize(s.set->problems.size());
    for (std::size_t i = 0; i < s.order.size(); ++i) s.order[i] = i;
    rng_.shuffle(std::span<std::size_t>(s.order));
  }
  if (power != 0.0) {
    double total = 0;
    for (const auto& s : streams_) cumulative_.push_back(total += std::pow(static_cast<double>(s.order.size()), power));
    for (auto& c : cumulative_) c /= total;
  }
}

const dataset::Problem* MixtureSampler::draw(Stream& s) {
  if (s.cursor == s.order.size()) {
    rng_.shuffle(std::span<std::size_t>(s.order));
    s.cursor = 0;
    ++s.epoch;
  }
  return &s.set->problems[s.order[s.cursor++]];
}

Batch MixtureSampler::next() {
  std::vector<const dataset::Problem*> picked;
  picked.reserve(batch_size_);
  for (std::size_t i = 0; i < batch_size_; ++i) {
    std::size_t k = 0;
    if (cumulative_.empty()) {
      k = rng_.below(streams_.size());
    } else {
      const double u = rng_.uniform();
      k = static_cast<std::size_t>(std::upper_bound(cumulative_.begin(), cumulative_.end(), u) - cumulative_.begin());
      k = std::min(k, streams_.size() - 1);
    }
    picked.push_back(draw(streams_[k]));
  }
  return make_batch(std::move(picked), vocab_);
}

EvalReport score(std::span<const dataset::ProblemSet> sets, const std::vector<std::vector<std::string>>& predictions,
                 std::string split_tag, std::int64_t step) {
  EvalReport r;
  r.split_tag = std::move(split_tag);
  r.step = step;
  std::map<int, std::size_t> correct;
  std::size_t total_correct = 0;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    for (std::size_t i = 0; i < sets[s].problems.size(); ++i) {
      const auto& p = sets[s].problems[i];
      const bool ok = predictions.at(s).at(i) == std::to_string(p.answer);
      ++r.per_template_n[p.template_id];
      ++r.n;
      if (ok) {
        ++correct[p.template_id];
        ++total_correct;
      }
    }
  }
  for (const auto& [t, n] : r.per_template_n)
    r.per_template[t] = static_cast<double>(correct[t]) / static_cast<double>(n);
  r.exact_match = r.n ? static_cast<double>(total_correct) / static_cast<double>(r.n) : 0.0;
  return r;
}

namespace {

std::string step_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_step%06lld.ckpt", static_cast<long long>(step));
  return buf;
}

bool gate_met(const TrainConfig& cfg, const EvalReport& r) {
  if (!cfg.stop_at_exact_match) return false;
  for (int t : cfg.gate_templates) {
    auto it = r.per_template.find(t);
    if (it == r.per_template.end() || it->second < *cfg.stop_at_exact_match) return false;
  }
  return true;
}

}  // namespace

template <typename T>
TrainResult train_loop(model::Transformer<T>& model, const TrainConfig& cfg,
                       std::span<const dataset::ProblemSet> train_sets,
                       std::span<const dataset::ProblemSet> heldout_sets, int threads,
                       const std::function<void(const LogRecord&)>& on_log) {
  cfg.validate();
  check_disjoint(train_sets, heldout_sets);
  const model::Vocab& vocab = model.config().vocab;
  for (const auto& s : train_sets)
    for (const auto& p : s.problems) vocab.encode(p.question);

  TrainResult result;
  std::ofstream log_file, eval_file;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    log_file.open(cfg.out_dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
    eval_file.open(cfg.out_dir / "eval_history.jsonl", std::ios::binary | std::ios::trunc);
    if (!log_file || !eval_file) throw Error("cannot write logs in " + cfg.out_dir.string());
  }

  auto evaluate_at = [&](std::int64_t step) {
    EvalReport r = evaluate_exact_match(model, heldout_sets, step, threads, cfg.eval_batch);
    r.split_tag = "heldout";
    result.history.push_back(r);
    if (eval_file) eval_file << to_json(r).dump() << '\n' << std::flush;
    if (!cfg.out_dir.empty()) model::save_checkpoint(cfg.out_dir / step_name(step), model);
    return gate_met(cfg, r);
  };

  bool stop = evaluate_at(0);
  std::vector<Tensor<T>> params = model.parameters();
  optim::Adam<T> adam(params, {cfg.peak_lr});
  std::unique_ptr<MixtureSampler> sampler;
  if (cfg.steps > 0 && !stop) sampler = std::make_unique<MixtureSampler>(train_sets, cfg.batch_size, cfg.seed, vocab, cfg.mixture_power);

  const auto start = std::chrono::steady_clock::now();
  double window_loss = 0.0;
  std::int64_t window_n = 0;
  for (std::int64_t step = 1; step <= cfg.steps && !stop; ++step) {
    const Batch batch = sampler->next();
    Tensor<T> loss = model.loss(batch.questions, batch.answers);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      std::vector<std::string> ids;
      for (const auto* p : batch.problems) ids.push_back("t" + std::to_string(p->template_id) + ":" + std::to_string(p->id));
      throw NonFiniteLossError(step, ids);
    }
    tensor::backward(loss);
    if (cfg.clip_norm > 0) optim::clip_grad_norm(params, cfg.clip_norm);
    const double lr = cfg.learning_rate(step);
    adam.step(lr);
    adam.zero_grad();
    result.steps_run = step;
    window_loss += value;
    ++window_n;

    if (step % cfg.log_every == 0 || step == cfg.steps) {
      LogRecord rec;
      rec.step = step;
      rec.loss = window_loss / static_cast<double>(window_n);
      rec.lr = lr;
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      window_loss = 0.0;
      window_n = 0;
      result.log.push_back(rec);
      if (log_file)
        log_file << json{{"step", rec.step}, {"loss", rec.loss}, {"lr", rec.lr}, {"wall_ms", rec.wall_ms}}.dump()
                 << '\n' << std::flush;
      if (on_log) on_log(rec);
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) stop = evaluate_at(step);
  }

  if (!cfg.out_dir.empty()) {
    result.final_checkpoint = cfg.out_dir / "final.ckpt";
    model::save_checkpoint(result.final_checkpoint, model);
  }
  return result;
}

template TrainResult train_loop(model::Transformer<float>&, const TrainConfig&, std::span<const dataset::ProblemSet>,
                                std::span<const dataset::ProblemSet>, int,
                                const std::function<void(const LogRecord&)>&);
template TrainResult train_loop(model::Transformer<double>&, const TrainConfig&, std::span<const dataset::ProblemSet>,
                                std::span<const dataset::ProblemSet>, int,
                                const std::function<void(const LogRecord&)>&);

}  // namespace compprobe::train
