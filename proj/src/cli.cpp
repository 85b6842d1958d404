#include "compprobe/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "compprobe/checkpoint.hpp"
#include "compprobe/checksum.hpp"
#include "compprobe/dataset.hpp"
#include "compprobe/manifest.hpp"
#include "compprobe/parallel.hpp"
#include "compprobe/probe.hpp"
#include "compprobe/probe_io.hpp"
#include "compprobe/train.hpp"

namespace compprobe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

class CodedError : public Error {
 public:
  CodedError(int code, const std::string& what) : Error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

std::vector<int> parse_templates(const std::string& s) {
  if (s == "all") return {1, 2, 3, 4, 5, 6};
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int t = 0;
    try {
      t = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.empty() || t < 1 || t > expr::kTemplateCount)
      throw UsageError("--template must be 1..6, a comma list, or all; got '" + s + "'");
    out.push_back(t);
  }
  if (out.empty()) throw UsageError("--template is empty");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

dataset::Split parse_split_flag(const std::string& s) {
  try {
    return dataset::parse_split(s);
  } catch (const std::exception&) {
    throw UsageError("--split must be train, heldout or probe; got '" + s + "'");
  }
}

std::vector<fs::path> expand_inputs(const std::vector<std::string>& paths) {
  std::vector<fs::path> out;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      for (auto& f : dataset::list_sets(p)) out.push_back(f);
    } else if (fs::exists(p)) {
      out.push_back(p);
    } else {
      throw Error("no such file or directory: " + p);
    }
  }
  return out;
}

struct LoadedSet {
  fs::path path;
  dataset::ProblemSet set;
};

std::vector<LoadedSet> load_sets(const std::vector<fs::path>& files) {
  std::vector<LoadedSet> out;
  for (const auto& f : files) out.push_back({f, dataset::read_set(f)});
  return out;
}

std::vector<LoadedSet> load_split(const fs::path& dir, dataset::Split split) {
  std::vector<LoadedSet> out;
  for (const auto& f : dataset::list_sets(dir)) {
    if (f.filename().string().rfind(std::string(dataset::to_string(split)) + "_", 0) != 0) continue;
    out.push_back({f, dataset::read_set(f)});
  }
  return out;
}

std::vector<dataset::ProblemSet> sets_of(const std::vector<LoadedSet>& loaded) {
  std::vector<dataset::ProblemSet> out;
  for (const auto& l : loaded) out.push_back(l.set);
  return out;
}

void write_text(const fs::path& path, const std::string& text) { probe::write_file(path, text); }

std::string overlap_message(const train::SplitOverlapError& e) { return e.what(); }

// ------------------------------------------------------------------ gen-data

struct GenArgs {
  std::string templates;
  std::string count = "200";
  std::uint64_t seed = 7;
  std::string split = "probe";
  std::string sampling;  // balanced for probe sets, uniform otherwise
  std::vector<std::string> exclude;
  std::string out;
};

int cmd_gen_data(const GenArgs& a, std::ostream& out) {
  const auto templates = parse_templates(a.templates);
  const auto split = parse_split_flag(a.split);
  std::optional<std::size_t> count;
  if (a.count != "all") {
    std::size_t used = 0;
    long long n = 0;
    try {
      n = std::stoll(a.count, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != a.count.size() || n < 1) throw UsageError("--count must be a positive integer or all");
    count = static_cast<std::size_t>(n);
  }
  const std::string sampling = a.sampling.empty() ? (split == dataset::Split::probe ? "balanced" : "uniform") : a.sampling;
  if (sampling != "balanced" && sampling != "uniform")
    throw UsageError("--sampling must be balanced or uniform; got '" + sampling + "'");
  fs::create_directories(a.out);

  const auto excl_files = expand_inputs(a.exclude);
  std::vector<LoadedSet> excluded;
  for (const auto& f : excl_files) {
    bool self = false;
    for (int t : templates)
      if (fs::weakly_canonical(f) == fs::weakly_canonical(fs::path(a.out) / dataset::set_filename(split, t)))
        self = true;
    if (!self) excluded.push_back({f, dataset::read_set(f)});
  }

  Manifest m;
  m.command = "gen-data";
  m.config = {{"templates", templates},
              {"count", a.count},
              {"seed", a.seed},
              {"split", dataset::to_string(split)},
              {"sampling", sampling}};
  for (const auto& e : excluded) m.inputs.push_back(e.path);
  for (int t : templates) {
    const auto& tmpl = expr::get_template(t);
    std::set<dataset::Operands> exclude;
    for (const auto& e : excluded)
      if (e.set.template_id == t)
        for (const auto& p : e.set.problems) exclude.insert(p.operands);
    const dataset::ProblemSet set = !count                 ? dataset::full_set(tmpl, a.seed, exclude, split)
                                    : sampling == "balanced" ? dataset::sample_set(tmpl, *count, a.seed, exclude, split)
                                                             : dataset::uniform_set(tmpl, *count, a.seed, exclude, split);
    const std::string name = dataset::set_filename(split, t);
    dataset::write_set(fs::path(a.out) / name, set);
    m.outputs.push_back(name);
    out << name << " " << set.problems.size() << " " << file_crc32(fs::path(a.out) / name) << "\n";
  }
  std::string tag(dataset::to_string(split));
  if (templates.size() != static_cast<std::size_t>(expr::kTemplateCount))
    for (int t : templates) tag += "_t" + std::to_string(t);
  write_manifest(fs::path(a.out) / ("manifest_gen-data_" + tag + ".json"), m, a.out);
  return kOk;
}

// ------------------------------------------------------------------ audit

struct AuditArgs {
  std::vector<std::string> data;
  std::vector<std::string> exclude;
};

int cmd_audit(const AuditArgs& a, std::ostream& out) {
  const auto loaded = load_sets(expand_inputs(a.data));
  const auto excluded = load_sets(expand_inputs(a.exclude));
  if (loaded.empty()) throw Error("no problem files to audit");
  bool all_ok = true;
  for (const auto& l : loaded) {
    const auto& set = l.set;
    const auto& tmpl = expr::get_template(set.template_id);
    std::size_t bad_answer = 0, inexact = 0, duplicates = 0;
    std::set<dataset::Operands> seen;
    for (const auto& p : set.problems) {
      if (p.answer < dataset::kMinAnswer || p.answer > dataset::kMaxAnswer) ++bad_answer;
      const auto e = expr::instantiate(tmpl, p.operands);
      const auto v = expr::evaluate(e);
      if (!expr::divisions_exact(e) || !v.is_integer() || v.num != p.answer) ++inexact;
      if (!seen.insert(p.operands).second) ++duplicates;
    }
    std::set<dataset::Operands> excl;
    for (const auto& e : excluded)
      if (e.set.template_id == set.template_id)
        for (const auto& p : e.set.problems) excl.insert(p.operands);
    const auto bal = dataset::check_balance(set, excl);
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& [ans, c] : bal.counts) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    // Only probe sets are drawn balanced; other splits report the histogram.
    const bool balanced = set.split == dataset::Split::probe;
    const bool ok = bad_answer == 0 && inexact == 0 && duplicates == 0 && (bal.ok || !balanced);
    all_ok = all_ok && ok;
    out << l.path.filename().string() << " " << (ok ? "OK" : "FAIL") << " template=" << set.template_id
        << " split=" << dataset::to_string(set.split) << " n=" << set.problems.size()
        << " answers_out_of_range=" << bad_answer << " inexact=" << inexact << " duplicates=" << duplicates
        << " bins=" << bal.counts.size() << " min_bin=" << (bal.counts.empty() ? 0 : lo) << " max_bin=" << hi
        << " slack=" << bal.slack << " balance=" << (!balanced ? "unchecked" : bal.ok ? "ok" : "violated");
    if (balanced && !bal.ok) out << " (" << bal.detail << ")";
    out << "\n";
  }
  // Cross-split disjointness per template.
  for (std::size_t i = 0; i < loaded.size(); ++i)
    for (std::size_t j = i + 1; j < loaded.size(); ++j) {
      const auto& x = loaded[i].set;
      const auto& y = loaded[j].set;
      if (x.template_id != y.template_id || x.split == y.split) continue;
      train::check_disjoint(std::span<const dataset::ProblemSet>(&x, 1), std::span<const dataset::ProblemSet>(&y, 1));
    }
  return all_ok ? kOk : kFailure;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::int64_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::size_t> batch_size;
  std::optional<std::int64_t> eval_every;
  bool quiet = false;
};

template <typename T>
train::TrainResult run_training(const train::TrainConfig& cfg, const std::vector<dataset::ProblemSet>& train_sets,
                                const std::vector<dataset::ProblemSet>& heldout, int threads, bool quiet,
                                std::ostream& err) {
  model::Transformer<T> m(cfg.model);
  return train::train_loop(m, cfg, train_sets, heldout, threads, [&](const train::LogRecord& r) {
    if (!quiet)
      err << "step " << r.step << " loss " << probe::format_double(r.loss) << " lr "
          << probe::format_double(r.lr) << "\n";
  });
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  json j = json::parse(probe::read_file(a.config));
  train::TrainConfig cfg = train::train_config_from_json(j);
  if (a.steps) cfg.steps = *a.steps;
  if (a.seed) cfg.seed = *a.seed;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.eval_every) cfg.eval_every = *a.eval_every;
  cfg.data_dir = a.data;
  cfg.out_dir = a.out;
  cfg.validate();
  const int threads = resolve_threads(a.threads);

  const auto train_loaded = load_split(a.data, dataset::Split::train);
  const auto probe_loaded = load_split(a.data, dataset::Split::probe);
  auto heldout_loaded = load_split(a.data, dataset::Split::heldout);
  if (train_loaded.empty()) throw Error("no train_t*.jsonl files in " + a.data);
  const bool heldout_is_probe = heldout_loaded.empty();
  if (heldout_is_probe) heldout_loaded = probe_loaded;
  if (heldout_loaded.empty()) throw Error("no heldout or probe files in " + a.data);
  const auto train_sets = sets_of(train_loaded);
  const auto probe_sets = sets_of(probe_loaded);
  const auto heldout_sets = sets_of(heldout_loaded);
  train::check_disjoint(train_sets, probe_sets);
  train::check_disjoint(train_sets, heldout_sets);

  const train::TrainResult res =
      cfg.dtype == "float64" ? run_training<double>(cfg, train_sets, heldout_sets, threads, a.quiet, err)
                             : run_training<float>(cfg, train_sets, heldout_sets, threads, a.quiet, err);

  Manifest m;
  m.command = "train";
  json resolved = train::to_json(cfg);
  resolved.erase("out_dir");
  m.config = resolved;
  m.inputs.push_back(a.config);
  for (const auto& l : train_loaded) m.inputs.push_back(l.path);
  for (const auto& l : heldout_loaded) m.inputs.push_back(l.path);
  if (!heldout_is_probe)
    for (const auto& l : probe_loaded) m.inputs.push_back(l.path);
  std::vector<std::string> ckpts;
  for (const auto& e : fs::directory_iterator(a.out)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt_step", 0) == 0) ckpts.push_back(name);
  }
  std::sort(ckpts.begin(), ckpts.end());
  m.outputs = ckpts;
  m.outputs.push_back("final.ckpt");
  m.outputs.push_back("eval_history.jsonl");
  m.volatile_outputs.push_back("train_log.jsonl");
  json history = json::array();
  for (const auto& r : res.history) history.push_back(train::to_json(r));
  m.extra = {{"steps_run", res.steps_run}, {"heldout_split", heldout_is_probe ? "probe" : "heldout"},
             {"eval_history", history}};
  write_manifest(fs::path(a.out) / "manifest.json", m, a.out);
  out << train::to_json(res.history.back()).dump() << "\n";
  return kOk;
}

// ------------------------------------------------------------------ evaluate

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> data;
  std::optional<int> threads;
  std::string out;
};

void check_vocab(const model::Vocab& vocab, const std::vector<LoadedSet>& sets) {
  for (const auto& l : sets)
    for (const auto& p : l.set.problems)
      for (char c : p.question + std::to_string(p.answer))
        if (!vocab.contains(c))
          throw CodedError(kVocabMismatch, "checkpoint vocabulary lacks '" + std::string(1, c) + "' used in " +
                                               l.path.string());
}

template <typename T>
train::EvalReport evaluate_with(const model::ModelCheckpoint& ckpt, const std::vector<dataset::ProblemSet>& sets,
                                int threads) {
  const auto m = model::model_from_checkpoint<T>(ckpt);
  return train::evaluate_exact_match(m, std::span<const dataset::ProblemSet>(sets), 0, threads);
}

bool checkpoint_is_double(const model::ModelCheckpoint& ckpt) {
  return !ckpt.tensors.empty() && ckpt.tensors.front().dtype == model::Dtype::float64;
}

int cmd_evaluate(const EvalArgs& a, std::ostream& out) {
  const auto ckpt = model::read_checkpoint(a.checkpoint);
  const auto loaded = load_sets(expand_inputs(a.data));
  if (loaded.empty()) throw Error("no problem files to evaluate");
  check_vocab(ckpt.config.vocab, loaded);
  const auto sets = sets_of(loaded);
  const int threads = resolve_threads(a.threads);
  train::EvalReport r = checkpoint_is_double(ckpt) ? evaluate_with<double>(ckpt, sets, threads)
                                                   : evaluate_with<float>(ckpt, sets, threads);
  const std::string text = train::to_json(r).dump(2) + "\n";
  if (a.out.empty()) {
    out << text;
  } else {
    write_text(a.out, text);
  }
  return kOk;
}

// ------------------------------------------------------------------ probe

struct ProbeArgs {
  std::string checkpoint;
  std::vector<std::string> data;
  std::string kind = "query";
  std::string layer;
  std::size_t n_perm = 1000;
  std::uint64_t seed = 1;
  std::optional<std::size_t> max_pairs;
  std::optional<int> threads;
  std::string out;
};

struct TemplateProbe {
  int template_id = 0;
  train::EvalReport accuracy;
  std::vector<probe::DigitProbe> digits;
  std::vector<probe::OperatorProbe> operators;  // one per operator layer
  std::vector<probe::CurvePoint> curve;
  std::vector<probe::PositionMap> maps;
};

template <typename T>
TemplateProbe probe_one(const model::Transformer<T>& m, const dataset::ProblemSet& set, model::Kind kind,
                        const std::vector<int>& digit_layers, const std::vector<int>& op_layers,
                        const probe::ProbeOptions& opts) {
  TemplateProbe tp;
  tp.template_id = set.template_id;
  tp.accuracy = train::evaluate_exact_match(m, std::span<const dataset::ProblemSet>(&set, 1), 0, 1);
  const probe::ActivationTable table = probe::extract(m, set, 1);
  for (int l : digit_layers) tp.digits.push_back(probe::digit_probe(table, set, l, kind, opts));
  for (int l : op_layers) {
    tp.operators.push_back(probe::operator_probe(table, set, l, kind, opts));
    tp.maps.push_back(probe::position_map(table, set, l, kind, opts));
  }
  const int n_ops = static_cast<int>(set.problems.front().annotations.size());
  for (int k = 1; k <= n_ops; ++k) {
    auto c = probe::layer_curve(table, set, k, kind, opts);
    tp.curve.insert(tp.curve.end(), c.begin(), c.end());
  }
  return tp;
}

template <typename T>
int run_probe(const model::ModelCheckpoint& ckpt, const ProbeArgs& a, const std::vector<LoadedSet>& loaded,
              std::ostream& out) {
  const auto m = model::model_from_checkpoint<T>(ckpt);
  const int n_layers = ckpt.config.n_enc_layers;
  const model::Kind kind = model::parse_kind(a.kind);
  std::vector<int> digit_layers, op_layers;
  if (a.layer.empty()) {
    digit_layers = {1};
    op_layers = {n_layers};
  } else if (a.layer == "all") {
    for (int l = 1; l <= n_layers; ++l) digit_layers.push_back(l);
    op_layers = digit_layers;
  } else {
    std::size_t used = 0;
    int l = 0;
    try {
      l = std::stoi(a.layer, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != a.layer.size() || l < 1 || l > n_layers)
      throw UsageError("--layer must be 1.." + std::to_string(n_layers) + " or all");
    digit_layers = op_layers = {l};
  }
  probe::ProbeOptions opts;
  opts.n_perm = a.n_perm;
  opts.seed = a.seed;
  opts.max_pairs = a.max_pairs;

  const int threads = resolve_threads(a.threads);
  std::vector<TemplateProbe> results(loaded.size());
  parallel_for(loaded.size(), threads, [&](std::size_t i) {
    results[i] = probe_one(m, loaded[i].set, kind, digit_layers, op_layers, opts);
  });
  std::sort(results.begin(), results.end(),
            [](const TemplateProbe& x, const TemplateProbe& y) { return x.template_id < y.template_id; });

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::vector<probe::ProbeResult> digit_rows, op_rows;
  std::vector<probe::RegressionRow> reg_rows;
  std::vector<probe::CurvePoint> curve;
  Manifest man;
  json summary = {{"kind", a.kind}, {"templates", json::array()}};
  for (const auto& tp : results) {
    json ts = {{"template_id", tp.template_id}, {"accuracy", tp.accuracy.exact_match}};
    json dj = json::array(), oj = json::array();
    for (const auto& d : tp.digits) {
      digit_rows.insert(digit_rows.end(), d.results.begin(), d.results.end());
      reg_rows.insert(reg_rows.end(), d.regressions.begin(), d.regressions.end());
      dj.push_back({{"layer", d.results.front().layer},
                    {"mean_r_matched", d.mean_r_matched},
                    {"mean_r_unmatched", d.mean_r_unmatched},
                    {"regression", probe::to_json(d.regressions.back().result)}});
    }
    for (std::size_t i = 0; i < tp.operators.size(); ++i) {
      const auto& o = tp.operators[i];
      op_rows.insert(op_rows.end(), o.results.begin(), o.results.end());
      reg_rows.insert(reg_rows.end(), o.regressions.begin(), o.regressions.end());
      const int layer = o.results.front().layer;
      const auto& map = tp.maps[i];
      const std::string stem = "position_map_t" + std::to_string(tp.template_id) + "_l" + std::to_string(layer);
      write_text(dir / (stem + ".csv"), probe::position_map_csv(map));
      write_text(dir / (stem + ".json"), probe::position_map_sidecar(map).dump(2) + "\n");
      man.outputs.push_back(stem + ".csv");
      man.outputs.push_back(stem + ".json");
      oj.push_back({{"layer", layer},
                    {"regression", probe::to_json(o.regressions.back().result)},
                    {"peaks", probe::position_map_sidecar(map).at("peaks")}});
    }
    curve.insert(curve.end(), tp.curve.begin(), tp.curve.end());
    ts["digits"] = dj;
    ts["operators"] = oj;
    summary["templates"].push_back(ts);
  }

  // Pooled operator probe per operator layer, over every template given.
  json pooled = json::array();
  for (std::size_t li = 0; li < op_layers.size(); ++li) {
    std::vector<probe::OperatorProbe> ops;
    std::vector<int> ids;
    for (const auto& tp : results) {
      ops.push_back(tp.operators[li]);
      ids.push_back(tp.template_id);
    }
    json pj = probe::to_json(probe::aggregate_operator_probe(ops, ids, opts));
    pj["layer"] = op_layers[li];
    pj["kind"] = a.kind;
    pooled.push_back(pj);
  }
  summary["pooled"] = pooled;

  write_text(dir / "digit_probe.csv", probe::probe_csv(digit_rows));
  write_text(dir / "operator_probe.csv", probe::probe_csv(op_rows));
  write_text(dir / "regression.csv", probe::regression_csv(reg_rows));
  write_text(dir / "layer_curve.csv", probe::curve_csv(curve));
  write_text(dir / "pooled.json", pooled.dump(2) + "\n");
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  for (const char* f : {"digit_probe.csv", "operator_probe.csv", "regression.csv", "layer_curve.csv", "pooled.json",
                        "summary.json"})
    man.outputs.push_back(f);
  std::sort(man.outputs.begin(), man.outputs.end());
  man.command = "probe";
  man.config = {{"kind", a.kind}, {"layer", a.layer.empty() ? "default" : a.layer}, {"n_perm", a.n_perm},
                {"seed", a.seed}, {"max_pairs", a.max_pairs ? json(*a.max_pairs) : json(nullptr)},
                {"digit_layers", digit_layers}, {"operator_layers", op_layers}};
  man.inputs.push_back(a.checkpoint);
  for (const auto& l : loaded) man.inputs.push_back(l.path);
  write_manifest(dir / "manifest.json", man, dir);
  out << pooled.dump() << "\n";
  return kOk;
}

int cmd_probe(const ProbeArgs& a, std::ostream& out) {
  model::Kind kind;
  try {
    kind = model::parse_kind(a.kind);
  } catch (const std::exception&) {
    throw UsageError("--kind must be query, key, value or role");
  }
  const auto ckpt = model::read_checkpoint(a.checkpoint);
  if (kind == model::Kind::role && ckpt.config.variant != model::Variant::tp)
    throw CodedError(kKindUnsupported, "role vectors exist only in tp checkpoints; this one is " +
                                           std::string(model::to_string(ckpt.config.variant)));
  std::vector<fs::path> files;
  for (const auto& d : a.data) {
    if (fs::is_directory(d)) {
      for (const auto& f : dataset::list_sets(d))
        if (f.filename().string().rfind("probe_", 0) == 0) files.push_back(f);
    } else {
      files.push_back(d);
    }
  }
  const auto loaded = load_sets(files);
  if (loaded.empty()) throw Error("no probe files found");
  std::set<int> seen;
  for (const auto& l : loaded)
    if (!seen.insert(l.set.template_id).second)
      throw UsageError("more than one problem set for template " + std::to_string(l.set.template_id));
  check_vocab(ckpt.config.vocab, loaded);
  return checkpoint_is_double(ckpt) ? run_probe<double>(ckpt, a, loaded, out) : run_probe<float>(ckpt, a, loaded, out);
}

// ------------------------------------------------------------------ report

struct ReportArgs {
  std::string in;
  std::string format = "json";
  std::string out;
};

double to_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  return std::stod(s);
}

int cmd_report(const ReportArgs& a, std::ostream& out) {
  if (a.format != "json" && a.format != "csv") throw UsageError("--format must be csv or json");
  const fs::path dir(a.in);
  const auto digits = probe::parse_csv(probe::read_file(dir / "digit_probe.csv"), probe::kProbeHeader);
  const auto ops = probe::parse_csv(probe::read_file(dir / "operator_probe.csv"), probe::kProbeHeader);
  const auto regs = probe::parse_csv(probe::read_file(dir / "regression.csv"), probe::kRegressionHeader);
  const json pooled = json::parse(probe::read_file(dir / "pooled.json"));
  const json summary = json::parse(probe::read_file(dir / "summary.json"));

  // Mean over heads per (template, layer, slot, kind).
  struct Acc {
    double m = 0, u = 0, pmin = 1;
    int n = 0;
  };
  auto collate = [](const std::vector<std::vector<std::string>>& rows) {
    std::map<std::tuple<int, int, std::string, std::string>, Acc> acc;
    for (const auto& r : rows) {
      if (r.size() != 10) throw FormatError("probe CSV row has wrong field count");
      auto& x = acc[{std::stoi(r[0]), std::stoi(r[1]), r[3], r[4]}];
      x.m += to_double(r[7]);
      x.u += to_double(r[8]);
      x.pmin = std::min(x.pmin, to_double(r[9]));
      ++x.n;
    }
    return acc;
  };
  const auto dacc = collate(digits);
  const auto oacc = collate(ops);

  if (a.format == "json") {
    json j = {{"pooled", pooled}, {"templates", json::array()}};
    std::map<int, json> per;
    auto add = [&](const char* section, const auto& acc) {
      for (const auto& [key, x] : acc) {
        const auto& [t, layer, slot, kind] = key;
        auto& tj = per[t];
        if (tj.is_null()) tj = {{"template_id", t}, {"digits", json::array()}, {"operators", json::array()}};
        tj[section].push_back({{"layer", layer},
                               {"slot", slot},
                               {"kind", kind},
                               {"mean_r_matched", x.m / x.n},
                               {"mean_r_unmatched", x.u / x.n},
                               {"min_p_perm", x.pmin},
                               {"heads", x.n}});
      }
    };
    add("digits", dacc);
    add("operators", oacc);
    for (const auto& ts : summary.at("templates")) {
      auto& tj = per[ts.at("template_id").get<int>()];
      tj["accuracy"] = ts.at("accuracy");
      tj["digit_regression"] = json::array();
      for (const auto& d : ts.at("digits")) tj["digit_regression"].push_back({{"layer", d.at("layer")}, {"result", d.at("regression")}});
      tj["operator_regression"] = json::array();
      tj["position_peaks"] = json::array();
      for (const auto& o : ts.at("operators")) {
        tj["operator_regression"].push_back({{"layer", o.at("layer")}, {"result", o.at("regression")}});
        tj["position_peaks"].push_back({{"layer", o.at("layer")}, {"peaks", o.at("peaks")}});
      }
    }
    for (auto& [t, tj] : per) j["templates"].push_back(tj);
    const std::string text = j.dump(2) + "\n";
    if (a.out.empty()) out << text; else write_text(a.out, text);
    return kOk;
  }

  std::ostringstream os;
  os << "section,template_id,layer,slot,kind,r_matched,r_unmatched,p\n";
  auto emit = [&](const char* section, const auto& acc) {
    for (const auto& [key, x] : acc) {
      const auto& [t, layer, slot, kind] = key;
      os << section << ',' << t << ',' << layer << ',' << slot << ',' << kind << ','
         << probe::format_double(x.m / x.n) << ',' << probe::format_double(x.u / x.n) << ','
         << probe::format_double(x.pmin) << '\n';
    }
  };
  emit("digit_mean_over_heads", dacc);
  emit("operator_mean_over_heads", oacc);
  for (const auto& r : regs)
    if (r.size() == 11 && r[2] == "all")
      os << "regression_" << r[3] << ',' << r[0] << ',' << r[1] << ',' << r[3] << ',' << r[4] << ',' << r[7] << ','
         << r[8] << ',' << r[10] << '\n';
  for (const auto& p : pooled)
    os << "pooled_operators,all," << p.at("layer").get<int>() << ",operators," << p.at("kind").get<std::string>()
       << ',' << probe::format_double(p.at("r_matched").is_null() ? std::nan("") : p.at("r_matched").get<double>())
       << ','
       << probe::format_double(p.at("r_unmatched").is_null() ? std::nan("") : p.at("r_unmatched").get<double>())
       << ',' << probe::format_double(p.at("p_matched").get<double>()) << '\n';
  if (a.out.empty()) out << os.str(); else write_text(a.out, os.str());
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"compositional probing lab: data generation, training, evaluation and probing"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate problem files");
  g->add_option("--template", gen.templates, "1..6, comma list, or all")->required();
  g->add_option("--count", gen.count, "problems per template, or all")->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--split", gen.split, "train|heldout|probe")->capture_default_str();
  g->add_option("--sampling", gen.sampling, "balanced|uniform (default: balanced for probe, uniform otherwise)");
  g->add_option("--exclude", gen.exclude, "problem files or directories whose operand vectors are excluded");
  g->add_option("--out", gen.out, "output directory")->required();

  AuditArgs aud;
  auto* au = app.add_subcommand("audit", "re-read problem files and check dataset constraints");
  au->add_option("--data", aud.data, "problem files or directories")->required();
  au->add_option("--exclude", aud.exclude, "files whose operand vectors were excluded at sampling time");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", tr.config)->required();
  t->add_option("--data", tr.data, "directory with train_* and probe_*/heldout_* files")->required();
  t->add_option("--out", tr.out)->required();
  t->add_option("--steps", tr.steps);
  t->add_option("--seed", tr.seed);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--eval-every", tr.eval_every);
  t->add_option("--threads", tr.threads);
  t->add_flag("--quiet", tr.quiet);

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "exact-match accuracy of a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--threads", ev.threads);
  e->add_option("--out", ev.out, "write JSON here instead of stdout");

  ProbeArgs pr;
  auto* p = app.add_subcommand("probe", "extract activations and run the probes");
  p->add_option("--checkpoint", pr.checkpoint)->required();
  p->add_option("--data", pr.data, "probe files or a directory of probe_* files")->required();
  p->add_option("--kind", pr.kind, "query|key|value|role")->capture_default_str();
  p->add_option("--layer", pr.layer, "N or all (default: digits at 1, operators at the last layer)");
  p->add_option("--n-perm", pr.n_perm)->capture_default_str();
  p->add_option("--seed", pr.seed)->capture_default_str();
  p->add_option("--max-pairs", pr.max_pairs, "seeded pair subsample size");
  p->add_option("--threads", pr.threads);
  p->add_option("--out", pr.out)->required();

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "collate a probe directory into one summary");
  r->add_option("--in", rep.in)->required();
  r->add_option("--format", rep.format, "csv|json")->capture_default_str();
  r->add_option("--out", rep.out);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& ex) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& ex) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (au->parsed()) return cmd_audit(aud, out);
    if (t->parsed()) return cmd_train(tr, out, err);
    if (e->parsed()) return cmd_evaluate(ev, out);
    if (p->parsed()) return cmd_probe(pr, out);
    if (r->parsed()) return cmd_report(rep, out);
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kUsage;
  } catch (const CodedError& ex) {
    err << "error: " << ex.what() << "\n";
    return ex.code();
  } catch (const train::NonFiniteLossError& ex) {
    err << "error: " << ex.what() << "\n";
    return kNonFiniteLoss;
  } catch (const train::SplitOverlapError& ex) {
    err << "error: " << overlap_message(ex) << "\n";
    return kSplitOverlap;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace compprobe::cli
