#include <doctest.h>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "compprobe/checkpoint.hpp"
#include "compprobe/cli.hpp"
#include "compprobe/dataset.hpp"
#include "compprobe/model.hpp"
#include "compprobe/probe.hpp"
#include "compprobe/probe_io.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace compprobe;
using nlohmann::json;
using testutil::TempDir;
using testutil::slurp;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "compprobe");
  std::ostringstream out, err;
  Run r;
  r.code = compprobe::cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string smoke_config() { return std::string(COMPPROBE_SOURCE_DIR) + "/configs/smoke.json"; }

// Probe sets for T1 and T5 plus disjoint train sets, in one directory.
void make_small_data(const fs::path& dir) {
  REQUIRE(invoke({"gen-data", "--template", "1,5", "--count", "40", "--seed", "7", "--split", "probe", "--out",
               dir.string()})
              .code == 0);
  REQUIRE(invoke({"gen-data", "--template", "1,5", "--count", "all", "--seed", "9", "--split", "train", "--exclude",
               dir.string(), "--out", dir.string()})
              .code == 0);
}

std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) lines.push_back(l);
  return lines;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> f;
  std::istringstream in(line);
  for (std::string x; std::getline(in, x, ',');) f.push_back(x);
  return f;
}

}  // namespace

TEST_CASE("gen-data writes one file per template and is reproducible") {
  TempDir a("gen_a"), b("gen_b");
  const Run r1 = invoke({"gen-data", "--template", "all", "--count", "200", "--seed", "7", "--split", "probe", "--out",
                      a.path().string()});
  REQUIRE(r1.code == 0);
  for (int t = 1; t <= expr::kTemplateCount; ++t) CHECK(fs::exists(a / dataset::set_filename(dataset::Split::probe, t)));
  CHECK(fs::exists(a / "manifest_gen-data_probe.json"));
  CHECK(csv_lines(r1.out).size() == 6);

  const Run r2 = invoke({"gen-data", "--template", "all", "--count", "200", "--seed", "7", "--split", "probe", "--out",
                      b.path().string()});
  REQUIRE(r2.code == 0);
  CHECK(r1.out == r2.out);
  for (int t = 1; t <= expr::kTemplateCount; ++t) {
    const auto name = dataset::set_filename(dataset::Split::probe, t);
    CHECK(slurp(a / name) == slurp(b / name));
  }
}

TEST_CASE("gen-data rejects bad arguments with usage errors") {
  TempDir d("gen_bad");
  CHECK(invoke({"gen-data", "--template", "9", "--out", d.path().string()}).code == cli::kUsage);
  CHECK(invoke({"gen-data", "--template", "1", "--count", "x", "--out", d.path().string()}).code == cli::kUsage);
  CHECK(invoke({"gen-data", "--template", "1", "--sampling", "odd", "--out", d.path().string()}).code == cli::kUsage);
  CHECK(invoke({"gen-data", "--template", "1", "--split", "dev", "--out", d.path().string()}).code == cli::kUsage);
  CHECK(invoke({"frobnicate"}).code == cli::kUsage);
}

TEST_CASE("audit passes disjoint splits and flags overlap") {
  TempDir d("audit");
  make_small_data(d.path());
  const Run ok = invoke({"audit", "--data", d.path().string()});
  CHECK(ok.code == 0);

  TempDir bad("audit_bad");
  REQUIRE(invoke({"gen-data", "--template", "1", "--count", "30", "--seed", "7", "--split", "probe", "--out",
               bad.path().string()})
              .code == 0);
  REQUIRE(invoke({"gen-data", "--template", "1", "--count", "all", "--seed", "9", "--split", "train", "--out",
               bad.path().string()})
              .code == 0);
  const Run r = invoke({"audit", "--data", bad.path().string()});
  CHECK(r.code == cli::kSplitOverlap);
  CHECK(r.err.find("template 1") != std::string::npos);
}

TEST_CASE("train, probe and report on the smoke configuration") {
  TempDir d("pipe");
  make_small_data(d / "data");
  const std::string data = (d / "data").string();
  const std::string run1 = (d / "run1").string();
  const Run tr = invoke({"train", "--config", smoke_config(), "--data", data, "--out", run1, "--quiet", "--threads", "1"});
  REQUIRE_MESSAGE(tr.code == 0, tr.err);
  CHECK(fs::exists(d / "run1" / "final.ckpt"));
  CHECK(fs::exists(d / "run1" / "manifest.json"));
  const json man = json::parse(slurp(d / "run1" / "manifest.json"));
  CHECK(man.at("extra").at("steps_run") == 100);

  SUBCASE("training is independent of the thread count") {
    const std::string run2 = (d / "run2").string();
    REQUIRE(invoke({"train", "--config", smoke_config(), "--data", data, "--out", run2, "--quiet", "--threads", "2"})
                .code == 0);
    CHECK(slurp(d / "run1" / "final.ckpt") == slurp(d / "run2" / "final.ckpt"));
    CHECK(slurp(d / "run1" / "eval_history.jsonl") == slurp(d / "run2" / "eval_history.jsonl"));
  }

  SUBCASE("evaluate reports every template") {
    const Run ev = invoke({"evaluate", "--checkpoint", run1 + "/final.ckpt", "--data", data + "/probe_t1.jsonl",
                        data + "/probe_t5.jsonl"});
    REQUIRE(ev.code == 0);
    const json j = json::parse(ev.out);
    CHECK(j.at("per_template").size() == 2);
  }

  SUBCASE("probe at every layer, thread-invariant, and report agrees with pooled.json") {
    const std::string p1 = (d / "probe1").string(), p2 = (d / "probe2").string();
    const std::vector<std::string> base = {"probe", "--checkpoint", run1 + "/final.ckpt", "--data", data,
                                           "--layer", "all", "--n-perm", "20", "--seed", "3"};
    auto with = [&](const std::string& out, const std::string& threads) {
      auto v = base;
      v.insert(v.end(), {"--out", out, "--threads", threads});
      return invoke(v);
    };
    REQUIRE(with(p1, "1").code == 0);
    REQUIRE(with(p2, "2").code == 0);
    for (const char* f : {"digit_probe.csv", "operator_probe.csv", "regression.csv", "layer_curve.csv",
                          "pooled.json", "summary.json"}) {
      INFO(f);
      CHECK(slurp(fs::path(p1) / f) == slurp(fs::path(p2) / f));
    }

    // T1 has two operators; the smoke model has 2 layers and 2 heads.
    std::size_t t1_rows = 0;
    for (const auto& l : csv_lines(slurp(fs::path(p1) / "operator_probe.csv"))) {
      const auto f = fields(l);
      if (f[0] == "1" && f[2] != "all") ++t1_rows;
    }
    CHECK(t1_rows == 2 * 2 * 2);

    const json pooled = json::parse(slurp(fs::path(p1) / "pooled.json"));
    REQUIRE(pooled.size() == 2);
    const Run rep = invoke({"report", "--in", p1, "--format", "json"});
    REQUIRE(rep.code == 0);
    CHECK(json::parse(rep.out).at("pooled") == pooled);
    const Run rep_csv = invoke({"report", "--in", p1, "--format", "csv"});
    REQUIRE(rep_csv.code == 0);
    CHECK(rep_csv.out.find("pooled_operators,all,2,operators,query") != std::string::npos);

    // Recompute the last-layer pool through the library.
    const auto ckpt = model::read_checkpoint(run1 + "/final.ckpt");
    const auto m = model::model_from_checkpoint<float>(ckpt);
    probe::ProbeOptions opts;
    opts.n_perm = 20;
    opts.seed = 3;
    std::vector<probe::OperatorProbe> ops;
    std::vector<int> ids;
    for (int t : {1, 5}) {
      const auto set = dataset::read_set(fs::path(data) / dataset::set_filename(dataset::Split::probe, t));
      const auto table = probe::extract(m, set, 1);
      ops.push_back(probe::operator_probe(table, set, 2, model::Kind::query, opts));
      ids.push_back(t);
    }
    json expect = probe::to_json(probe::aggregate_operator_probe(ops, ids, opts));
    expect["layer"] = 2;
    expect["kind"] = "query";
    CHECK(pooled.at(1) == expect);
  }

  SUBCASE("role vectors need a tp checkpoint") {
    TempDir s("std");
    model::ModelConfig cfg = model::model_from_checkpoint<float>(model::read_checkpoint(run1 + "/final.ckpt")).config();
    cfg.variant = model::Variant::standard;
    model::save_checkpoint(s / "std.ckpt", model::Transformer<float>(cfg));
    const Run r = invoke({"probe", "--checkpoint", (s / "std.ckpt").string(), "--data", data, "--kind", "role",
                       "--n-perm", "5", "--out", (s / "out").string()});
    CHECK(r.code == cli::kKindUnsupported);
    CHECK(invoke({"probe", "--checkpoint", (s / "std.ckpt").string(), "--data", data, "--kind", "query", "--n-perm",
               "5", "--out", (s / "out").string()})
              .code == 0);
  }

  SUBCASE("a checkpoint without every question character is rejected") {
    TempDir s("vocab");
    model::ModelConfig cfg;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_k = cfg.d_v = 8;
    cfg.d_ff = 16;
    std::string chars = model::Vocab::standard().chars();
    std::erase(chars, '9');
    cfg.vocab = model::Vocab(chars);
    model::save_checkpoint(s / "small.ckpt", model::Transformer<float>(cfg));
    CHECK(invoke({"evaluate", "--checkpoint", (s / "small.ckpt").string(), "--data", data}).code ==
          cli::kVocabMismatch);
    CHECK(invoke({"probe", "--checkpoint", (s / "small.ckpt").string(), "--data", data, "--n-perm", "5", "--out",
               (s / "out").string()})
              .code == cli::kVocabMismatch);
  }
}

TEST_CASE("train refuses overlapping train and heldout sets") {
  TempDir d("overlap");
  REQUIRE(invoke({"gen-data", "--template", "1", "--count", "30", "--seed", "7", "--split", "probe", "--out",
               d.path().string()})
              .code == 0);
  REQUIRE(invoke({"gen-data", "--template", "1", "--count", "all", "--seed", "9", "--split", "train", "--exclude",
               d.path().string(), "--out", d.path().string()})
              .code == 0);
  REQUIRE(invoke({"gen-data", "--template", "1", "--count", "20", "--seed", "8", "--split", "heldout", "--out",
               d.path().string()})
              .code == 0);
  const Run r = invoke({"train", "--config", smoke_config(), "--data", d.path().string(), "--out",
                     (d / "run").string(), "--quiet"});
  CHECK(r.code == cli::kSplitOverlap);
}
