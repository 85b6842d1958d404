#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "compprobe/dataset.hpp"
#include "compprobe/error.hpp"
#include "compprobe/model.hpp"

namespace compprobe::probe {

using model::Kind;

class MissingRecordError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public Error {
 public:
  using Error::Error;
};

// Dense store of per-head vectors for one fixed-width problem set, indexed by
// problem order in the set.
class ActivationTable {
 public:
  ActivationTable(const dataset::ProblemSet& set, int n_layers, int n_heads, int d_k, int d_v,
                  std::vector<Kind> kinds);
  // Throws MissingRecordError unless every (problem, layer, head, position)
  // is covered for each kind that appears in `records`.
  static ActivationTable from_records(const dataset::ProblemSet& set, std::span<const model::ActivationRecord> records,
                                      int n_layers, int n_heads);

  int layers() const { return layers_; }
  int heads() const { return heads_; }
  std::size_t problems() const { return problems_; }
  std::size_t width() const { return width_; }
  const std::vector<Kind>& kinds() const { return kinds_; }
  bool has_kind(Kind k) const;
  std::size_t dim(Kind k) const;

  std::span<const float> vector(Kind k, int layer, int head, std::size_t problem, std::size_t position) const;
  std::span<float> mutable_vector(Kind k, int layer, int head, std::size_t problem, std::size_t position);
  void mark(Kind k, int layer, int head, std::size_t problem, std::size_t position);

  // Euclidean distances for the given pairs of problem indices.
  std::vector<double> distances(Kind k, int layer, int head, std::size_t position, std::span<const std::uint32_t> a,
                                std::span<const std::uint32_t> b) const;

 private:
  std::size_t slot(Kind k) const;
  std::size_t offset(std::size_t kslot, int layer, int head, std::size_t problem, std::size_t position) const;

  int layers_, heads_;
  std::size_t problems_, width_;
  std::vector<Kind> kinds_;
  std::vector<std::size_t> dims_;
  std::vector<std::vector<float>> data_;
  std::vector<std::vector<std::uint8_t>> present_;
};

// Runs the encoder over the set in fixed chunks and fills a table with every
// kind the model produces. Output does not depend on `threads`.
template <typename T>
ActivationTable extract(const model::Transformer<T>& m, const dataset::ProblemSet& set, int threads = 1,
                        std::size_t chunk = 32);

struct PairIndex {
  std::vector<std::uint32_t> a, b;  // a[i] < b[i]
  std::size_t size() const { return a.size(); }
};

// Every unordered pair once, lexicographic in (i, j).
PairIndex all_pairs(std::size_t n);
// `count` distinct pairs drawn by seed, kept in lexicographic order.
PairIndex subsample_pairs(std::size_t n, std::size_t count, std::uint64_t seed);

// Problem-level values for one problem set. vars[v][problem] holds integer
// targets such as digit values or intermediate results.
struct Block {
  std::size_t n_problems = 0;
  std::vector<std::vector<int>> vars;
  std::shared_ptr<const PairIndex> pairs;
};

// Distances over a block's pairs, compared against |matched| differences and
// optionally |unmatched| differences from the same problems.
struct Channel {
  std::size_t block = 0;
  int matched = 0;
  int unmatched = -1;
  std::shared_ptr<const std::vector<double>> distance;
};

struct PairPool {
  std::vector<Block> blocks;
  std::vector<Channel> channels;

  std::size_t n_pairs() const;
  // Appends `other`, renumbering its blocks.
  void merge(const PairPool& other);
};

struct PairSample {
  std::uint32_t i = 0, j = 0;
  double distance = 0.0;
  int matched_diff = 0;
  int unmatched_diff = 0;
};

std::vector<PairSample> pair_samples(const PairPool& pool, std::size_t channel);

enum class Pooling {
  mean,    // average of per-channel coefficients
  pooled,  // one coefficient over the concatenated pair list
};

// Spearman of distance against matched (or unmatched) differences; NaN when
// the differences are constant.
double channel_r(const PairPool& pool, std::size_t channel, bool unmatched = false);
double pool_r(const PairPool& pool, Pooling pooling, bool unmatched = false);

struct PermutationResult {
  double statistic = 0.0;
  double p = 1.0;
  std::size_t n_perm = 0;
};

// One-sided Mantel test of the matched coefficient: problem values are
// permuted within each block, the same permutation shared by every channel of
// the block.
PermutationResult mantel_test(const PairPool& pool, Pooling pooling, std::uint64_t seed, std::size_t n_perm);

struct RegressionResult {
  double intercept = 0.0;
  double beta_matched = 0.0;
  double beta_unmatched = 0.0;
  double delta = 0.0;
  double p_perm = 1.0;
  std::size_t n_pairs = 0;
  std::size_t n_perm = 0;
};

// OLS of distance on (matched_diff, unmatched_diff) with intercept over every
// pair in the pool. The null swaps each problem's matched and unmatched
// values with probability 1/2, shared across channels that use the same
// variable pair; replicates are compared on delta divided by its OLS
// standard error. Throws RankDeficientError when the design is singular and
// Error when n_pairs < 10 or a channel has no unmatched variable.
RegressionResult matched_unmatched_regression(const PairPool& pool, std::uint64_t seed, std::size_t n_perm);

struct ProbeOptions {
  std::size_t n_perm = 1000;
  std::uint64_t seed = 1;
  std::optional<std::size_t> max_pairs;  // seeded subsample when set
};

struct ProbeResult {
  int template_id = 0;
  int layer = 0;
  int head = 0;
  std::string slot;  // "x2", "op1"
  std::size_t position = 0;
  Kind kind = Kind::query;
  std::string target;
  double r_matched = 0.0;
  double r_unmatched = 0.0;  // mean over controls when there are several
  std::vector<std::pair<std::string, double>> controls;
  std::size_t n_pairs = 0;
  double p_perm = 1.0;
};

struct RegressionRow {
  int template_id = 0;
  int layer = 0;
  int head = 0;  // 0 when pooled over heads
  std::string slot;
  Kind kind = Kind::query;
  std::string target;
  RegressionResult result;
};

struct DigitProbe {
  std::vector<ProbeResult> results;  // slot-major, then head
  std::vector<RegressionRow> regressions;
  double mean_r_matched = 0.0;  // over heads and slots
  double mean_r_unmatched = 0.0;
  PairPool pool;
};

// Slot x_k at its character position, controlled by slot x_{k+1 mod n}.
DigitProbe digit_probe(const ActivationTable& table, const dataset::ProblemSet& set, int layer, Kind kind,
                       const ProbeOptions& opts = {});

struct OperatorProbe {
  std::vector<ProbeResult> results;  // operator-major, then head
  std::vector<RegressionRow> regressions;
  PairPool matched;   // one channel per (operator, head)
  PairPool controls;  // one channel per (operator, other operator, head)
};

// Operator k at op_char, controlled by every other operator's value.
OperatorProbe operator_probe(const ActivationTable& table, const dataset::ProblemSet& set, int layer, Kind kind,
                             const ProbeOptions& opts = {});

struct PooledResult {
  std::vector<int> template_ids;
  double r_matched = 0.0;
  double r_unmatched = 0.0;
  double p_matched = 1.0;
  std::size_t n_pairs = 0;
  RegressionResult regression;
};

// Spearman over the concatenated pair lists of every operator probe.
PooledResult aggregate_operator_probe(std::span<const OperatorProbe> probes, std::span<const int> template_ids,
                                      const ProbeOptions& opts = {});

struct CurvePoint {
  int template_id = 0;
  int layer = 0;
  std::string slot;
  std::string target;
  Kind kind = Kind::query;
  std::vector<double> per_head;
  double mean = 0.0, min = 0.0, max = 0.0;
};

// Vectors at operator `op_index`'s position in every layer against every
// operator's value.
std::vector<CurvePoint> layer_curve(const ActivationTable& table, const dataset::ProblemSet& set, int op_index,
                                    Kind kind, const ProbeOptions& opts = {});

struct ConstituentMean {
  int constituent = 0;  // op_index owning the span
  expr::Span span;
  std::string target;
  double mean_r = 0.0;           // over every position in the span
  double interior_mean_r = 0.0;  // excluding the operator character
};

struct PositionMap {
  int template_id = 0;
  int layer = 0;
  Kind kind = Kind::query;
  std::string question;  // first problem, for reference
  std::vector<std::string> targets;
  std::vector<std::vector<double>> r;  // [position][target], mean over heads
  std::vector<std::vector<std::vector<double>>> per_head;
  std::vector<std::size_t> argmax;  // per target; positions with NaN are skipped
  std::vector<ConstituentMean> constituents;
  std::vector<expr::SubExprAnnotation> annotations;  // of the first problem
};

PositionMap position_map(const ActivationTable& table, const dataset::ProblemSet& set, int layer, Kind kind,
                         const ProbeOptions& opts = {});

// Target labels: "op1".."opK"; the last is the final answer.
std::string op_label(int op_index);
std::string slot_label(int slot);

}  // namespace compprobe::probe
