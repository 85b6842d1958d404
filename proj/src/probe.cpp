#include "compprobe/probe.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <tuple>

#include "compprobe/parallel.hpp"
#include "compprobe/rng.hpp"
#include "compprobe/stats.hpp"

namespace compprobe::probe {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
// Slack for floating-point ties between permuted and observed statistics.
constexpr double kTieSlack = 1e-12;

}  // namespace

std::string op_label(int op_index) { return "op" + std::to_string(op_index); }
std::string slot_label(int slot) { return "x" + std::to_string(slot); }

// ---------------------------------------------------------------- table

ActivationTable::ActivationTable(const dataset::ProblemSet& set, int n_layers, int n_heads, int d_k, int d_v,
                                 std::vector<Kind> kinds)
    : layers_(n_layers), heads_(n_heads), problems_(set.problems.size()), kinds_(std::move(kinds)) {
  if (set.problems.empty()) throw Error("activation table needs at least one problem");
  width_ = set.problems.front().question.size();
  for (const auto& p : set.problems)
    if (p.question.size() != width_) throw Error("problem set is not fixed-width");
  std::sort(kinds_.begin(), kinds_.end());
  kinds_.erase(std::unique(kinds_.begin(), kinds_.end()), kinds_.end());
  for (Kind k : kinds_) {
    const std::size_t d = static_cast<std::size_t>(k == Kind::query || k == Kind::key ? d_k : d_v);
    dims_.push_back(d);
    const std::size_t cells = static_cast<std::size_t>(layers_ * heads_) * problems_ * width_;
    data_.emplace_back(cells * d, 0.0f);
    present_.emplace_back(cells, 0);
  }
}

bool ActivationTable::has_kind(Kind k) const { return std::find(kinds_.begin(), kinds_.end(), k) != kinds_.end(); }

std::size_t ActivationTable::slot(Kind k) const {
  auto it = std::find(kinds_.begin(), kinds_.end(), k);
  if (it == kinds_.end()) throw MissingRecordError("no " + std::string(model::to_string(k)) + " records");
  return static_cast<std::size_t>(it - kinds_.begin());
}

std::size_t ActivationTable::dim(Kind k) const { return dims_[slot(k)]; }

std::size_t ActivationTable::offset(std::size_t, int layer, int head, std::size_t problem,
                                    std::size_t position) const {
  if (layer < 1 || layer > layers_ || head < 1 || head > heads_ || problem >= problems_ || position >= width_)
    throw MissingRecordError("activation index out of range: layer " + std::to_string(layer) + " head " +
                             std::to_string(head) + " position " + std::to_string(position));
  return ((static_cast<std::size_t>((layer - 1) * heads_ + (head - 1))) * problems_ + problem) * width_ + position;
}

std::span<const float> ActivationTable::vector(Kind k, int layer, int head, std::size_t problem,
                                               std::size_t position) const {
  const std::size_t s = slot(k);
  const std::size_t cell = offset(s, layer, head, problem, position);
  return {data_[s].data() + cell * dims_[s], dims_[s]};
}

std::span<float> ActivationTable::mutable_vector(Kind k, int layer, int head, std::size_t problem,
                                                 std::size_t position) {
  const std::size_t s = slot(k);
  const std::size_t cell = offset(s, layer, head, problem, position);
  return {data_[s].data() + cell * dims_[s], dims_[s]};
}

void ActivationTable::mark(Kind k, int layer, int head, std::size_t problem, std::size_t position) {
  const std::size_t s = slot(k);
  present_[s][offset(s, layer, head, problem, position)] = 1;
}

ActivationTable ActivationTable::from_records(const dataset::ProblemSet& set,
                                              std::span<const model::ActivationRecord> records, int n_layers,
                                              int n_heads) {
  std::vector<Kind> kinds;
  std::map<Kind, std::size_t> dims;
  for (const auto& r : records) {
    if (!dims.count(r.kind)) kinds.push_back(r.kind);
    dims[r.kind] = r.vector.size();
  }
  if (kinds.empty()) throw MissingRecordError("no activation records");
  const int dk = static_cast<int>(dims.count(Kind::query) ? dims[Kind::query] : dims.count(Kind::key) ? dims[Kind::key] : 1);
  const int dv = static_cast<int>(dims.count(Kind::value) ? dims[Kind::value] : dims.count(Kind::role) ? dims[Kind::role] : 1);
  ActivationTable t(set, n_layers, n_heads, dk, dv, kinds);
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < set.problems.size(); ++i) index[set.problems[i].id] = i;
  for (const auto& r : records) {
    auto it = index.find(r.problem_id);
    if (it == index.end()) throw MissingRecordError("record for unknown problem " + std::to_string(r.problem_id));
    auto dst = t.mutable_vector(r.kind, r.layer, r.head, it->second, r.position);
    if (dst.size() != r.vector.size()) throw ShapeError("record vector has the wrong length");
    std::copy(r.vector.begin(), r.vector.end(), dst.begin());
    t.mark(r.kind, r.layer, r.head, it->second, r.position);
  }
  for (std::size_t s = 0; s < t.kinds_.size(); ++s) {
    auto miss = std::find(t.present_[s].begin(), t.present_[s].end(), std::uint8_t{0});
    if (miss != t.present_[s].end()) {
      std::size_t cell = static_cast<std::size_t>(miss - t.present_[s].begin());
      const std::size_t pos = cell % t.width_;
      cell /= t.width_;
      const std::size_t prob = cell % t.problems_;
      cell /= t.problems_;
      throw MissingRecordError("missing " + std::string(model::to_string(t.kinds_[s])) + " record for problem " +
                               std::to_string(set.problems[prob].id) + " layer " +
                               std::to_string(cell / static_cast<std::size_t>(t.heads_) + 1) + " head " +
                               std::to_string(cell % static_cast<std::size_t>(t.heads_) + 1) + " position " +
                               std::to_string(pos));
    }
  }
  return t;
}

std::vector<double> ActivationTable::distances(Kind k, int layer, int head, std::size_t position,
                                               std::span<const std::uint32_t> a,
                                               std::span<const std::uint32_t> b) const {
  const std::size_t d = dim(k);
  std::vector<double> out(a.size());
  for (std::size_t p = 0; p < a.size(); ++p) {
    const auto u = vector(k, layer, head, a[p], position);
    const auto v = vector(k, layer, head, b[p], position);
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = static_cast<double>(u[i]) - static_cast<double>(v[i]);
      s += diff * diff;
    }
    out[p] = std::sqrt(s);
  }
  return out;
}

namespace {

template <typename T>
class TableSink : public model::ActivationSink {
 public:
  TableSink(ActivationTable& table, std::size_t first) : table_(table), first_(first) {}
  void record(std::size_t row, int layer, int head, std::size_t position, Kind kind,
              std::span<const float> vector) override {
    auto dst = table_.mutable_vector(kind, layer, head, first_ + row, position);
    std::copy(vector.begin(), vector.end(), dst.begin());
    table_.mark(kind, layer, head, first_ + row, position);
  }

 private:
  ActivationTable& table_;
  std::size_t first_;
};

}  // namespace

template <typename T>
ActivationTable extract(const model::Transformer<T>& m, const dataset::ProblemSet& set, int threads,
                        std::size_t chunk) {
  const auto& cfg = m.config();
  std::vector<Kind> kinds{Kind::query, Kind::key, Kind::value};
  if (cfg.variant == model::Variant::tp) kinds.push_back(Kind::role);
  ActivationTable table(set, cfg.n_enc_layers, cfg.n_heads, cfg.d_k, cfg.d_v, kinds);
  const std::size_t n = set.problems.size();
  const std::size_t jobs = (n + chunk - 1) / chunk;
  parallel_for(jobs, threads, [&](std::size_t j) {
    tensor::NoGradGuard no_grad;
    const std::size_t lo = j * chunk, hi = std::min(n, lo + chunk);
    std::vector<std::string> qs;
    for (std::size_t i = lo; i < hi; ++i) qs.push_back(set.problems[i].question);
    TableSink<T> sink(table, lo);
    m.encode(m.encode_questions(std::span<const std::string>(qs)), &sink);
  });
  return table;
}

template ActivationTable extract(const model::Transformer<float>&, const dataset::ProblemSet&, int, std::size_t);
template ActivationTable extract(const model::Transformer<double>&, const dataset::ProblemSet&, int, std::size_t);

// ---------------------------------------------------------------- pairs

PairIndex all_pairs(std::size_t n) {
  PairIndex p;
  const std::size_t total = n < 2 ? 0 : n * (n - 1) / 2;
  p.a.reserve(total);
  p.b.reserve(total);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      p.a.push_back(static_cast<std::uint32_t>(i));
      p.b.push_back(static_cast<std::uint32_t>(j));
    }
  return p;
}

PairIndex subsample_pairs(std::size_t n, std::size_t count, std::uint64_t seed) {
  PairIndex full = all_pairs(n);
  if (count >= full.size()) return full;
  std::vector<std::size_t> idx(full.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` slots hold the sample.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  PairIndex out;
  for (std::size_t i : idx) {
    out.a.push_back(full.a[i]);
    out.b.push_back(full.b[i]);
  }
  return out;
}

std::size_t PairPool::n_pairs() const {
  std::size_t n = 0;
  for (const auto& c : channels) n += c.distance->size();
  return n;
}

void PairPool::merge(const PairPool& other) {
  const std::size_t base = blocks.size();
  blocks.insert(blocks.end(), other.blocks.begin(), other.blocks.end());
  for (Channel c : other.channels) {
    c.block += base;
    channels.push_back(c);
  }
}

std::vector<PairSample> pair_samples(const PairPool& pool, std::size_t channel) {
  const Channel& c = pool.channels.at(channel);
  const Block& b = pool.blocks.at(c.block);
  std::vector<PairSample> out(b.pairs->size());
  for (std::size_t p = 0; p < out.size(); ++p) {
    const auto i = b.pairs->a[p], j = b.pairs->b[p];
    out[p].i = i;
    out[p].j = j;
    out[p].distance = (*c.distance)[p];
    out[p].matched_diff = std::abs(b.vars[static_cast<std::size_t>(c.matched)][i] - b.vars[static_cast<std::size_t>(c.matched)][j]);
    if (c.unmatched >= 0)
      out[p].unmatched_diff =
          std::abs(b.vars[static_cast<std::size_t>(c.unmatched)][i] - b.vars[static_cast<std::size_t>(c.unmatched)][j]);
  }
  return out;
}

// ---------------------------------------------------------------- statistics

namespace {

// Centered fractional ranks of a fixed variable and their sum of squares.
struct FixedRanks {
  std::vector<double> centered;
  double ss = 0.0;
};

FixedRanks fixed_ranks(std::span<const double> xs) {
  FixedRanks f;
  f.centered = stats::fractional_ranks(xs);
  const double mid = 0.5 * static_cast<double>(xs.size() + 1);
  for (double& r : f.centered) {
    r -= mid;
    f.ss += r * r;
  }
  return f;
}

// Spearman between fixed ranks and non-negative integer differences, ranking
// the differences by counting.
class DiffRanker {
 public:
  double correlate(const FixedRanks& fixed, std::span<const int> diffs) {
    int top = 0;
    for (int d : diffs) top = std::max(top, d);
    counts_.assign(static_cast<std::size_t>(top) + 1, 0);
    for (int d : diffs) ++counts_[static_cast<std::size_t>(d)];
    rank_.assign(counts_.size(), 0.0);
    const double mid = 0.5 * static_cast<double>(diffs.size() + 1);
    double below = 0.0, ss = 0.0;
    for (std::size_t v = 0; v < counts_.size(); ++v) {
      const double c = static_cast<double>(counts_[v]);
      rank_[v] = below + 0.5 * (c + 1.0) - mid;
      ss += c * rank_[v] * rank_[v];
      below += c;
    }
    if (ss == 0.0 || fixed.ss == 0.0) return kNaN;
    double num = 0.0;
    for (std::size_t p = 0; p < diffs.size(); ++p) num += fixed.centered[p] * rank_[static_cast<std::size_t>(diffs[p])];
    return std::clamp(num / std::sqrt(fixed.ss * ss), -1.0, 1.0);
  }

 private:
  std::vector<std::size_t> counts_;
  std::vector<double> rank_;
};

void fill_diffs(const Block& b, const std::vector<int>& values, std::vector<int>& out, std::size_t at) {
  const auto& pa = b.pairs->a;
  const auto& pb = b.pairs->b;
  for (std::size_t p = 0; p < pa.size(); ++p) out[at + p] = std::abs(values[pa[p]] - values[pb[p]]);
}

// Evaluates matched/unmatched coefficients for arbitrary per-block value
// substitutions, with distance ranks computed once.
class Evaluator {
 public:
  Evaluator(const PairPool& pool, Pooling pooling) : pool_(pool), pooling_(pooling) {
    if (pool.channels.empty()) throw Error("empty pair pool");
    if (pooling == Pooling::mean) {
      for (const auto& c : pool.channels) per_channel_.push_back(fixed_ranks(*c.distance));
    } else {
      std::vector<double> all;
      all.reserve(pool.n_pairs());
      for (const auto& c : pool.channels) all.insert(all.end(), c.distance->begin(), c.distance->end());
      pooled_ = fixed_ranks(all);
    }
    diffs_.resize(pooling == Pooling::pooled ? pool.n_pairs() : 0);
  }

  // value(channel, unmatched) returns the per-problem values to difference.
  template <typename ValueFn>
  double operator()(ValueFn&& value, bool unmatched) {
    if (pooling_ == Pooling::pooled) {
      std::size_t at = 0;
      for (std::size_t c = 0; c < pool_.channels.size(); ++c) {
        const Block& b = pool_.blocks[pool_.channels[c].block];
        fill_diffs(b, value(c, unmatched), diffs_, at);
        at += b.pairs->size();
      }
      return ranker_.correlate(pooled_, diffs_);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < pool_.channels.size(); ++c) {
      const Block& b = pool_.blocks[pool_.channels[c].block];
      diffs_.resize(b.pairs->size());
      fill_diffs(b, value(c, unmatched), diffs_, 0);
      sum += ranker_.correlate(per_channel_[c], diffs_);
    }
    return sum / static_cast<double>(pool_.channels.size());
  }

 private:
  const PairPool& pool_;
  Pooling pooling_;
  std::vector<FixedRanks> per_channel_;
  FixedRanks pooled_;
  std::vector<int> diffs_;
  DiffRanker ranker_;
};

const std::vector<int>& var_of(const PairPool& pool, std::size_t c, bool unmatched) {
  const Channel& ch = pool.channels[c];
  const int v = unmatched ? ch.unmatched : ch.matched;
  if (v < 0) throw Error("channel has no unmatched variable");
  return pool.blocks[ch.block].vars.at(static_cast<std::size_t>(v));
}

}  // namespace

double channel_r(const PairPool& pool, std::size_t channel, bool unmatched) {
  const Channel& c = pool.channels.at(channel);
  const Block& b = pool.blocks.at(c.block);
  std::vector<int> diffs(b.pairs->size());
  fill_diffs(b, var_of(pool, channel, unmatched), diffs, 0);
  DiffRanker ranker;
  return ranker.correlate(fixed_ranks(*c.distance), diffs);
}

double pool_r(const PairPool& pool, Pooling pooling, bool unmatched) {
  Evaluator eval(pool, pooling);
  return eval([&](std::size_t c, bool u) -> const std::vector<int>& { return var_of(pool, c, u); }, unmatched);
}

PermutationResult mantel_test(const PairPool& pool, Pooling pooling, std::uint64_t seed, std::size_t n_perm) {
  Evaluator eval(pool, pooling);
  PermutationResult res;
  res.n_perm = n_perm;
  res.statistic = eval([&](std::size_t c, bool u) -> const std::vector<int>& { return var_of(pool, c, u); }, false);
  if (std::isnan(res.statistic)) {
    res.p = 1.0;
    return res;
  }
  // permuted[block][var] is rebuilt lazily for the variables in use.
  std::vector<std::vector<std::vector<int>>> permuted(pool.blocks.size());
  std::vector<std::vector<std::uint32_t>> perm(pool.blocks.size());
  for (std::size_t b = 0; b < pool.blocks.size(); ++b) {
    permuted[b].resize(pool.blocks[b].vars.size());
    perm[b].resize(pool.blocks[b].n_problems);
  }
  const Rng base(seed);
  std::size_t extreme = 0;
  for (std::size_t rep = 0; rep < n_perm; ++rep) {
    Rng rng = base.fork(rep);
    for (std::size_t b = 0; b < pool.blocks.size(); ++b) {
      std::iota(perm[b].begin(), perm[b].end(), 0u);
      rng.shuffle(std::span<std::uint32_t>(perm[b]));
      for (auto& v : permuted[b]) v.clear();
    }
    const double s = eval(
        [&](std::size_t c, bool) -> const std::vector<int>& {
          const Channel& ch = pool.channels[c];
          auto& dst = permuted[ch.block][static_cast<std::size_t>(ch.matched)];
          if (dst.empty()) {
            const auto& src = pool.blocks[ch.block].vars[static_cast<std::size_t>(ch.matched)];
            dst.resize(src.size());
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[perm[ch.block][i]];
          }
          return dst;
        },
        false);
    if (!(s < res.statistic - kTieSlack)) ++extreme;
  }
  res.p = stats::add_one_p(extreme, n_perm);
  return res;
}

namespace {

struct Ols {
  double intercept, beta_m, beta_u;
  double t;  // (beta_m - beta_u) / its OLS standard error
  bool ok;
};

struct Moments {
  double n = 0, x1 = 0, x2 = 0, y = 0, x1x1 = 0, x2x2 = 0, x1x2 = 0, x1y = 0, x2y = 0, yy = 0;
};

Ols solve(const Moments& m) {
  Eigen::Matrix3d a;
  a << m.n, m.x1, m.x2, m.x1, m.x1x1, m.x1x2, m.x2, m.x1x2, m.x2x2;
  Eigen::Vector3d rhs(m.y, m.x1y, m.x2y);
  Eigen::FullPivLU<Eigen::Matrix3d> lu(a);
  lu.setThreshold(1e-10);
  if (lu.rank() < 3) return {0, 0, 0, 0, false};
  const Eigen::Vector3d beta = lu.solve(rhs);
  const double delta = beta[1] - beta[2];
  const double rss = std::max(0.0, m.yy - beta.dot(rhs));
  const Eigen::Vector3d c(0, 1, -1);
  const double var = rss / std::max(1.0, m.n - 3) * c.dot(lu.solve(c));
  const double eps = 1e-12 * std::max(1.0, std::abs(delta));
  double t = 0.0;
  if (var > 0 && std::sqrt(var) > eps) {
    t = delta / std::sqrt(var);
  } else if (std::abs(delta) > eps) {
    t = std::copysign(std::numeric_limits<double>::infinity(), delta);
  }
  return {beta[0], beta[1], beta[2], t, true};
}

}  // namespace

RegressionResult matched_unmatched_regression(const PairPool& pool, std::uint64_t seed, std::size_t n_perm) {
  if (pool.channels.empty()) throw Error("empty pair pool");
  for (const auto& c : pool.channels)
    if (c.unmatched < 0) throw Error("regression needs an unmatched variable on every channel");
  RegressionResult res;
  res.n_pairs = pool.n_pairs();
  res.n_perm = n_perm;
  if (res.n_pairs < 10) throw Error("regression needs at least 10 pairs");

  // Swap coins are shared by channels of one block using the same variable pair.
  std::map<std::tuple<std::size_t, int, int>, std::size_t> key_index;
  std::vector<std::size_t> channel_key(pool.channels.size());
  for (std::size_t c = 0; c < pool.channels.size(); ++c) {
    const Channel& ch = pool.channels[c];
    const auto key = std::make_tuple(ch.block, std::min(ch.matched, ch.unmatched), std::max(ch.matched, ch.unmatched));
    auto [it, fresh] = key_index.emplace(key, key_index.size());
    channel_key[c] = it->second;
  }
  std::vector<std::size_t> key_problems(key_index.size());
  for (const auto& [key, idx] : key_index) key_problems[idx] = pool.blocks[std::get<0>(key)].n_problems;
  std::vector<std::vector<std::uint8_t>> coins(key_index.size());

  auto moments = [&](bool swapped) {
    Moments m;
    std::vector<int> xa, xb;
    for (std::size_t c = 0; c < pool.channels.size(); ++c) {
      const Channel& ch = pool.channels[c];
      const Block& b = pool.blocks[ch.block];
      const auto& vm = b.vars[static_cast<std::size_t>(ch.matched)];
      const auto& vu = b.vars[static_cast<std::size_t>(ch.unmatched)];
      xa = vm;
      xb = vu;
      if (swapped) {
        const auto& coin = coins[channel_key[c]];
        for (std::size_t i = 0; i < xa.size(); ++i)
          if (coin[i]) std::swap(xa[i], xb[i]);
      }
      const auto& pa = b.pairs->a;
      const auto& pb = b.pairs->b;
      const auto& d = *ch.distance;
      for (std::size_t p = 0; p < pa.size(); ++p) {
        const double x1 = std::abs(xa[pa[p]] - xa[pb[p]]);
        const double x2 = std::abs(xb[pa[p]] - xb[pb[p]]);
        const double y = d[p];
        m.n += 1;
        m.x1 += x1;
        m.x2 += x2;
        m.y += y;
        m.x1x1 += x1 * x1;
        m.x2x2 += x2 * x2;
        m.x1x2 += x1 * x2;
        m.x1y += x1 * y;
        m.x2y += x2 * y;
        m.yy += y * y;
      }
    }
    return m;
  };

  const Ols obs = solve(moments(false));
  if (!obs.ok) throw RankDeficientError("regression design is rank deficient");
  res.intercept = obs.intercept;
  res.beta_matched = obs.beta_m;
  res.beta_unmatched = obs.beta_u;
  res.delta = obs.beta_m - obs.beta_u;

  const double bar = std::isinf(obs.t) ? obs.t : obs.t - kTieSlack * std::max(1.0, std::abs(obs.t));
  const Rng base(seed);
  std::size_t extreme = 0;
  for (std::size_t rep = 0; rep < n_perm; ++rep) {
    Rng rng = base.fork(rep);
    for (std::size_t k = 0; k < coins.size(); ++k) {
      coins[k].resize(key_problems[k]);
      for (auto& c : coins[k]) c = rng.coin() ? 1 : 0;
    }
    const Ols o = solve(moments(true));
    // A singular replicate counts against the observed effect.
    if (!o.ok || !(o.t < bar)) ++extreme;
  }
  res.p_perm = stats::add_one_p(extreme, n_perm);
  return res;
}

// ---------------------------------------------------------------- probes

namespace {

struct SetLayout {
  std::vector<std::size_t> operand_pos;
  std::vector<std::size_t> op_pos;
  std::vector<expr::SubExprAnnotation> annotations;
  int arity = 0;
};

SetLayout layout_of(const dataset::ProblemSet& set) {
  if (set.problems.empty()) throw Error("empty problem set");
  const auto& first = set.problems.front();
  const auto& tmpl = expr::get_template(first.template_id);
  SetLayout l;
  l.arity = tmpl.arity;
  l.operand_pos = expr::operand_positions(expr::instantiate(tmpl, first.operands));
  l.annotations = first.annotations;
  for (const auto& a : first.annotations) l.op_pos.push_back(a.op_char);
  for (const auto& p : set.problems) {
    if (p.template_id != first.template_id) throw Error("problem set mixes templates");
    for (std::size_t k = 0; k < p.annotations.size(); ++k)
      if (p.annotations[k].op_char != l.op_pos[k]) throw Error("operator positions differ within the set");
  }
  return l;
}

// vars: x1..xn, then op1..opK.
Block make_block(const dataset::ProblemSet& set, const SetLayout& l, const ProbeOptions& opts) {
  Block b;
  b.n_problems = set.problems.size();
  const std::size_t nvars = static_cast<std::size_t>(l.arity) + l.op_pos.size();
  b.vars.assign(nvars, std::vector<int>(b.n_problems));
  for (std::size_t i = 0; i < b.n_problems; ++i) {
    const auto& p = set.problems[i];
    for (int k = 0; k < l.arity; ++k) b.vars[static_cast<std::size_t>(k)][i] = p.operands[static_cast<std::size_t>(k)];
    for (std::size_t k = 0; k < p.annotations.size(); ++k)
      b.vars[static_cast<std::size_t>(l.arity) + k][i] = static_cast<int>(p.annotations[k].value);
  }
  b.pairs = std::make_shared<const PairIndex>(opts.max_pairs ? subsample_pairs(b.n_problems, *opts.max_pairs, opts.seed)
                                                             : all_pairs(b.n_problems));
  return b;
}

std::shared_ptr<const std::vector<double>> distance_of(const ActivationTable& t, const Block& b, Kind k, int layer,
                                                      int head, std::size_t pos) {
  return std::make_shared<const std::vector<double>>(t.distances(k, layer, head, pos, b.pairs->a, b.pairs->b));
}

void check_layer(const ActivationTable& t, int layer) {
  if (layer < 1 || layer > t.layers())
    throw Error("layer " + std::to_string(layer) + " outside 1.." + std::to_string(t.layers()));
}

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t s = seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xc2b2ae3d27d4eb4fULL) ^ (c * 0x165667b19e3779f9ULL);
  return splitmix64(s);
}

}  // namespace

DigitProbe digit_probe(const ActivationTable& table, const dataset::ProblemSet& set, int layer, Kind kind,
                       const ProbeOptions& opts) {
  check_layer(table, layer);
  const SetLayout l = layout_of(set);
  DigitProbe out;
  out.pool.blocks.push_back(make_block(set, l, opts));
  const Block& block = out.pool.blocks.front();
  double sum_m = 0.0, sum_u = 0.0;
  std::size_t n = 0;
  for (int k = 0; k < l.arity; ++k) {
    const int control = (k + 1) % l.arity;
    for (int h = 1; h <= table.heads(); ++h) {
      Channel ch{0, k, control, distance_of(table, block, kind, layer, h, l.operand_pos[static_cast<std::size_t>(k)])};
      out.pool.channels.push_back(ch);
      PairPool single;
      single.blocks.push_back(block);
      single.channels.push_back(ch);
      ProbeResult r;
      r.template_id = set.template_id;
      r.layer = layer;
      r.head = h;
      r.slot = slot_label(k + 1);
      r.position = l.operand_pos[static_cast<std::size_t>(k)];
      r.kind = kind;
      r.target = slot_label(k + 1);
      r.r_matched = channel_r(single, 0, false);
      r.r_unmatched = channel_r(single, 0, true);
      r.controls = {{slot_label(control + 1), r.r_unmatched}};
      r.n_pairs = block.pairs->size();
      const std::uint64_t s = sub_seed(opts.seed, static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(h),
                                       static_cast<std::uint64_t>(k + 1));
      r.p_perm = mantel_test(single, Pooling::mean, s, opts.n_perm).p;
      sum_m += r.r_matched;
      sum_u += r.r_unmatched;
      ++n;
      out.results.push_back(std::move(r));

      RegressionRow row;
      row.template_id = set.template_id;
      row.layer = layer;
      row.head = h;
      row.slot = slot_label(k + 1);
      row.kind = kind;
      row.target = slot_label(k + 1) + "~" + slot_label(control + 1);
      row.result = matched_unmatched_regression(single, s + 1, opts.n_perm);
      out.regressions.push_back(std::move(row));
    }
  }
  out.mean_r_matched = sum_m / static_cast<double>(n);
  out.mean_r_unmatched = sum_u / static_cast<double>(n);
  RegressionRow all;
  all.template_id = set.template_id;
  all.layer = layer;
  all.head = 0;
  all.slot = "digits";
  all.kind = kind;
  all.target = "matched~next";
  all.result = matched_unmatched_regression(out.pool, sub_seed(opts.seed, static_cast<std::uint64_t>(layer), 0, 0),
                                            opts.n_perm);
  out.regressions.push_back(std::move(all));
  return out;
}

OperatorProbe operator_probe(const ActivationTable& table, const dataset::ProblemSet& set, int layer, Kind kind,
                             const ProbeOptions& opts) {
  check_layer(table, layer);
  const SetLayout l = layout_of(set);
  OperatorProbe out;
  const Block block = make_block(set, l, opts);
  out.matched.blocks.push_back(block);
  out.controls.blocks.push_back(block);
  const int n_ops = static_cast<int>(l.op_pos.size());
  for (int k = 0; k < n_ops; ++k) {
    const int mk = l.arity + k;
    for (int h = 1; h <= table.heads(); ++h) {
      const auto dist = distance_of(table, block, kind, layer, h, l.op_pos[static_cast<std::size_t>(k)]);
      Channel ch{0, mk, -1, dist};
      out.matched.channels.push_back(ch);
      PairPool single;
      single.blocks.push_back(block);
      single.channels.push_back(ch);
      PairPool ctl;
      ctl.blocks.push_back(block);
      ProbeResult r;
      r.template_id = set.template_id;
      r.layer = layer;
      r.head = h;
      r.slot = op_label(k + 1);
      r.position = l.op_pos[static_cast<std::size_t>(k)];
      r.kind = kind;
      r.target = op_label(k + 1);
      r.r_matched = channel_r(single, 0, false);
      double sum = 0.0;
      for (int j = 0; j < n_ops; ++j) {
        if (j == k) continue;
        Channel c{0, mk, l.arity + j, dist};
        out.controls.channels.push_back(c);
        ctl.channels.push_back(c);
        const double ru = channel_r(ctl, ctl.channels.size() - 1, true);
        r.controls.emplace_back(op_label(j + 1), ru);
        sum += ru;
      }
      r.r_unmatched = sum / static_cast<double>(r.controls.size());
      r.n_pairs = block.pairs->size();
      const std::uint64_t s = sub_seed(opts.seed, static_cast<std::uint64_t>(layer) + 100,
                                       static_cast<std::uint64_t>(h), static_cast<std::uint64_t>(k + 1));
      r.p_perm = mantel_test(single, Pooling::mean, s, opts.n_perm).p;
      out.results.push_back(std::move(r));

      RegressionRow row;
      row.template_id = set.template_id;
      row.layer = layer;
      row.head = h;
      row.slot = op_label(k + 1);
      row.kind = kind;
      row.target = op_label(k + 1) + "~others";
      row.result = matched_unmatched_regression(ctl, s + 1, opts.n_perm);
      out.regressions.push_back(std::move(row));
    }
  }
  RegressionRow all;
  all.template_id = set.template_id;
  all.layer = layer;
  all.head = 0;
  all.slot = "operators";
  all.kind = kind;
  all.target = "matched~others";
  all.result = matched_unmatched_regression(
      out.controls, sub_seed(opts.seed, static_cast<std::uint64_t>(layer) + 100, 0, 0), opts.n_perm);
  out.regressions.push_back(std::move(all));
  return out;
}

PooledResult aggregate_operator_probe(std::span<const OperatorProbe> probes, std::span<const int> template_ids,
                                      const ProbeOptions& opts) {
  if (probes.empty()) throw Error("nothing to pool");
  PooledResult res;
  res.template_ids.assign(template_ids.begin(), template_ids.end());
  PairPool matched, controls;
  for (const auto& p : probes) {
    matched.merge(p.matched);
    controls.merge(p.controls);
  }
  if (matched.channels.empty()) throw Error("nothing to pool");
  res.n_pairs = matched.n_pairs();
  res.r_matched = pool_r(matched, Pooling::pooled, false);
  res.r_unmatched = pool_r(controls, Pooling::pooled, true);
  res.p_matched = mantel_test(matched, Pooling::pooled, sub_seed(opts.seed, 7, 7, 7), opts.n_perm).p;
  res.regression = matched_unmatched_regression(controls, sub_seed(opts.seed, 8, 8, 8), opts.n_perm);
  return res;
}

std::vector<CurvePoint> layer_curve(const ActivationTable& table, const dataset::ProblemSet& set, int op_index,
                                    Kind kind, const ProbeOptions& opts) {
  const SetLayout l = layout_of(set);
  if (op_index < 1 || op_index > static_cast<int>(l.op_pos.size()))
    throw Error("operator " + std::to_string(op_index) + " out of range");
  const Block block = make_block(set, l, opts);
  std::vector<CurvePoint> out;
  for (int layer = 1; layer <= table.layers(); ++layer) {
    std::vector<std::shared_ptr<const std::vector<double>>> dist;
    for (int h = 1; h <= table.heads(); ++h)
      dist.push_back(distance_of(table, block, kind, layer, h, l.op_pos[static_cast<std::size_t>(op_index - 1)]));
    for (std::size_t t = 0; t < l.op_pos.size(); ++t) {
      CurvePoint cp;
      cp.template_id = set.template_id;
      cp.layer = layer;
      cp.slot = op_label(op_index);
      cp.target = op_label(static_cast<int>(t) + 1);
      cp.kind = kind;
      PairPool pool;
      pool.blocks.push_back(block);
      for (int h = 0; h < table.heads(); ++h) {
        pool.channels.push_back({0, l.arity + static_cast<int>(t), -1, dist[static_cast<std::size_t>(h)]});
        cp.per_head.push_back(channel_r(pool, pool.channels.size() - 1));
      }
      cp.mean = stats::mean(cp.per_head);
      cp.min = *std::min_element(cp.per_head.begin(), cp.per_head.end());
      cp.max = *std::max_element(cp.per_head.begin(), cp.per_head.end());
      for (double v : cp.per_head)
        if (std::isnan(v)) cp.min = cp.max = kNaN;
      out.push_back(std::move(cp));
    }
  }
  return out;
}

PositionMap position_map(const ActivationTable& table, const dataset::ProblemSet& set, int layer, Kind kind,
                         const ProbeOptions& opts) {
  check_layer(table, layer);
  const SetLayout l = layout_of(set);
  const Block block = make_block(set, l, opts);
  PositionMap m;
  m.template_id = set.template_id;
  m.layer = layer;
  m.kind = kind;
  m.question = set.problems.front().question;
  m.annotations = l.annotations;
  const std::size_t n_t = l.op_pos.size();
  for (std::size_t t = 0; t < n_t; ++t) m.targets.push_back(op_label(static_cast<int>(t) + 1));
  const std::size_t heads = static_cast<std::size_t>(table.heads());
  m.per_head.assign(heads, std::vector<std::vector<double>>(table.width(), std::vector<double>(n_t)));
  m.r.assign(table.width(), std::vector<double>(n_t, 0.0));
  for (std::size_t pos = 0; pos < table.width(); ++pos) {
    for (std::size_t h = 0; h < heads; ++h) {
      PairPool pool;
      pool.blocks.push_back(block);
      const auto dist = distance_of(table, block, kind, layer, static_cast<int>(h) + 1, pos);
      const FixedRanks fr = fixed_ranks(*dist);
      DiffRanker ranker;
      std::vector<int> diffs(block.pairs->size());
      for (std::size_t t = 0; t < n_t; ++t) {
        fill_diffs(block, block.vars[static_cast<std::size_t>(l.arity) + t], diffs, 0);
        const double r = ranker.correlate(fr, diffs);
        m.per_head[h][pos][t] = r;
        m.r[pos][t] += r / static_cast<double>(heads);
      }
    }
  }
  m.argmax.assign(n_t, 0);
  for (std::size_t t = 0; t < n_t; ++t) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t pos = 0; pos < table.width(); ++pos)
      if (!std::isnan(m.r[pos][t]) && m.r[pos][t] > best) {
        best = m.r[pos][t];
        m.argmax[t] = pos;
      }
  }
  for (const auto& a : l.annotations) {
    for (std::size_t t = 0; t < n_t; ++t) {
      ConstituentMean c;
      c.constituent = a.op_index;
      c.span = a.constituent;
      c.target = op_label(static_cast<int>(t) + 1);
      double full = 0.0, interior = 0.0;
      std::size_t nf = 0, ni = 0;
      for (std::size_t pos = a.constituent.lo; pos < a.constituent.hi; ++pos) {
        full += m.r[pos][t];
        ++nf;
        if (pos != a.op_char) {
          interior += m.r[pos][t];
          ++ni;
        }
      }
      c.mean_r = nf ? full / static_cast<double>(nf) : kNaN;
      c.interior_mean_r = ni ? interior / static_cast<double>(ni) : kNaN;
      m.constituents.push_back(c);
    }
  }
  return m;
}

}  // namespace compprobe::probe
