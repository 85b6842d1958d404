#include "compprobe/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <regex>

#include "compprobe/checksum.hpp"
#include "compprobe/error.hpp"
#include "compprobe/rng.hpp"

namespace compprobe::dataset {

using nlohmann::json;

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::heldout: return "heldout";
    case Split::probe: return "probe";
  }
  return "probe";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "heldout") return Split::heldout;
  if (s == "probe") return Split::probe;
  throw FormatError("unknown split tag '" + std::string(s) + "'");
}

bool make_problem(const expr::Template& tmpl, const Operands& operands, Problem& out) {
  expr::Expr e;
  try {
    e = expr::instantiate(tmpl, operands);
  } catch (const DivisionByZeroError&) {
    return false;
  }
  if (!expr::divisions_exact(e)) return false;
  const expr::Rational answer = e.root_node().value;
  if (!answer.is_integer() || answer.num < kMinAnswer || answer.num > kMaxAnswer) return false;
  out.template_id = tmpl.id;
  out.operands = operands;
  out.question = expr::render(e);
  out.answer = answer.num;
  out.annotations = expr::annotate(e, out.question);
  return true;
}

std::vector<Operands> enumerate_valid(const expr::Template& tmpl) {
  std::vector<Operands> out;
  Operands ops(static_cast<std::size_t>(tmpl.arity), 0);
  Problem scratch;
  for (;;) {
    if (make_problem(tmpl, ops, scratch)) out.push_back(ops);
    // Odometer increment, last slot fastest, giving lexicographic order.
    int k = tmpl.arity - 1;
    while (k >= 0 && ops[static_cast<std::size_t>(k)] == 9) ops[static_cast<std::size_t>(k--)] = 0;
    if (k < 0) break;
    ++ops[static_cast<std::size_t>(k)];
  }
  return out;
}

namespace {

struct Candidate {
  Operands operands;
  std::int64_t answer;
};

std::vector<Candidate> candidates(const expr::Template& tmpl, const std::set<Operands>& exclude) {
  std::vector<Candidate> pool;
  Problem p;
  for (auto& ops : enumerate_valid(tmpl)) {
    if (exclude.count(ops)) continue;
    make_problem(tmpl, ops, p);
    pool.push_back({std::move(ops), p.answer});
  }
  return pool;
}

ProblemSet assemble(const expr::Template& tmpl, std::uint64_t seed, Split split,
                    const std::vector<const Operands*>& chosen) {
  ProblemSet set;
  set.template_id = tmpl.id;
  set.seed = seed;
  set.split = split;
  set.problems.reserve(chosen.size());
  for (const Operands* ops : chosen) {
    Problem p;
    make_problem(tmpl, *ops, p);
    p.id = static_cast<std::int64_t>(set.problems.size());
    set.problems.push_back(std::move(p));
  }
  return set;
}

}  // namespace

ProblemSet sample_set(const expr::Template& tmpl, std::size_t n, std::uint64_t seed,
                      const std::set<Operands>& exclude, Split split) {
  if (n == 0) throw ExhaustionError("requested an empty problem set");
  const std::vector<Candidate> pool = candidates(tmpl, exclude);
  if (pool.size() < n) {
    throw ExhaustionError("template " + std::to_string(tmpl.id) + " has only " + std::to_string(pool.size()) +
                          " valid operand vectors outside the exclusion set; " + std::to_string(n) + " requested");
  }
  std::map<std::int64_t, std::size_t> available;
  for (const auto& c : pool) ++available[c.answer];

  // Water level: smallest L with sum(min(avail, L)) >= n.
  std::size_t level = 0;
  auto filled = [&](std::size_t l) {
    std::size_t s = 0;
    for (const auto& [bin, count] : available) s += std::min(count, l);
    return s;
  };
  while (filled(level) < n) ++level;

  Rng rng(seed);
  std::map<std::int64_t, std::size_t> quota;
  std::vector<std::int64_t> topped;
  std::size_t assigned = 0;
  for (const auto& [bin, count] : available) {
    quota[bin] = std::min(count, level - 1);
    assigned += quota[bin];
    if (count >= level) topped.push_back(bin);
  }
  rng.shuffle(std::span<std::int64_t>(topped));
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++quota[topped[i]];

  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));

  std::map<std::int64_t, std::size_t> taken;
  std::vector<const Operands*> chosen;
  chosen.reserve(n);
  for (std::size_t idx : order) {
    const Candidate& c = pool[idx];
    if (taken[c.answer] >= quota[c.answer]) continue;
    ++taken[c.answer];
    chosen.push_back(&c.operands);
    if (chosen.size() == n) break;
  }
  return assemble(tmpl, seed, split, chosen);
}

ProblemSet full_set(const expr::Template& tmpl, std::uint64_t seed, const std::set<Operands>& exclude, Split split) {
  const std::vector<Candidate> pool = candidates(tmpl, exclude);
  if (pool.empty()) throw ExhaustionError("template " + std::to_string(tmpl.id) + " has no candidates left");
  std::vector<const Operands*> chosen;
  chosen.reserve(pool.size());
  for (const auto& c : pool) chosen.push_back(&c.operands);
  Rng rng(seed);
  rng.shuffle(std::span<const Operands*>(chosen));
  return assemble(tmpl, seed, split, chosen);
}

ProblemSet uniform_set(const expr::Template& tmpl, std::size_t n, std::uint64_t seed, const std::set<Operands>& exclude,
                       Split split) {
  const std::vector<Candidate> pool = candidates(tmpl, exclude);
  if (pool.size() < n)
    throw ExhaustionError("template " + std::to_string(tmpl.id) + " has " + std::to_string(pool.size()) +
                          " candidates left, " + std::to_string(n) + " requested");
  std::vector<const Operands*> chosen;
  chosen.reserve(pool.size());
  for (const auto& c : pool) chosen.push_back(&c.operands);
  Rng rng(seed);
  rng.shuffle(std::span<const Operands*>(chosen));
  chosen.resize(n);
  return assemble(tmpl, seed, split, chosen);
}

BalanceReport check_balance(const ProblemSet& set, const std::set<Operands>& exclude) {
  BalanceReport report;
  const expr::Template& tmpl = expr::get_template(set.template_id);
  for (const auto& c : candidates(tmpl, exclude)) ++report.available[c.answer];
  for (const auto& p : set.problems) ++report.counts[p.answer];
  const std::size_t bins = report.available.size();
  const std::size_t n = set.problems.size();
  report.slack = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(n) / static_cast<double>(bins))));
  for (const auto& [a, avail_a] : report.available) {
    const std::size_t ca = report.counts.count(a) ? report.counts.at(a) : 0;
    for (const auto& [b, avail_b] : report.available) {
      const std::size_t cb = report.counts.count(b) ? report.counts.at(b) : 0;
      if (ca > cb + report.slack && cb < avail_b) {
        report.ok = false;
        report.detail = "answer " + std::to_string(a) + " has " + std::to_string(ca) + " problems but unsaturated answer " +
                        std::to_string(b) + " has only " + std::to_string(cb);
        return report;
      }
    }
  }
  return report;
}

void validate(const Problem& p) {
  const auto fail = [&](const std::string& what) {
    throw FormatError("problem " + std::to_string(p.id) + ": " + what);
  };
  if (p.template_id < 1 || p.template_id > expr::kTemplateCount) fail("bad template id");
  Problem ref;
  if (!make_problem(expr::get_template(p.template_id), p.operands, ref)) fail("operands do not form a valid problem");
  if (ref.question != p.question) fail("question does not match its operands");
  if (ref.answer != p.answer) fail("answer does not match the expression value");
  if (ref.annotations != p.annotations) fail("annotations do not match the expression");
  if (expr::parse(p.question) != expr::Parsed{p.template_id, p.operands}) fail("question does not parse back");
}

namespace {

json to_json(const Problem& p) {
  json anns = json::array();
  for (const auto& a : p.annotations) {
    anns.push_back({{"op_index", a.op_index},
                    {"op_char", a.op_char},
                    {"value", a.value},
                    {"span", {a.constituent.lo, a.constituent.hi}}});
  }
  return {{"id", p.id}, {"operands", p.operands}, {"question", p.question}, {"answer", p.answer}, {"annotations", anns}};
}

Problem problem_from_json(const json& j, int template_id) {
  Problem p;
  p.id = j.at("id").get<std::int64_t>();
  p.template_id = template_id;
  p.operands = j.at("operands").get<Operands>();
  p.question = j.at("question").get<std::string>();
  p.answer = j.at("answer").get<std::int64_t>();
  for (const auto& a : j.at("annotations")) {
    expr::SubExprAnnotation s;
    s.op_index = a.at("op_index").get<int>();
    s.op_char = a.at("op_char").get<std::size_t>();
    s.value = a.at("value").get<std::int64_t>();
    s.constituent = {a.at("span").at(0).get<std::size_t>(), a.at("span").at(1).get<std::size_t>()};
    if (s.op_char >= p.question.size()) throw FormatError("annotation operator position out of range");
    const char c = p.question[s.op_char];
    if (c != '+' && c != '*' && c != '/') throw FormatError("annotation does not point at an operator");
    s.op = static_cast<expr::Op>(c);
    p.annotations.push_back(s);
  }
  return p;
}

}  // namespace

void write_set(const std::filesystem::path& path, const ProblemSet& set) {
  std::string body;
  for (const auto& p : set.problems) {
    body += to_json(p).dump();
    body += '\n';
  }
  const json header = {{"format", kFormatName},
                       {"version", kFormatVersion},
                       {"template_id", set.template_id},
                       {"seed", set.seed},
                       {"split_tag", to_string(set.split)},
                       {"count", set.problems.size()},
                       {"checksum", hex32(crc32(body))}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << header.dump() << '\n' << body;
  if (!out) throw Error("write failed: " + path.string());
}

ProblemSet read_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": header is not an object: " + e.what());
  }
  if (header.value("format", "") != kFormatName) throw FormatError(path.string() + ": not a problem file");
  const auto version = header.at("version");
  if (!version.is_number_integer() || version.get<int>() != kFormatVersion) {
    throw VersionError(path.string() + ": file version " + version.dump() + ", reader version " +
                       std::to_string(kFormatVersion));
  }
  std::vector<std::string> lines;
  std::uint32_t crc = 0;
  while (std::getline(in, line)) {
    lines.push_back(line);
    crc = crc32(line, crc);
    crc = crc32("\n", crc);
  }
  if (hex32(crc) != header.at("checksum").get<std::string>()) {
    throw ChecksumError(path.string() + ": checksum mismatch (file truncated or modified)");
  }
  if (lines.size() != header.at("count").get<std::size_t>()) {
    throw FormatError(path.string() + ": record count does not match header");
  }
  ProblemSet set;
  set.template_id = header.at("template_id").get<int>();
  set.seed = header.at("seed").get<std::uint64_t>();
  set.split = parse_split(header.at("split_tag").get<std::string>());
  std::set<Operands> seen;
  for (const auto& l : lines) {
    Problem p;
    try {
      p = problem_from_json(json::parse(l), set.template_id);
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": malformed record: " + e.what());
    }
    validate(p);
    if (!seen.insert(p.operands).second) throw FormatError(path.string() + ": duplicate operand vector");
    set.problems.push_back(std::move(p));
  }
  return set;
}

std::set<Operands> operand_set(const ProblemSet& set) {
  std::set<Operands> out;
  for (const auto& p : set.problems) out.insert(p.operands);
  return out;
}

namespace {
const std::regex kSetName("(train|heldout|probe)_t[1-6]\\.jsonl");
}  // namespace

std::vector<std::filesystem::path> list_sets(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && std::regex_match(entry.path().filename().string(), kSetName)) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::string set_filename(Split split, int template_id) {
  return std::string(to_string(split)) + "_t" + std::to_string(template_id) + ".jsonl";
}

}  // namespace compprobe::dataset
