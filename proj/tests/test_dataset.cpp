#include <doctest.h>

#include <map>

#include "compprobe/dataset.hpp"
#include "compprobe/error.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace compprobe;
using namespace compprobe::dataset;

namespace {

// Brute force over every digit assignment, using only the shunting-yard
// oracle and the intermediate values it produces for each constituent.
std::vector<Operands> brute_valid(const expr::Template& t) {
  std::vector<Operands> out;
  Operands ops(static_cast<std::size_t>(t.arity), 0);
  std::size_t total = 1;
  for (int i = 0; i < t.arity; ++i) total *= 10;
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (int i = t.arity - 1; i >= 0; --i) {
      ops[static_cast<std::size_t>(i)] = static_cast<int>(c % 10);
      c /= 10;
    }
    std::string body;
    std::size_t k = 0;
    for (char ch : t.shape) body += ch == '#' ? static_cast<char>('0' + ops[k++]) : ch;
    // every parenthesized group and every a/b must be integral
    bool ok = true;
    try {
      const auto v = oracle::shunting_yard(body);
      ok = v.d == 1 && v.n >= kMinAnswer && v.n <= kMaxAnswer;
      for (std::size_t i = 0; ok && i < body.size(); ++i) {
        if (body[i] != '/') continue;
        // left operand: digit or parenthesized group ending at i-1
        std::size_t lo = i - 1;
        if (body[lo] == ')') {
          int depth = 0;
          for (std::size_t j = lo + 1; j-- > 0;) {
            if (body[j] == ')') ++depth;
            if (body[j] == '(' && --depth == 0) {
              lo = j;
              break;
            }
          }
        }
        // a preceding '*' binds tighter (left-assoc), extend over it
        while (lo >= 2 && body[lo - 1] == '*') lo -= 2;
        std::size_t hi = i + 2;
        if (body[i + 1] == '(') hi = body.find(')', i) + 1;
        const auto q = oracle::shunting_yard(body.substr(lo, hi - lo));
        ok = q.d == 1;
      }
    } catch (const std::domain_error&) {
      ok = false;
    }
    if (ok) out.push_back(ops);
  }
  return out;
}

}  // namespace

TEST_CASE("enumerate_valid matches brute force for every template") {
  for (const auto& t : expr::all_templates()) {
    if (t.id == 6) continue;  // 10^6 assignments; covered by the enumeration-invariant test below
    CHECK(enumerate_valid(t) == brute_valid(t));
  }
  const auto t1 = enumerate_valid(expr::get_template(1));
  CHECK(std::find(t1.begin(), t1.end(), Operands{1, 2, 3}) != t1.end());
  CHECK(std::find(t1.begin(), t1.end(), Operands{1, 1, 4}) == t1.end());
  for (const auto& o : t1) CHECK(o[2] != 0);
}

TEST_CASE("template 6 enumeration satisfies the validity contract") {
  const auto& t = expr::get_template(6);
  const auto valid = enumerate_valid(t);
  CHECK(std::is_sorted(valid.begin(), valid.end()));
  std::size_t brute = 0;
  // (a+b)/c and (d+e)/f must both be integral and sum into range
  for (int a = 0; a < 10; ++a)
    for (int b = 0; b < 10; ++b)
      for (int c = 1; c < 10; ++c) {
        if ((a + b) % c) continue;
        for (int d = 0; d < 10; ++d)
          for (int e = 0; e < 10; ++e)
            for (int f = 1; f < 10; ++f) {
              if ((d + e) % f) continue;
              const int v = (a + b) / c + (d + e) / f;
              if (v >= kMinAnswer && v <= kMaxAnswer) ++brute;
            }
      }
  CHECK(valid.size() == brute);
}

TEST_CASE("sample_set examples") {
  const auto& t1 = expr::get_template(1);
  const auto s = sample_set(t1, 200, 7, {});
  REQUIRE(s.problems.size() == 200);
  std::set<Operands> seen;
  for (const auto& p : s.problems) {
    CHECK(p.answer >= 1);
    CHECK(p.answer <= 20);
    CHECK(seen.insert(p.operands).second);
    const auto o = oracle::shunting_yard(std::string_view(p.question).substr(expr::kQuestionPrefix.size()));
    CHECK(o.d == 1);
    CHECK(o.n == p.answer);
    CHECK_NOTHROW(validate(p));
  }
  CHECK(sample_set(t1, 200, 7, {}) == s);
  CHECK(sample_set(t1, 200, 8, {}) != s);

  const auto& t2 = expr::get_template(2);
  const auto all = enumerate_valid(t2);
  const std::set<Operands> everything(all.begin(), all.end());
  CHECK_THROWS_AS(sample_set(t2, 1, 7, everything), ExhaustionError);
  CHECK_THROWS_AS(sample_set(t1, 276, 7, {}), ExhaustionError);
}

TEST_CASE("sample_set respects exclude and balance for every template") {
  for (const auto& t : expr::all_templates()) {
    const auto probe = sample_set(t, 200, 7, {});
    const auto excl = operand_set(probe);
    const auto rep = check_balance(probe);
    CHECK_MESSAGE(rep.ok, rep.detail);
    const std::size_t left = enumerate_valid(t).size() - 200;
    const auto other = sample_set(t, std::min<std::size_t>(left, 150), 9, excl);
    for (const auto& p : other.problems) CHECK(excl.count(p.operands) == 0);
    CHECK(check_balance(other, excl).ok);

    // when no bin is saturated the plain bound holds
    std::map<std::int64_t, std::size_t> counts;
    for (const auto& p : probe.problems) ++counts[p.answer];
    bool saturated = false;
    std::map<std::int64_t, std::size_t> avail;
    for (const auto& o : enumerate_valid(t)) {
      Problem p;
      make_problem(t, o, p);
      ++avail[p.answer];
    }
    for (const auto& [a, c] : counts)
      if (c == avail[a]) saturated = true;
    if (!saturated) {
      std::size_t lo = SIZE_MAX, hi = 0;
      for (const auto& [a, c] : avail) {
        const std::size_t got = counts.count(a) ? counts[a] : 0;
        lo = std::min(lo, got);
        hi = std::max(hi, got);
      }
      const std::size_t slack = std::max<std::size_t>(2, (200 + 10 * avail.size() - 1) / (10 * avail.size()));
      CHECK(hi <= lo + slack);
    }
  }
}

TEST_CASE("full_set covers the valid space outside exclude") {
  const auto& t = expr::get_template(3);
  const auto probe = sample_set(t, 200, 7, {});
  const auto train = full_set(t, 100, operand_set(probe));
  CHECK(train.problems.size() + 200 == enumerate_valid(t).size());
  for (const auto& p : train.problems) CHECK(operand_set(probe).count(p.operands) == 0);
  CHECK(full_set(t, 100, operand_set(probe)) == train);
}

TEST_CASE("write_set and read_set round trip") {
  testutil::TempDir dir("ds");
  for (const auto& t : expr::all_templates()) {
    const auto s = sample_set(t, 200, 7, {});
    const auto path = dir / set_filename(Split::probe, t.id);
    write_set(path, s);
    CHECK(read_set(path) == s);
    write_set(dir / "again.jsonl", s);
    CHECK(testutil::slurp(path) == testutil::slurp(dir / "again.jsonl"));
  }
}

TEST_CASE("read_set rejects damaged files") {
  testutil::TempDir dir("dsbad");
  const auto s = sample_set(expr::get_template(1), 200, 7, {});
  const auto path = dir / "p.jsonl";
  write_set(path, s);
  const std::string text = testutil::slurp(path);

  SUBCASE("truncated") {
    testutil::spit(path, text.substr(0, text.size() / 2));
    CHECK_THROWS_AS(read_set(path), ChecksumError);
  }
  SUBCASE("truncated at a line boundary") {
    const auto cut = text.rfind('\n', text.size() - 2);
    testutil::spit(path, text.substr(0, cut + 1));
    CHECK_THROWS_AS(read_set(path), ChecksumError);
  }
  SUBCASE("version 2") {
    std::string bad = text;
    const auto at = bad.find("\"version\":1");
    REQUIRE(at != std::string::npos);
    bad.replace(at, 11, "\"version\":2");
    testutil::spit(path, bad);
    CHECK_THROWS_AS(read_set(path), VersionError);
    bad.replace(at, 11, "\"version\":\"2\"");
    testutil::spit(path, bad);
    CHECK_THROWS_AS(read_set(path), VersionError);
  }
  SUBCASE("tampered answer") {
    std::string bad = text;
    const auto at = bad.find("\"answer\":");
    bad[at + 9] = bad[at + 9] == '9' ? '8' : '9';
    testutil::spit(path, bad);
    CHECK_THROWS_AS(read_set(path), FormatError);
  }
}

TEST_CASE("split round trip") {
  for (Split s : {Split::train, Split::heldout, Split::probe}) CHECK(parse_split(to_string(s)) == s);
  CHECK_THROWS(parse_split("test"));
}
