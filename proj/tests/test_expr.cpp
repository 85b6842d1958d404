#include <doctest.h>

#include <set>

#include "compprobe/error.hpp"
#include "compprobe/expr.hpp"
#include "compprobe/rng.hpp"
#include "oracles.hpp"

using namespace compprobe;
using namespace compprobe::expr;

namespace {

std::vector<int> random_operands(Rng& rng, int arity) {
  std::vector<int> ops(static_cast<std::size_t>(arity));
  for (auto& o : ops) o = static_cast<int>(rng.below(10));
  return ops;
}

// Random instantiation that does not divide by zero.
Expr random_expr(Rng& rng, const Template& t, std::vector<int>& ops) {
  while (true) {
    ops = random_operands(rng, t.arity);
    try {
      return instantiate(t, ops);
    } catch (const DivisionByZeroError&) {
    }
  }
}

}  // namespace

TEST_CASE("templates have the documented shapes and arities") {
  const int arity[] = {3, 4, 3, 4, 4, 6};
  REQUIRE(all_templates().size() == 6);
  for (int id = 1; id <= 6; ++id) CHECK(get_template(id).arity == arity[id - 1]);
  CHECK_THROWS_AS(get_template(0), std::out_of_range);
  CHECK_THROWS_AS(get_template(7), std::out_of_range);
}

TEST_CASE("instantiate examples") {
  CHECK(evaluate(instantiate(get_template(1), std::vector{1, 2, 3})) == Rational(1));
  CHECK(evaluate(instantiate(get_template(3), std::vector{4, 5, 2})) == Rational(14));
  const auto e6 = instantiate(get_template(6), std::vector{1, 2, 3, 4, 5, 9});
  CHECK(evaluate(e6) == Rational(2));
  const auto o = oracle::shunting_yard("(1 + 2)/3 + (4 + 5)/9");
  CHECK(o.n == 2);
  CHECK(o.d == 1);
}

TEST_CASE("instantiate errors") {
  CHECK_THROWS_AS(instantiate(get_template(1), std::vector{1, 2}), ArityError);
  CHECK_THROWS_AS(instantiate(get_template(1), std::vector{1, 2, 0}), DivisionByZeroError);
  const auto e = instantiate(get_template(1), std::vector{1, 1, 4});
  CHECK(evaluate(e) == Rational(1, 2));
  CHECK_FALSE(divisions_exact(e));
}

TEST_CASE("render examples") {
  CHECK(render(instantiate(get_template(1), std::vector{1, 2, 3})) == "Evaluate (1 + 2)/3");
  CHECK(render(instantiate(get_template(3), std::vector{4, 5, 2})) == "Evaluate 4 + 5*2");
  CHECK(render(instantiate(get_template(6), std::vector{1, 2, 3, 4, 5, 9})) == "Evaluate (1 + 2)/3 + (4 + 5)/9");
}

TEST_CASE("parse examples and errors") {
  CHECK(parse("Evaluate (1 + 2)/3") == Parsed{1, {1, 2, 3}});
  CHECK(parse("Evaluate (2*3)/(1*2)") == Parsed{2, {2, 3, 1, 2}});
  try {
    parse("Evaluate (1 + 2/3");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.column() == 18);
    CHECK(std::string(e.what()).find("offset 18") != std::string::npos);
  }
  CHECK_THROWS_AS(parse("Evaluate (1+2)/3"), ParseError);
  CHECK_THROWS_AS(parse("Evaluate ((1 + 2))/3"), ParseError);
  CHECK_THROWS_AS(parse("Compute (1 + 2)/3"), ParseError);
  CHECK_THROWS_AS(parse("Evaluate (1 + 2)/3 "), ParseError);
  CHECK_THROWS_AS(parse("Evaluate 1 + 2"), ParseError);  // no template has this shape
}

TEST_CASE("evaluate examples") {
  CHECK(evaluate(parse_expression("4*5 + 2*3")) == Rational(26));
  CHECK(evaluate(parse_expression("(2*3)/(1*2)")) == Rational(3));
  // multi-digit operands are outside the grammar, so only the oracle sees this one
  const auto o = oracle::shunting_yard("(12/3 + 10/2)/3");
  CHECK(o.n == 3);
  CHECK(o.d == 1);
  CHECK_THROWS_AS(evaluate(parse_expression("1/0")), DivisionByZeroError);
}

TEST_CASE("annotate examples") {
  {
    const auto e = instantiate(get_template(1), std::vector{1, 2, 3});
    const std::string q = render(e);
    const auto a = annotate(e, q);
    REQUIRE(a.size() == 2);
    CHECK(a[0].op == Op::add);
    CHECK(a[0].value == 3);
    CHECK(q.substr(a[0].constituent.lo, a[0].constituent.size()) == "(1 + 2)");
    CHECK(a[1].op == Op::div);
    CHECK(a[1].value == 1);
    CHECK(q.substr(a[1].constituent.lo, a[1].constituent.size()) == "(1 + 2)/3");
  }
  {
    const auto e = instantiate(get_template(5), std::vector{1, 2, 3, 4});
    const auto a = annotate(e, render(e));
    REQUIRE(a.size() == 3);
    CHECK(a[0].value == 3);
    CHECK(a[1].value == 1);
    CHECK(a[2].value == 5);
    CHECK(std::string{symbol(a[0].op), symbol(a[1].op), symbol(a[2].op)} == "+/+");
  }
  {
    const auto e = instantiate(get_template(4), std::vector{2, 2, 3, 4});
    const std::string q = render(e);
    const auto a = annotate(e, q);
    REQUIRE(a.size() == 3);
    CHECK(std::string{symbol(a[0].op), symbol(a[1].op), symbol(a[2].op)} == "*+/");
    // each constituent re-evaluated by the independent evaluator
    const long long expect[] = {6, 8, 2};
    for (std::size_t k = 0; k < 3; ++k) {
      const auto o = oracle::shunting_yard(q.substr(a[k].constituent.lo, a[k].constituent.size()));
      CHECK(o.d == 1);
      CHECK(o.n == expect[k]);
      CHECK(a[k].value == expect[k]);
    }
  }
}

TEST_CASE("round trip over 10,000 random instantiations per template") {
  Rng rng(101);
  for (const auto& t : all_templates()) {
    for (int i = 0; i < 10000; ++i) {
      std::vector<int> ops;
      const Expr e = random_expr(rng, t, ops);
      const Parsed p = parse(render(e));
      REQUIRE(p.template_id == t.id);
      REQUIRE(p.operands == ops);
    }
  }
}

TEST_CASE("evaluator agrees with the shunting-yard oracle") {
  Rng rng(202);
  for (const auto& t : all_templates()) {
    int disagreements = 0;
    for (int i = 0; i < 10000; ++i) {
      std::vector<int> ops;
      const Expr e = random_expr(rng, t, ops);
      const std::string q = render(e);
      const Rational mine = evaluate(e);
      const auto ref = oracle::shunting_yard(std::string_view(q).substr(kQuestionPrefix.size()));
      if (mine.num != ref.n || mine.den != ref.d) ++disagreements;
    }
    CHECK(disagreements == 0);
  }
}

TEST_CASE("fixed width and tree invariants") {
  Rng rng(303);
  for (const auto& t : all_templates()) {
    std::set<std::size_t> widths;
    for (int i = 0; i < 2000; ++i) {
      std::vector<int> ops;
      const Expr e = random_expr(rng, t, ops);
      const std::string q = render(e);
      widths.insert(q.size());
      for (const auto& n : e.nodes) {
        if (n.leaf) {
          CHECK(n.value == Rational(n.digit));
          CHECK(n.span.size() == 1);
          continue;
        }
        const auto& l = e.node(n.left);
        const auto& r = e.node(n.right);
        CHECK(n.span.contains(l.span));
        CHECK(n.span.contains(r.span));
        CHECK(l.span.hi <= r.span.lo);
        CHECK(n.op_char >= l.span.hi);
        CHECK(n.op_char < r.span.lo);
        CHECK(q[n.op_char] == symbol(n.op));
      }
    }
    CHECK(widths.size() == 1);
  }
}

TEST_CASE("annotation consistency") {
  Rng rng(404);
  for (const auto& t : all_templates()) {
    int checked = 0;
    while (checked < 500) {
      std::vector<int> ops;
      const Expr e = random_expr(rng, t, ops);
      if (!divisions_exact(e)) continue;
      const std::string q = render(e);
      const auto ann = annotate(e, q);
      REQUIRE_FALSE(ann.empty());
      CHECK(Rational(ann.back().value) == evaluate(e));
      for (const auto& a : ann) {
        CHECK(a.constituent.contains(a.op_char));
        CHECK(q[a.op_char] == symbol(a.op));
        const auto sub = parse_expression(q.substr(a.constituent.lo, a.constituent.size()));
        CHECK(evaluate(sub) == Rational(a.value));
      }
      ++checked;
    }
  }
}

TEST_CASE("rational arithmetic") {
  CHECK(Rational(2, 4) == Rational(1, 2));
  CHECK(Rational(1, -2) == Rational(-1, 2));
  CHECK(Rational(1, 2) + Rational(1, 3) == Rational(5, 6));
  CHECK(Rational(2, 3) * Rational(3, 4) == Rational(1, 2));
  CHECK(Rational(1, 2) / Rational(1, 4) == Rational(2));
  CHECK_THROWS_AS(Rational(1) / Rational(0), DivisionByZeroError);
  CHECK(to_string(Rational(3, 4)) == "3/4");
}
