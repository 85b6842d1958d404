#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace compprobe::expr {

// Exact rational with a positive, reduced denominator.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n) : num(n) {}  // NOLINT: integers promote implicitly
  Rational(std::int64_t n, std::int64_t d);

  bool is_integer() const { return den == 1; }
  double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }

  friend Rational operator+(Rational a, Rational b);
  friend Rational operator*(Rational a, Rational b);
  // Throws DivisionByZeroError when b == 0.
  friend Rational operator/(Rational a, Rational b);
  friend bool operator==(const Rational&, const Rational&) = default;
};

std::string to_string(const Rational& r);

enum class Op : char { add = '+', mul = '*', div = '/' };

inline char symbol(Op op) { return static_cast<char>(op); }

// Half-open character range [lo, hi).
struct Span {
  std::size_t lo = 0;
  std::size_t hi = 0;

  std::size_t size() const { return hi - lo; }
  bool contains(std::size_t pos) const { return pos >= lo && pos < hi; }
  bool contains(const Span& other) const { return other.lo >= lo && other.hi <= hi; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct ExprNode {
  bool leaf = true;
  int digit = 0;              // leaves only
  Op op = Op::add;            // binary nodes only
  int left = -1;              // node indices, binary nodes only
  int right = -1;
  bool parenthesized = false;
  Span span;                  // includes the parentheses when present
  std::size_t op_char = 0;    // binary nodes only
  Rational value;             // filled by instantiate()
};

// Expression tree stored as a flat node array; children precede parents.
struct Expr {
  std::vector<ExprNode> nodes;
  int root = -1;

  const ExprNode& node(int i) const { return nodes.at(static_cast<std::size_t>(i)); }
  const ExprNode& root_node() const { return node(root); }
};

struct Template {
  int id;
  int arity;
  std::string_view shape;  // canonical body with '#' in each operand slot
};

inline constexpr std::string_view kQuestionPrefix = "Evaluate ";
inline constexpr int kTemplateCount = 6;

std::span<const Template> all_templates();
// Throws std::out_of_range for ids outside 1..6.
const Template& get_template(int id);

// Builds the fully valued tree for `operands` substituted into the template.
// Spans refer to positions in the rendered question (prefix included).
// Throws ArityError or DivisionByZeroError.
Expr instantiate(const Template& tmpl, std::span<const int> operands);

// Canonical question: "Evaluate " + body, " + " spaced, '*' and '/' tight.
std::string render(const Expr& expr);
std::string render(const Expr& expr, const Template& tmpl);

struct Parsed {
  int template_id = 0;
  std::vector<int> operands;
  friend bool operator==(const Parsed&, const Parsed&) = default;
};

// Inverse of render(); throws ParseError on anything non-canonical.
Parsed parse(std::string_view question);

// Parses a canonical expression body. Spans are shifted by `offset`.
// Node values are left unset.
Expr parse_expression(std::string_view body, std::size_t offset = 0);

// Bottom-up exact evaluation. Throws DivisionByZeroError.
Rational evaluate(const Expr& expr);
Rational evaluate(const Expr& expr, int node);

// True when every division in the tree yields an integer.
bool divisions_exact(const Expr& expr);

struct SubExprAnnotation {
  int op_index = 0;           // 1-based, evaluation (post-)order
  Op op = Op::add;
  std::size_t op_char = 0;
  Span constituent;
  std::int64_t value = 0;
  friend bool operator==(const SubExprAnnotation&, const SubExprAnnotation&) = default;
};

// One annotation per operator in evaluation order, so the last one is the
// root. Requires integer-valued binary nodes; throws FormatError otherwise or
// when `question` is not the rendering of `expr`.
std::vector<SubExprAnnotation> annotate(const Expr& expr, std::string_view question);

// Character positions of the operand digits, in slot order x1..xn.
std::vector<std::size_t> operand_positions(const Expr& expr);

}  // namespace compprobe::expr
