#include "compprobe/expr.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <stdexcept>

#include "compprobe/error.hpp"

namespace compprobe::expr {

Rational::Rational(std::int64_t n, std::int64_t d) {
  if (d == 0) throw DivisionByZeroError();
  if (d < 0) {
    n = -n;
    d = -d;
  }
  const std::int64_t g = std::gcd(n, d);
  num = g == 0 ? 0 : n / g;
  den = g == 0 ? 1 : d / g;
}

Rational operator+(Rational a, Rational b) {
  return Rational(a.num * b.den + b.num * a.den, a.den * b.den);
}

Rational operator*(Rational a, Rational b) { return Rational(a.num * b.num, a.den * b.den); }

Rational operator/(Rational a, Rational b) {
  if (b.num == 0) throw DivisionByZeroError();
  return Rational(a.num * b.den, a.den * b.num);
}

std::string to_string(const Rational& r) {
  if (r.is_integer()) return std::to_string(r.num);
  return std::to_string(r.num) + "/" + std::to_string(r.den);
}

namespace {

constexpr std::array<Template, kTemplateCount> kTemplates{{
    {1, 3, "(# + #)/#"},
    {2, 4, "(#*#)/(#*#)"},
    {3, 3, "# + #*#"},
    {4, 4, "(# + #*#)/#"},
    {5, 4, "(# + #)/# + #"},
    {6, 6, "(# + #)/# + (# + #)/#"},
}};

// Recursive descent over the canonical grammar:
//   sum    := term (" + " term)*
//   term   := factor (('*' | '/') factor)*
//   factor := digit | '(' sum ')'
class Parser {
 public:
  Parser(std::string_view text, std::size_t offset) : text_(text), offset_(offset) {}

  Expr run() {
    if (text_.empty()) fail("empty expression");
    expr_.root = sum();
    if (pos_ != text_.size()) fail("unexpected character '" + std::string(1, text_[pos_]) + "'");
    return std::move(expr_);
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(what, offset_ + pos_ + 1);
  }

  bool at_plus() const { return text_.substr(pos_, 3) == " + "; }

  int binary(Op op, int left, int right, std::size_t op_char) {
    ExprNode n;
    n.leaf = false;
    n.op = op;
    n.left = left;
    n.right = right;
    n.op_char = op_char;
    n.span = {expr_.nodes[left].span.lo, expr_.nodes[right].span.hi};
    expr_.nodes.push_back(n);
    return static_cast<int>(expr_.nodes.size() - 1);
  }

  int sum() {
    int left = term();
    while (at_plus()) {
      const std::size_t op_char = offset_ + pos_ + 1;
      pos_ += 3;
      int right = term();
      left = binary(Op::add, left, right, op_char);
    }
    return left;
  }

  int term() {
    int left = factor();
    while (pos_ < text_.size() && (text_[pos_] == '*' || text_[pos_] == '/')) {
      const Op op = text_[pos_] == '*' ? Op::mul : Op::div;
      const std::size_t op_char = offset_ + pos_;
      ++pos_;
      int right = factor();
      left = binary(op, left, right, op_char);
    }
    return left;
  }

  int factor() {
    if (pos_ >= text_.size()) fail("unexpected end of input");
    const char c = text_[pos_];
    if (c >= '0' && c <= '9') {
      ExprNode n;
      n.digit = c - '0';
      n.span = {offset_ + pos_, offset_ + pos_ + 1};
      n.value = n.digit;
      ++pos_;
      expr_.nodes.push_back(n);
      return static_cast<int>(expr_.nodes.size() - 1);
    }
    if (c == '(') {
      const std::size_t open = offset_ + pos_;
      ++pos_;
      const int inner = sum();
      if (pos_ >= text_.size() || text_[pos_] != ')') fail("expected ')'");
      ++pos_;
      ExprNode& n = expr_.nodes[inner];
      if (n.parenthesized) fail("redundant parentheses");
      n.parenthesized = true;
      n.span = {open, offset_ + pos_};
      return inner;
    }
    fail("expected digit or '('");
  }

  std::string_view text_;
  std::size_t offset_;
  std::size_t pos_ = 0;
  Expr expr_;
};

void render_node(const Expr& expr, int i, std::string& out, bool placeholders) {
  const ExprNode& n = expr.node(i);
  if (n.parenthesized) out += '(';
  if (n.leaf) {
    out += placeholders ? '#' : static_cast<char>('0' + n.digit);
  } else {
    render_node(expr, n.left, out, placeholders);
    if (n.op == Op::add) {
      out += " + ";
    } else {
      out += symbol(n.op);
    }
    render_node(expr, n.right, out, placeholders);
  }
  if (n.parenthesized) out += ')';
}

void fill_values(Expr& expr) {
  // Children always precede parents in node order.
  for (auto& n : expr.nodes) {
    if (n.leaf) {
      n.value = n.digit;
      continue;
    }
    const Rational a = expr.nodes[n.left].value;
    const Rational b = expr.nodes[n.right].value;
    switch (n.op) {
      case Op::add: n.value = a + b; break;
      case Op::mul: n.value = a * b; break;
      case Op::div: n.value = a / b; break;
    }
  }
}

void post_order(const Expr& expr, int i, std::vector<int>& out) {
  const ExprNode& n = expr.node(i);
  if (n.leaf) return;
  post_order(expr, n.left, out);
  post_order(expr, n.right, out);
  out.push_back(i);
}

}  // namespace

std::span<const Template> all_templates() { return kTemplates; }

const Template& get_template(int id) {
  if (id < 1 || id > kTemplateCount) throw std::out_of_range("template id must be in 1..6, got " + std::to_string(id));
  return kTemplates[static_cast<std::size_t>(id - 1)];
}

Expr parse_expression(std::string_view body, std::size_t offset) {
  return Parser(body, offset).run();
}

Expr instantiate(const Template& tmpl, std::span<const int> operands) {
  if (operands.size() != static_cast<std::size_t>(tmpl.arity)) {
    throw ArityError("template " + std::to_string(tmpl.id) + " takes " + std::to_string(tmpl.arity) +
                     " operands, got " + std::to_string(operands.size()));
  }
  std::string body;
  body.reserve(tmpl.shape.size());
  std::size_t slot = 0;
  for (char c : tmpl.shape) {
    if (c != '#') {
      body += c;
      continue;
    }
    const int d = operands[slot++];
    if (d < 0 || d > 9) throw ArityError("operand " + std::to_string(d) + " is not a single digit");
    body += static_cast<char>('0' + d);
  }
  Expr expr = parse_expression(body, kQuestionPrefix.size());
  fill_values(expr);
  return expr;
}

std::string render(const Expr& expr) {
  std::string out(kQuestionPrefix);
  render_node(expr, expr.root, out, false);
  return out;
}

std::string render(const Expr& expr, const Template& tmpl) {
  std::string shape;
  render_node(expr, expr.root, shape, true);
  if (shape != tmpl.shape) throw FormatError("expression does not have the shape of template " + std::to_string(tmpl.id));
  return render(expr);
}

Parsed parse(std::string_view question) {
  if (!question.starts_with(kQuestionPrefix)) {
    std::size_t i = 0;
    while (i < question.size() && i < kQuestionPrefix.size() && question[i] == kQuestionPrefix[i]) ++i;
    throw ParseError("expected \"Evaluate \" prefix", i + 1);
  }
  const std::string_view body = question.substr(kQuestionPrefix.size());
  const Expr expr = parse_expression(body, kQuestionPrefix.size());
  std::string shape;
  render_node(expr, expr.root, shape, true);
  for (const Template& t : kTemplates) {
    if (t.shape != shape) continue;
    Parsed p;
    p.template_id = t.id;
    for (char c : body)
      if (c >= '0' && c <= '9') p.operands.push_back(c - '0');
    return p;
  }
  throw ParseError("expression matches no template", kQuestionPrefix.size() + 1);
}

Rational evaluate(const Expr& expr, int i) {
  const ExprNode& n = expr.node(i);
  if (n.leaf) return n.digit;
  const Rational a = evaluate(expr, n.left);
  const Rational b = evaluate(expr, n.right);
  switch (n.op) {
    case Op::add: return a + b;
    case Op::mul: return a * b;
    case Op::div: return a / b;
  }
  return {};
}

Rational evaluate(const Expr& expr) { return evaluate(expr, expr.root); }

bool divisions_exact(const Expr& expr) {
  for (const auto& n : expr.nodes) {
    if (n.leaf || n.op != Op::div) continue;
    if (!(expr.nodes[n.left].value / expr.nodes[n.right].value).is_integer()) return false;
  }
  return true;
}

std::vector<SubExprAnnotation> annotate(const Expr& expr, std::string_view question) {
  if (render(expr) != question) throw FormatError("question is not the rendering of the expression");
  std::vector<int> order;
  post_order(expr, expr.root, order);
  std::vector<SubExprAnnotation> out;
  out.reserve(order.size());
  for (int i : order) {
    const ExprNode& n = expr.node(i);
    if (!n.value.is_integer()) throw FormatError("non-integer intermediate value " + to_string(n.value));
    SubExprAnnotation a;
    a.op_index = static_cast<int>(out.size()) + 1;
    a.op = n.op;
    a.op_char = n.op_char;
    a.constituent = n.span;
    a.value = n.value.num;
    out.push_back(a);
  }
  return out;
}

std::vector<std::size_t> operand_positions(const Expr& expr) {
  std::vector<std::size_t> out;
  for (const auto& n : expr.nodes)
    if (n.leaf) out.push_back(n.span.lo);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace compprobe::expr
