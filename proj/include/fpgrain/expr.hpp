#pragma once

// A small expression language for coefficient functions D(x), pi(x,t),
// phi(x) and initial data f0(x).
//
//   expr    ::= term { ("+" | "-") term }
//   term    ::= unary { ("*" | "/") unary }
//   unary   ::= "-" unary | power
//   power   ::= primary [ "^" unary ]          (right associative)
//   primary ::= number | "pi" | "t" | "x1" | "x2"
//             | func "(" expr ")" | "(" expr ")"
//   func    ::= sin | cos | exp | log | sqrt | abs

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fpgrain/errors.hpp"

namespace fpgrain {

class ParseError : public Error {
 public:
  enum class Kind { syntax, unknown_identifier, arity };

  ParseError(Kind kind, std::size_t offset, const std::string& msg)
      : Error(label(kind) + " at offset " + std::to_string(offset) + ": " + msg),
        kind_(kind),
        offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  static std::string label(Kind k) {
    switch (k) {
      case Kind::syntax: return "syntax error";
      case Kind::unknown_identifier: return "unknown identifier";
      case Kind::arity: return "wrong arity";
    }
    return "error";
  }
  Kind kind_;
  std::size_t offset_;
};

class EvalError : public Error {
 public:
  EvalError(const std::string& msg, std::string subexpression)
      : Error(msg + " in '" + subexpression + "'"), subexpression_(std::move(subexpression)) {}
  const std::string& subexpression() const noexcept { return subexpression_; }

 private:
  std::string subexpression_;
};

enum class Func { sin, cos, exp, log, sqrt, abs };

inline const char* func_name(Func f) {
  switch (f) {
    case Func::sin: return "sin";
    case Func::cos: return "cos";
    case Func::exp: return "exp";
    case Func::log: return "log";
    case Func::sqrt: return "sqrt";
    case Func::abs: return "abs";
  }
  return "?";
}

struct ExprNode {
  enum class Kind { number, variable, time, pi, negate, add, sub, mul, div, pow, call };

  Kind kind = Kind::number;
  double value = 0.0;  // number
  int var = 0;         // variable: 0-based axis
  Func func = Func::sin;
  std::shared_ptr<const ExprNode> lhs;  // unary operand / call argument / left operand
  std::shared_ptr<const ExprNode> rhs;
};

/// Immutable expression tree; copies share structure.
class Expr {
 public:
  Expr() = default;
  explicit Expr(std::shared_ptr<const ExprNode> root) : root_(std::move(root)) {}

  const ExprNode* root() const noexcept { return root_.get(); }
  bool empty() const noexcept { return !root_; }

  static Expr constant(double v) {
    auto n = std::make_shared<ExprNode>();
    n->value = v;
    return Expr(std::move(n));
  }

 private:
  std::shared_ptr<const ExprNode> root_;
};

namespace detail {

class Parser {
 public:
  Parser(std::string_view src, int dim) : src_(src), dim_(dim) {}

  Expr run() {
    skip_ws();
    if (pos_ >= src_.size()) throw ParseError(ParseError::Kind::syntax, pos_, "empty expression");
    auto e = expr();
    skip_ws();
    if (pos_ < src_.size())
      throw ParseError(ParseError::Kind::syntax, pos_,
                       std::string("unexpected '") + src_[pos_] + "'");
    return Expr(std::move(e));
  }

 private:
  using Node = std::shared_ptr<const ExprNode>;

  static Node make(ExprNode::Kind k, Node l = nullptr, Node r = nullptr) {
    auto n = std::make_shared<ExprNode>();
    n->kind = k;
    n->lhs = std::move(l);
    n->rhs = std::move(r);
    return n;
  }

  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }
  bool accept(char c) {
    skip_ws();
    if (pos_ < src_.size() && src_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  char peek() {
    skip_ws();
    return pos_ < src_.size() ? src_[pos_] : '\0';
  }

  Node expr() {
    auto lhs = term();
    for (;;) {
      if (accept('+')) lhs = make(ExprNode::Kind::add, lhs, term());
      else if (accept('-')) lhs = make(ExprNode::Kind::sub, lhs, term());
      else return lhs;
    }
  }

  Node term() {
    auto lhs = unary();
    for (;;) {
      if (accept('*')) lhs = make(ExprNode::Kind::mul, lhs, unary());
      else if (accept('/')) lhs = make(ExprNode::Kind::div, lhs, unary());
      else return lhs;
    }
  }

  Node unary() {
    if (accept('-')) return make(ExprNode::Kind::negate, unary());
    return power();
  }

  Node power() {
    auto base = primary();
    if (accept('^')) return make(ExprNode::Kind::pow, base, unary());
    return base;
  }

  Node primary() {
    const char c = peek();
    const std::size_t start = pos_;
    if (c == '(') {
      ++pos_;
      auto e = expr();
      if (!accept(')')) throw ParseError(ParseError::Kind::syntax, pos_, "expected ')'");
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::string id;
      while (pos_ < src_.size() &&
             (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
        id += src_[pos_++];
      if (peek() == '(') return call(id, start);
      if (id == "pi") return make(ExprNode::Kind::pi);
      if (id == "t") return make(ExprNode::Kind::time);
      if (id.size() == 2 && id[0] == 'x' && id[1] >= '1' && id[1] - '0' <= dim_) {
        auto n = std::make_shared<ExprNode>();
        n->kind = ExprNode::Kind::variable;
        n->var = id[1] - '1';
        return n;
      }
      if (lookup_func(id))
        throw ParseError(ParseError::Kind::syntax, pos_, "expected '(' after " + id);
      throw ParseError(ParseError::Kind::unknown_identifier, start, "'" + id + "'");
    }
    if (c == '\0') throw ParseError(ParseError::Kind::syntax, pos_, "unexpected end of input");
    throw ParseError(ParseError::Kind::syntax, pos_, std::string("unexpected '") + c + "'");
  }

  static const Func* lookup_func(const std::string& id) {
    static const Func table[] = {Func::sin, Func::cos, Func::exp, Func::log, Func::sqrt, Func::abs};
    for (const auto& f : table)
      if (id == func_name(f)) return &f;
    return nullptr;
  }

  Node call(const std::string& id, std::size_t start) {
    const Func* f = lookup_func(id);
    if (!f) throw ParseError(ParseError::Kind::unknown_identifier, start, "'" + id + "'");
    accept('(');
    std::vector<Node> args;
    if (peek() != ')') {
      args.push_back(expr());
      while (accept(',')) args.push_back(expr());
    }
    if (!accept(')')) throw ParseError(ParseError::Kind::syntax, pos_, "expected ')'");
    if (args.size() != 1)
      throw ParseError(ParseError::Kind::arity, start,
                       id + " takes 1 argument, got " + std::to_string(args.size()));
    auto n = std::make_shared<ExprNode>();
    n->kind = ExprNode::Kind::call;
    n->func = *f;
    n->lhs = std::move(args.front());
    return n;
  }

  Node number() {
    const std::size_t start = pos_;
    while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    if (pos_ < src_.size() && src_[pos_] == '.') {
      ++pos_;
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    }
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      std::size_t p = pos_ + 1;
      if (p < src_.size() && (src_[p] == '+' || src_[p] == '-')) ++p;
      if (p < src_.size() && std::isdigit(static_cast<unsigned char>(src_[p]))) {
        pos_ = p;
        while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
      }
    }
    const std::string text(src_.substr(start, pos_ - start));
    if (text == ".") throw ParseError(ParseError::Kind::syntax, start, "malformed number");
    auto n = std::make_shared<ExprNode>();
    try {
      n->value = std::stod(text);
    } catch (const std::out_of_range&) {
      throw ParseError(ParseError::Kind::syntax, start, "number out of range");
    }
    return n;
  }

  std::string_view src_;
  int dim_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses `src`; variables x1..x{dim} are accepted.
inline Expr parse_expr(std::string_view src, int dim = 2) {
  return detail::Parser(src, dim).run();
}

/// Fully parenthesised rendering that reparses to an identical tree.
inline std::string to_string(const ExprNode* n) {
  using K = ExprNode::Kind;
  switch (n->kind) {
    case K::number: {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", n->value);
      return buf;
    }
    case K::variable: return "x" + std::to_string(n->var + 1);
    case K::time: return "t";
    case K::pi: return "pi";
    case K::negate: return "(-" + to_string(n->lhs.get()) + ")";
    case K::call: return std::string(func_name(n->func)) + "(" + to_string(n->lhs.get()) + ")";
    default: break;
  }
  const char* op = n->kind == K::add   ? "+"
                   : n->kind == K::sub ? "-"
                   : n->kind == K::mul ? "*"
                   : n->kind == K::div ? "/"
                                       : "^";
  return "(" + to_string(n->lhs.get()) + op + to_string(n->rhs.get()) + ")";
}

inline std::string to_string(const Expr& e) { return e.empty() ? "" : to_string(e.root()); }

inline bool structurally_equal(const ExprNode* a, const ExprNode* b) {
  if (a == b) return true;
  if (!a || !b || a->kind != b->kind) return false;
  using K = ExprNode::Kind;
  switch (a->kind) {
    case K::number: return a->value == b->value;
    case K::variable: return a->var == b->var;
    case K::call:
      return a->func == b->func && structurally_equal(a->lhs.get(), b->lhs.get());
    default:
      return structurally_equal(a->lhs.get(), b->lhs.get()) &&
             structurally_equal(a->rhs.get(), b->rhs.get());
  }
}

inline bool structurally_equal(const Expr& a, const Expr& b) {
  return structurally_equal(a.root(), b.root());
}

inline bool depends_on_time(const ExprNode* n) {
  if (!n) return false;
  if (n->kind == ExprNode::Kind::time) return true;
  return depends_on_time(n->lhs.get()) || depends_on_time(n->rhs.get());
}

inline bool depends_on_time(const Expr& e) { return depends_on_time(e.root()); }

/// Largest variable index (1-based) used, 0 when the expression is constant in x.
inline int max_variable(const ExprNode* n) {
  if (!n) return 0;
  int m = n->kind == ExprNode::Kind::variable ? n->var + 1 : 0;
  return std::max({m, max_variable(n->lhs.get()), max_variable(n->rhs.get())});
}
inline int max_variable(const Expr& e) { return max_variable(e.root()); }

inline double eval_expr(const ExprNode* n, std::span<const double> point, double time) {
  using K = ExprNode::Kind;
  switch (n->kind) {
    case K::number: return n->value;
    case K::variable:
      if (static_cast<std::size_t>(n->var) >= point.size())
        throw EvalError("variable outside the point dimension", to_string(n));
      return point[static_cast<std::size_t>(n->var)];
    case K::time: return time;
    case K::pi: return std::numbers::pi;
    case K::negate: return -eval_expr(n->lhs.get(), point, time);
    case K::add: return eval_expr(n->lhs.get(), point, time) + eval_expr(n->rhs.get(), point, time);
    case K::sub: return eval_expr(n->lhs.get(), point, time) - eval_expr(n->rhs.get(), point, time);
    case K::mul: return eval_expr(n->lhs.get(), point, time) * eval_expr(n->rhs.get(), point, time);
    case K::div: {
      const double num = eval_expr(n->lhs.get(), point, time);
      const double den = eval_expr(n->rhs.get(), point, time);
      if (den == 0.0) throw EvalError("division by zero", to_string(n));
      return num / den;
    }
    case K::pow: {
      const double r = std::pow(eval_expr(n->lhs.get(), point, time),
                                eval_expr(n->rhs.get(), point, time));
      if (!std::isfinite(r)) throw EvalError("domain error", to_string(n));
      return r;
    }
    case K::call: {
      const double x = eval_expr(n->lhs.get(), point, time);
      switch (n->func) {
        case Func::sin: return std::sin(x);
        case Func::cos: return std::cos(x);
        case Func::exp: {
          const double r = std::exp(x);
          if (!std::isfinite(r)) throw EvalError("overflow", to_string(n));
          return r;
        }
        case Func::log:
          if (!(x > 0.0)) throw EvalError("domain error", to_string(n));
          return std::log(x);
        case Func::sqrt:
          if (x < 0.0) throw EvalError("domain error", to_string(n));
          return std::sqrt(x);
        case Func::abs: return std::fabs(x);
      }
    }
  }
  throw EvalError("malformed expression", "?");
}

inline double eval_expr(const Expr& e, std::span<const double> point, double time = 0.0) {
  if (e.empty()) throw EvalError("empty expression", "");
  return eval_expr(e.root(), point, time);
}

}  // namespace fpgrain
