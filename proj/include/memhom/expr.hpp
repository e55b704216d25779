#pragma once
// Small closed-form expression language for forcing fields.
//
//   expr   := term (('+' | '-') term)*
//   term   := unary (('*' | '/') unary)*
//   unary  := ('+' | '-') unary | power
//   power  := atom ('^' unary)?
//   atom   := number | name | name '(' expr ')' | '(' expr ')'
//
// Names: x, y, z (axes 0, 1, 2), x1..x3, t, pi, e. In 2D "z" also denotes the
// vertical axis 1. Functions: sin cos tan exp log sqrt abs tanh.

#include <array>
#include <cctype>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "memhom/errors.hpp"

namespace memhom {

struct ExprVars {
  std::array<double, 3> x{0, 0, 0};
  double t = 0;
  int dim = 3;
};

class Expr {
 public:
  Expr() : root_(constant(0.0)) {}
  static Expr parse(const std::string& text) {
    Parser p{text, 0};
    Expr e;
    e.root_ = p.expr();
    p.skip();
    if (p.i != text.size()) throw ConfigError("expression: unexpected '" + text.substr(p.i) + "' in \"" + text + "\"");
    e.text_ = text;
    return e;
  }
  static Expr number(double v) {
    Expr e;
    e.root_ = constant(v);
    e.text_ = std::to_string(v);
    return e;
  }

  double operator()(const ExprVars& v) const { return root_->eval(v); }
  double operator()(const std::array<double, 3>& x, double t, int dim = 3) const { return root_->eval({x, t, dim}); }
  bool is_zero_constant() const { return root_->kind == Node::Const && root_->value == 0.0; }
  const std::string& text() const { return text_; }

 private:
  struct Node {
    enum Kind { Const, Var, Neg, Add, Sub, Mul, Div, Pow, Call } kind = Const;
    double value = 0;
    int var = 0;  // 0..2 axes, 3 time, 4 vertical axis
    double (*fn)(double) = nullptr;
    std::shared_ptr<const Node> a, b;

    double eval(const ExprVars& v) const {
      switch (kind) {
        case Const: return value;
        case Var:
          if (var == 3) return v.t;
          if (var == 4) return v.x[v.dim - 1];
          return v.x[var];
        case Neg: return -a->eval(v);
        case Add: return a->eval(v) + b->eval(v);
        case Sub: return a->eval(v) - b->eval(v);
        case Mul: return a->eval(v) * b->eval(v);
        case Div: return a->eval(v) / b->eval(v);
        case Pow: return std::pow(a->eval(v), b->eval(v));
        case Call: return fn(a->eval(v));
      }
      return 0;
    }
  };
  using NodeP = std::shared_ptr<const Node>;

  static NodeP constant(double v) {
    auto n = std::make_shared<Node>();
    n->value = v;
    return n;
  }
  static NodeP binary(Node::Kind k, NodeP a, NodeP b) {
    auto n = std::make_shared<Node>();
    n->kind = k;
    n->a = std::move(a);
    n->b = std::move(b);
    return n;
  }

  struct Parser {
    const std::string& s;
    size_t i;

    void skip() {
      while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    }
    bool eat(char c) {
      skip();
      if (i < s.size() && s[i] == c) { ++i; return true; }
      return false;
    }
    [[noreturn]] void fail(const std::string& what) {
      throw ConfigError("expression: " + what + " at position " + std::to_string(i) + " in \"" + s + "\"");
    }

    NodeP expr() {
      NodeP l = term();
      for (;;) {
        if (eat('+')) l = binary(Node::Add, l, term());
        else if (eat('-')) l = binary(Node::Sub, l, term());
        else return l;
      }
    }
    NodeP term() {
      NodeP l = unary();
      for (;;) {
        if (eat('*')) l = binary(Node::Mul, l, unary());
        else if (eat('/')) l = binary(Node::Div, l, unary());
        else return l;
      }
    }
    NodeP unary() {
      if (eat('-')) {
        auto n = std::make_shared<Node>();
        n->kind = Node::Neg;
        n->a = unary();
        return n;
      }
      if (eat('+')) return unary();
      return power();
    }
    NodeP power() {
      NodeP base = atom();
      if (eat('^')) return binary(Node::Pow, base, unary());
      return base;
    }
    NodeP atom() {
      skip();
      if (i >= s.size()) fail("unexpected end");
      if (eat('(')) {
        NodeP e = expr();
        if (!eat(')')) fail("missing ')'");
        return e;
      }
      char c = s[i];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        size_t used = 0;
        double v;
        try {
          v = std::stod(s.substr(i), &used);
        } catch (const std::exception&) {
          fail("bad number");
        }
        i += used;
        return constant(v);
      }
      if (std::isalpha(static_cast<unsigned char>(c))) {
        size_t j = i;
        while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_')) ++j;
        std::string name = s.substr(i, j - i);
        i = j;
        if (eat('(')) {
          auto n = std::make_shared<Node>();
          n->kind = Node::Call;
          n->fn = function(name);
          n->a = expr();
          if (!eat(')')) fail("missing ')' after argument of " + name);
          return n;
        }
        return variable(name);
      }
      fail(std::string("unexpected character '") + c + "'");
    }

    NodeP variable(const std::string& name) {
      if (name == "pi") return constant(M_PI);
      if (name == "e") return constant(std::exp(1.0));
      auto n = std::make_shared<Node>();
      n->kind = Node::Var;
      if (name == "x" || name == "x1") n->var = 0;
      else if (name == "y" || name == "x2") n->var = 1;
      else if (name == "x3") n->var = 2;
      else if (name == "z") n->var = 4;
      else if (name == "t") n->var = 3;
      else fail("unknown name '" + name + "'");
      return n;
    }

    double (*function(const std::string& name))(double) {
      if (name == "sin") return [](double v) { return std::sin(v); };
      if (name == "cos") return [](double v) { return std::cos(v); };
      if (name == "tan") return [](double v) { return std::tan(v); };
      if (name == "exp") return [](double v) { return std::exp(v); };
      if (name == "log") return [](double v) { return std::log(v); };
      if (name == "sqrt") return [](double v) { return std::sqrt(v); };
      if (name == "abs") return [](double v) { return std::abs(v); };
      if (name == "tanh") return [](double v) { return std::tanh(v); };
      fail("unknown function '" + name + "'");
    }
  };

  NodeP root_;
  std::string text_ = "0";
};

}  // namespace memhom
