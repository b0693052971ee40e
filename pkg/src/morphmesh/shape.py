"""Desired-surface expressions ``z = f(x, y, t)``.

Grammar (whitespace-insensitive)::

    expr      := piecewise | sum
    piecewise := "piecewise" "(" branch { "," branch } "," sum ")"
    branch    := sum "if" "t" ( "<=" | "<" ) signed_number
    sum       := product { ( "+" | "-" ) product }
    product   := unary { ( "*" | "/" ) unary }
    unary     := "-" unary | power
    power     := atom [ "^" unary ]
    atom      := number | "x" | "y" | "t" | "pi" | func "(" sum ")" | "(" sum ")"
    func      := "sin" | "cos" | "exp" | "sqrt" | "abs" | "log" | "sign"

``+ - * /`` associate to the left, ``^`` to the right. Piecewise branches are
tried in order and the first satisfied guard wins; the trailing expression
is the fallback. A unary minus applied directly to a literal is folded into
the literal, so ``-2`` parses to the constant -2.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import EvalError, ParseError, UnknownShape

VARIABLES = ("x", "y", "t")
FUNCTIONS = ("sin", "cos", "exp", "sqrt", "abs", "log", "sign")


# ---------------------------------------------------------------------------
# syntax tree

class Expr:
    __slots__ = ()

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __str__(self):
        return to_string(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr


@dataclass(frozen=True)
class Branch:
    op: str
    threshold: float
    expr: Expr


@dataclass(frozen=True)
class Piecewise(Expr):
    branches: tuple
    otherwise: Expr


def _lift(v):
    return v if isinstance(v, Expr) else Num(float(v))


X, Y, T = Var("x"), Var("y"), Var("t")


# ---------------------------------------------------------------------------
# parsing

class _Token(NamedTuple):
    kind: str
    text: str
    offset: int


_SINGLE = set("+-*/^(),")


def _tokenize(src):
    tokens = []
    i = 0
    while i < len(src):
        c = src[i]
        if c.isspace():
            i += 1
        elif c in "<":
            if src.startswith("<=", i):
                tokens.append(_Token("op", "<=", i))
                i += 2
            else:
                tokens.append(_Token("op", "<", i))
                i += 1
        elif c in _SINGLE:
            tokens.append(_Token("op", c, i))
            i += 1
        elif c.isdigit() or (c == "." and i + 1 < len(src) and src[i + 1].isdigit()):
            j = i
            while j < len(src) and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < len(src) and src[j] in "eE":
                k = j + 1
                if k < len(src) and src[k] in "+-":
                    k += 1
                if k < len(src) and src[k].isdigit():
                    while k < len(src) and src[k].isdigit():
                        k += 1
                    j = k
            text = src[i:j]
            try:
                float(text)
            except ValueError:
                raise ParseError(f"malformed number {text!r}", i) from None
            tokens.append(_Token("num", text, i))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < len(src) and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(_Token("name", src[i:j], i))
            i = j
        else:
            raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(_Token("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src):
        self.tokens = _tokenize(src)
        self.pos = 0

    @property
    def tok(self):
        return self.tokens[self.pos]

    def take(self):
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def expect(self, text):
        t = self.take()
        if t.text != text:
            raise ParseError(f"expected {text!r}, found {t.text or 'end of input'!r}", t.offset)
        return t

    def parse(self):
        if self.tok.kind == "name" and self.tok.text == "piecewise":
            e = self.piecewise()
        else:
            e = self.sum()
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.offset)
        return e

    def piecewise(self):
        self.take()
        self.expect("(")
        branches = []
        while True:
            e = self.sum()
            if self.tok.kind == "name" and self.tok.text == "if":
                self.take()
                var = self.take()
                if var.text != "t":
                    raise ParseError("piecewise guards must test t", var.offset)
                op = self.take()
                if op.text not in ("<=", "<"):
                    raise ParseError("guard comparison must be <= or <", op.offset)
                sign = 1.0
                if self.tok.text == "-":
                    self.take()
                    sign = -1.0
                num = self.take()
                if num.kind != "num":
                    raise ParseError("guard threshold must be a number", num.offset)
                branches.append(Branch(op.text, sign * float(num.text), e))
                self.expect(",")
            else:
                self.expect(")")
                if not branches:
                    raise ParseError("piecewise needs at least one guarded branch", self.tok.offset)
                return Piecewise(tuple(branches), e)

    def sum(self):
        left = self.product()
        while self.tok.text in ("+", "-"):
            op = self.take().text
            left = BinOp(op, left, self.product())
        return left

    def product(self):
        left = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.take().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self):
        if self.tok.text == "-":
            self.take()
            arg = self.unary()
            if isinstance(arg, Num):
                return Num(-arg.value)
            return Neg(arg)
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.text == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        t = self.take()
        if t.kind == "num":
            return Num(float(t.text))
        if t.kind == "name":
            if t.text in VARIABLES:
                return Var(t.text)
            if t.text == "pi":
                return Num(math.pi)
            if t.text in FUNCTIONS:
                self.expect("(")
                arg = self.sum()
                self.expect(")")
                return Call(t.text, arg)
            raise ParseError(f"unknown identifier {t.text!r}", t.offset)
        if t.text == "(":
            e = self.sum()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {t.text or 'end of input'!r}", t.offset)


def parse(source):
    return _Parser(source).parse()


def to_string(e):
    """Fully parenthesised text that parses back to an identical tree."""
    if isinstance(e, Num):
        if not math.isfinite(e.value):
            raise ValueError("non-finite constant cannot be printed")
        s = repr(float(e.value))
        return f"({s})" if e.value < 0 or s.startswith("-") else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_string(e.arg)})"
    if isinstance(e, BinOp):
        return f"({to_string(e.left)} {e.op} {to_string(e.right)})"
    if isinstance(e, Call):
        return f"{e.func}({to_string(e.arg)})"
    if isinstance(e, Piecewise):
        parts = [f"{to_string(b.expr)} if t {b.op} {_threshold(b.threshold)}" for b in e.branches]
        parts.append(to_string(e.otherwise))
        return "piecewise(" + ", ".join(parts) + ")"
    raise TypeError(f"not an expression: {e!r}")


def _threshold(v):
    s = repr(float(v))
    return s


# ---------------------------------------------------------------------------
# smart constructors (light algebraic simplification)

def _is(e, v):
    return isinstance(e, Num) and e.value == v


def add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    return BinOp("+", a, b)


def sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    if _is(b, 0):
        return a
    if _is(a, 0):
        return neg(b)
    return BinOp("-", a, b)


def mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    if _is(a, 0) or _is(b, 0):
        return Num(0.0)
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    return BinOp("*", a, b)


def div(a, b):
    if _is(a, 0) and not _is(b, 0):
        return Num(0.0)
    if _is(b, 1):
        return a
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0:
        return Num(a.value / b.value)
    return BinOp("/", a, b)


def power(a, b):
    if _is(b, 1):
        return a
    if _is(b, 0):
        return Num(1.0)
    return BinOp("^", a, b)


def neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def call(f, a):
    return Call(f, a)


# ---------------------------------------------------------------------------
# differentiation

def derivative(e, var):
    if isinstance(e, Num):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0 if e.name == var else 0.0)
    if isinstance(e, Neg):
        return neg(derivative(e.arg, var))
    if isinstance(e, Piecewise):
        return Piecewise(tuple(Branch(b.op, b.threshold, derivative(b.expr, var)) for b in e.branches),
                         derivative(e.otherwise, var))
    if isinstance(e, BinOp):
        u, v = e.left, e.right
        du, dv = derivative(u, var), derivative(v, var)
        if e.op == "+":
            return add(du, dv)
        if e.op == "-":
            return sub(du, dv)
        if e.op == "*":
            return add(mul(du, v), mul(u, dv))
        if e.op == "/":
            if _is(dv, 0):
                return div(du, v)
            return div(sub(mul(du, v), mul(u, dv)), power(v, Num(2.0)))
        if e.op == "^":
            if _is(dv, 0):
                if isinstance(v, Num):
                    return mul(mul(v, power(u, Num(v.value - 1.0))), du)
                return mul(mul(v, power(u, sub(v, Num(1.0)))), du)
            # u^v * (v' log u + v u'/u)
            return mul(e, add(mul(dv, call("log", u)), div(mul(v, du), u)))
    if isinstance(e, Call):
        u = e.arg
        du = derivative(u, var)
        if _is(du, 0):
            return Num(0.0)
        f = e.func
        if f == "sin":
            outer = call("cos", u)
        elif f == "cos":
            outer = neg(call("sin", u))
        elif f == "exp":
            outer = e
        elif f == "sqrt":
            outer = div(Num(0.5), e)
        elif f == "abs":
            # subgradient 0 at the kink
            outer = call("sign", u)
        elif f == "log":
            outer = div(Num(1.0), u)
        elif f == "sign":
            return Num(0.0)
        else:
            raise ValueError(f"unknown function {f}")
        return mul(outer, du)
    raise TypeError(f"not an expression: {e!r}")


def differentiate(e):
    """Symbolic partial derivatives ``(df/dx, df/dy, df/dt)``."""
    return derivative(e, "x"), derivative(e, "y"), derivative(e, "t")


def substitute(e, mapping):
    """Replace variables by expressions (``mapping`` keyed by variable name)."""
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Num):
        return e
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, mapping))
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, mapping))
    if isinstance(e, Piecewise):
        if "t" in mapping:
            raise ValueError("cannot substitute t inside a piecewise expression")
        return Piecewise(tuple(Branch(b.op, b.threshold, substitute(b.expr, mapping)) for b in e.branches),
                         substitute(e.otherwise, mapping))
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# evaluation

def _guard(op, t, thr):
    return t <= thr if op == "<=" else t < thr


def evaluate(e, x, y, t=0.0):
    """Vectorised evaluation; raises EvalError on a domain violation."""
    env = {"x": np.asarray(x, dtype=float), "y": np.asarray(y, dtype=float), "t": np.asarray(t, dtype=float)}
    with np.errstate(all="ignore"):
        return _eval(e, env)


def _eval(e, env):
    if isinstance(e, Num):
        return np.asarray(e.value)
    if isinstance(e, Var):
        return env[e.name]
    if isinstance(e, Neg):
        return -_eval(e.arg, env)
    if isinstance(e, BinOp):
        a, b = _eval(e.left, env), _eval(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if np.any(b == 0):
                raise EvalError("division by zero")
            return a / b
        if np.any((a < 0) & (np.round(b) != b)):
            raise EvalError("negative base with fractional exponent")
        if np.any((a == 0) & (b < 0)):
            raise EvalError("zero raised to a negative power")
        return np.power(a, b)
    if isinstance(e, Call):
        a = _eval(e.arg, env)
        f = e.func
        if f == "sqrt":
            if np.any(a < 0):
                raise EvalError("sqrt of a negative number")
            return np.sqrt(a)
        if f == "log":
            if np.any(a <= 0):
                raise EvalError("log of a non-positive number")
            return np.log(a)
        return getattr(np, f)(a)
    if isinstance(e, Piecewise):
        t = env["t"]
        if t.ndim == 0:
            for b in e.branches:
                if _guard(b.op, float(t), b.threshold):
                    return _eval(b.expr, env)
            return _eval(e.otherwise, env)
        conds = [_guard(b.op, t, b.threshold) for b in e.branches]
        vals = [np.broadcast_to(_eval(b.expr, env), t.shape) for b in e.branches]
        return np.select(conds, vals, np.broadcast_to(_eval(e.otherwise, env), t.shape))
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# surfaces

class SurfaceSample(NamedTuple):
    z: float
    grad: np.ndarray
    normal: np.ndarray


def graph_normal(fx, fy):
    """Upward unit normal of ``z = f(x, y)`` from its slopes."""
    fx, fy = np.broadcast_arrays(np.asarray(fx, dtype=float), np.asarray(fy, dtype=float))
    n = np.stack([-fx, -fy, np.ones_like(fx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


class ShapeField:
    """A differentiable height field with its symbolic partials."""

    def __init__(self, expr, name=None):
        if isinstance(expr, str):
            expr = parse(expr)
        self.expr = expr
        self.name = name
        self.dfdx, self.dfdy, self.dfdt = differentiate(expr)

    def __repr__(self):
        return f"ShapeField({to_string(self.expr)!r})"

    def value(self, x, y, t=0.0):
        return evaluate(self.expr, x, y, t)

    def gradient(self, x, y, t=0.0):
        return evaluate(self.dfdx, x, y, t), evaluate(self.dfdy, x, y, t)

    def normals(self, x, y, t=0.0):
        fx, fy = self.gradient(x, y, t)
        shape = np.broadcast_shapes(np.shape(x), np.shape(y))
        return graph_normal(np.broadcast_to(fx, shape), np.broadcast_to(fy, shape))

    def sample(self, x, y, t=0.0):
        z = float(self.value(x, y, t))
        fx, fy = (float(v) for v in self.gradient(x, y, t))
        return SurfaceSample(z, np.array([fx, fy]), graph_normal(fx, fy))


def sample(expr, x, y, t=0.0):
    return ShapeField(expr).sample(x, y, t)


def _time_scaled(e, st):
    """``e`` with ``t`` replaced by ``t / st``; piecewise thresholds stretch by ``st``."""
    if isinstance(e, Piecewise):
        return Piecewise(tuple(Branch(b.op, b.threshold * st, _time_scaled(b.expr, st)) for b in e.branches),
                         _time_scaled(e.otherwise, st))
    if isinstance(e, (Num, Var)):
        return div(T, Num(float(st))) if e == T else e
    if isinstance(e, Neg):
        return neg(_time_scaled(e.arg, st))
    if isinstance(e, BinOp):
        return BinOp(e.op, _time_scaled(e.left, st), _time_scaled(e.right, st))
    if isinstance(e, Call):
        return Call(e.func, _time_scaled(e.arg, st))
    raise TypeError(f"not an expression: {e!r}")


def scale_shift(expr, amplitude=1.0, sx=1.0, sy=1.0, x0=0.0, y0=0.0, offset=0.0, anchor=None, st=1.0):
    """``amplitude * f((x - x0)/sx, (y - y0)/sy, t/st) + offset``.

    With ``anchor=(xa, ya)`` the value at the anchor is subtracted for every
    t, so the surface passes through ``(xa, ya, offset)`` at all times.
    """
    if isinstance(expr, str):
        expr = parse(expr)
    if sx == 0 or sy == 0 or st <= 0:
        raise ValueError("scale factors must be nonzero and st positive")
    if st != 1.0:
        expr = _time_scaled(expr, st)
    X_ = div(sub(X, Num(float(x0))), Num(float(sx)))
    Y_ = div(sub(Y, Num(float(y0))), Num(float(sy)))
    g = substitute(expr, {"x": X_, "y": Y_})
    if anchor is not None:
        xa, ya = anchor
        ga = substitute(expr, {"x": Num((xa - x0) / sx), "y": Num((ya - y0) / sy)})
        g = _anchored(g, ga)
    return add(mul(Num(float(amplitude)), g), Num(float(offset)))


def _anchored(g, ga):
    if isinstance(g, Piecewise) and isinstance(ga, Piecewise):
        return Piecewise(tuple(Branch(b.op, b.threshold, sub(b.expr, c.expr))
                               for b, c in zip(g.branches, ga.branches)),
                         sub(g.otherwise, ga.otherwise))
    return sub(g, ga)


# ---------------------------------------------------------------------------
# builtin library

PIECEWISE_4X8 = "piecewise(x^2 - y^2 if t <= 10, x^2 if t <= 15, y^2 if t <= 25, -y^2)"

_BASE = {
    "mesh3x3_target": "x*y*cos(y)",
    "mesh8x8_target": "cos(x + t) + cos(x + y + t)",
    "mesh20x20_target": "x^2 - y^2",
    "piecewise_4x8": PIECEWISE_4X8,
    "paraboloid": "x^2 + y^2",
    # half-cylinder graph of unit radius with its axis along x, lowest line at y = 0
    "cylinder": "1 - sqrt(1 - y^2)",
}


def builtin_shapes():
    """Mapping of builtin names to their unscaled source expressions."""
    return dict(_BASE)


def builtin(name, **params):
    """Look up a builtin surface and apply ``scale_shift`` parameters."""
    try:
        src = _BASE[name]
    except KeyError:
        raise UnknownShape(name) from None
    expr = parse(src)
    if params:
        expr = scale_shift(expr, **params)
    return ShapeField(expr, name=name)
