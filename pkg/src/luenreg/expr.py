"""Scalar expression language used to declare plant maps.

Expressions are parsed into an immutable AST built from frozen dataclasses.
The AST supports exact evaluation, symbolic differentiation, substitution
and compilation into vectorised numpy callables.

Grammar (highest precedence first)::

    atom    := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'
    power   := atom ['^' unary]            (exponent: constant integer)
    unary   := '-' unary | power
    term    := unary (('*' | '/') unary)*
    expr    := term (('+' | '-') term)*
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow", "Call",
    "ExprError", "ExprSyntaxError", "UnknownIdentifierError", "EvalError",
    "DomainError", "DiffError", "FUNCTIONS",
    "parse", "evaluate", "diff", "gradient", "substitute", "free_vars",
    "to_str", "compile_expr", "compile_vector",
]


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at offset {offset}")


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(f"unknown identifier {name!r} at offset {offset}")


class EvalError(ExprError):
    """Missing binding during evaluation."""


class DomainError(EvalError):
    """Evaluation produced a non-finite value."""


class DiffError(ExprError):
    """Expression contains a node that cannot be differentiated."""


# ---------------------------------------------------------------------------
# AST

class Expr:
    __slots__ = ()

    def __str__(self) -> str:
        return to_str(self)


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
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr


FUNCTIONS: dict[str, Callable[[float], float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "tanh": math.tanh,
    "sqrt": math.sqrt,
    "abs": abs,
}

_NP_FUNCTIONS = {
    "sin": "_np.sin", "cos": "_np.cos", "exp": "_np.exp",
    "tanh": "_np.tanh", "sqrt": "_np.sqrt", "abs": "_np.abs",
}

_BINOPS = {Add: "+", Sub: "-", Mul: "*", Div: "/"}

# ---------------------------------------------------------------------------
# Tokeniser and parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, variables: Sequence[str]):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.variables = set(variables)

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        what = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ExprSyntaxError(f"{message}, found {what}", tok.offset, self.text)

    def accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            self.error("unexpected token")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            if self.accept("+"):
                e = _fold(Add(e, self.term()))
            elif self.accept("-"):
                e = _fold(Sub(e, self.term()))
            else:
                return e

    def term(self) -> Expr:
        e = self.unary()
        while True:
            if self.accept("*"):
                e = _fold(Mul(e, self.unary()))
            elif self.accept("/"):
                e = _fold(Div(e, self.unary()))
            else:
                return e

    def unary(self) -> Expr:
        if self.accept("-"):
            return _fold(Neg(self.unary()))
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.i += 1
            start = self.tok
            exponent = self.unary()
            if not isinstance(exponent, Num) or exponent.value != int(exponent.value):
                raise ExprSyntaxError(
                    "exponent must be a constant integer", start.offset, self.text)
            return _fold(Pow(base, int(exponent.value)))
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "name":
            self.i += 1
            if tok.text in FUNCTIONS:
                if not self.accept("("):
                    self.error(f"expected '(' after function {tok.text!r}")
                arg = self.expr()
                if not self.accept(")"):
                    self.error("expected ')'")
                return _fold(Call(tok.text, arg))
            if tok.text not in self.variables:
                raise UnknownIdentifierError(tok.text, tok.offset)
            return Var(tok.text)
        if self.accept("("):
            e = self.expr()
            if not self.accept(")"):
                self.error("expected ')'")
            return e
        self.error("expected a number, name or '('")


def parse(text: str, variables: Sequence[str]) -> Expr:
    """Parse `text` into an expression over the declared `variables`.

    Raises
    ------
    ExprSyntaxError
        Malformed input; ``offset`` is the 0-based position of the offending
        token.
    UnknownIdentifierError
        A name that is neither a declared variable nor a known function.
    """
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text)
    try:
        return _Parser(text, variables).parse()
    except RecursionError:
        raise ExprSyntaxError("expression nested too deeply", 0, text) from None


# ---------------------------------------------------------------------------
# Constant folding

def _num_value(e: Expr) -> float | None:
    return e.value if isinstance(e, Num) else None


def _fold(e: Expr) -> Expr:
    """Replace an all-constant node by its value when the value is finite."""
    try:
        if isinstance(e, Neg) and isinstance(e.arg, Num):
            return Num(-e.arg.value)
        if type(e) in _BINOPS and isinstance(e.left, Num) and isinstance(e.right, Num):
            v = _apply_binop(type(e), e.left.value, e.right.value)
        elif isinstance(e, Pow) and isinstance(e.base, Num):
            v = _apply_pow(e.base.value, e.exponent)
        elif isinstance(e, Call) and isinstance(e.arg, Num):
            v = FUNCTIONS[e.func](e.arg.value)
        else:
            return e
    except (ArithmeticError, ValueError):
        return e
    return Num(float(v)) if math.isfinite(v) else e


def _apply_binop(op: type, a: float, b: float) -> float:
    if op is Add:
        return a + b
    if op is Sub:
        return a - b
    if op is Mul:
        return a * b
    if b == 0.0:
        raise ZeroDivisionError("division by zero")
    return a / b


def _apply_pow(a: float, n: int) -> float:
    if n < 0 and a == 0.0:
        raise ZeroDivisionError("zero to a negative power")
    return a ** n


# ---------------------------------------------------------------------------
# Evaluation

def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate `e` in IEEE double precision.

    Raises `EvalError` on a missing binding and `DomainError` whenever an
    intermediate value is not finite (division by zero, sqrt of a negative
    number, overflow).
    """
    try:
        v = _eval(e, env)
    except ZeroDivisionError as exc:
        raise DomainError(str(exc)) from None
    except (ValueError, OverflowError) as exc:
        if isinstance(exc, EvalError):
            raise
        raise DomainError(f"math domain error in {to_str(e)!r}") from None
    return v


def _check(v: float, node: Expr) -> float:
    if not math.isfinite(v):
        raise DomainError(f"non-finite value in {to_str(node)!r}")
    return v


def _eval(e: Expr, env: Mapping[str, float]) -> float:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return float(env[e.name])
        except KeyError:
            raise EvalError(f"no binding for variable {e.name!r}") from None
    if isinstance(e, Neg):
        return -_eval(e.arg, env)
    if isinstance(e, Pow):
        return _check(_apply_pow(_eval(e.base, env), e.exponent), e)
    if isinstance(e, Call):
        return _check(FUNCTIONS[e.func](_eval(e.arg, env)), e)
    a = _eval(e.left, env)
    b = _eval(e.right, env)
    return _check(_apply_binop(type(e), a, b), e)


# ---------------------------------------------------------------------------
# Symbolic manipulation

ZERO = Num(0.0)
ONE = Num(1.0)


def _add(a: Expr, b: Expr) -> Expr:
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    return _fold(Add(a, b))


def _sub(a: Expr, b: Expr) -> Expr:
    if a == b:
        return ZERO
    if b == ZERO:
        return a
    if a == ZERO:
        return _fold(Neg(b))
    return _fold(Sub(a, b))


def _mul(a: Expr, b: Expr) -> Expr:
    if a == ZERO or b == ZERO:
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    return _fold(Mul(a, b))


def _div(a: Expr, b: Expr) -> Expr:
    if a == ZERO:
        return ZERO
    if b == ONE:
        return a
    return _fold(Div(a, b))


def _neg(a: Expr) -> Expr:
    return ZERO if a == ZERO else _fold(Neg(a))


def diff(e: Expr, var: str) -> Expr:
    """Exact symbolic derivative of `e` with respect to `var`.

    Raises `DiffError` when an ``abs`` node depends on `var`.
    """
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Neg):
        return _neg(diff(e.arg, var))
    if isinstance(e, Add):
        return _add(diff(e.left, var), diff(e.right, var))
    if isinstance(e, Sub):
        return _sub(diff(e.left, var), diff(e.right, var))
    if isinstance(e, Mul):
        return _add(_mul(diff(e.left, var), e.right), _mul(e.left, diff(e.right, var)))
    if isinstance(e, Div):
        du, dv = diff(e.left, var), diff(e.right, var)
        if dv == ZERO:
            return _div(du, e.right)
        return _div(_sub(_mul(du, e.right), _mul(e.left, dv)), _fold(Pow(e.right, 2)))
    if isinstance(e, Pow):
        du = diff(e.base, var)
        n = e.exponent
        if n == 0 or du == ZERO:
            return ZERO
        lower = e.base if n == 2 else _fold(Pow(e.base, n - 1))
        return _mul(_mul(Num(float(n)), lower), du)
    if isinstance(e, Call):
        du = diff(e.arg, var)
        if e.func == "abs":
            if du == ZERO:
                return ZERO
            raise DiffError(f"abs() is not differentiable: {to_str(e)!r}")
        if du == ZERO:
            return ZERO
        u = e.arg
        if e.func == "sin":
            outer = Call("cos", u)
        elif e.func == "cos":
            outer = Neg(Call("sin", u))
        elif e.func == "exp":
            outer = e
        elif e.func == "tanh":
            outer = Sub(ONE, Pow(e, 2))
        elif e.func == "sqrt":
            outer = Div(Num(0.5), e)
        else:  # pragma: no cover - FUNCTIONS is closed
            raise DiffError(f"unknown function {e.func!r}")
        return _mul(outer, du)
    raise TypeError(f"not an expression node: {e!r}")


def gradient(e: Expr, variables: Sequence[str]) -> list[Expr]:
    return [diff(e, v) for v in variables]


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions (simultaneously)."""
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Num):
        return e
    if isinstance(e, Neg):
        return _fold(Neg(substitute(e.arg, mapping)))
    if isinstance(e, Pow):
        return _fold(Pow(substitute(e.base, mapping), e.exponent))
    if isinstance(e, Call):
        return _fold(Call(e.func, substitute(e.arg, mapping)))
    return _fold(type(e)(substitute(e.left, mapping), substitute(e.right, mapping)))


def free_vars(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, (Neg, Call)):
        return free_vars(e.arg)
    if isinstance(e, Pow):
        return free_vars(e.base)
    return free_vars(e.left) | free_vars(e.right)


# ---------------------------------------------------------------------------
# Printing

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _prec(e: Expr) -> int:
    if isinstance(e, Num) and e.value < 0:
        return 3
    return _PREC.get(type(e), 5)


def _fmt_num(v: float) -> str:
    return repr(float(v))


def to_str(e: Expr) -> str:
    """Render `e` in the input grammar with minimal parentheses."""
    if isinstance(e, Num):
        return _fmt_num(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_str(e.arg)})"
    if isinstance(e, Neg):
        inner = to_str(e.arg)
        # the operand of unary minus parses at unary level
        return f"-{inner}" if _prec(e.arg) >= 3 else f"-({inner})"
    if isinstance(e, Pow):
        base = to_str(e.base)
        if _prec(e.base) <= 4 or (isinstance(e.base, Num) and e.base.value < 0):
            base = f"({base})"
        return f"{base}^{e.exponent}"
    p = _PREC[type(e)]
    left = to_str(e.left)
    if _prec(e.left) < p:
        left = f"({left})"
    right = to_str(e.right)
    # left-associative: a right operand of equal precedence needs parentheses
    if _prec(e.right) <= p and not (_prec(e.right) == 3 and p == 2):
        right = f"({right})"
    sep = f" {_BINOPS[type(e)]} " if p == 1 else _BINOPS[type(e)]
    return f"{left}{sep}{right}"


# ---------------------------------------------------------------------------
# Compilation

def _py(e: Expr) -> str:
    if isinstance(e, Num):
        return f"({e.value!r})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{_py(e.arg)})"
    if isinstance(e, Pow):
        return f"({_py(e.base)}**{e.exponent})"
    if isinstance(e, Call):
        return f"{_NP_FUNCTIONS[e.func]}({_py(e.arg)})"
    return f"({_py(e.left)}{_BINOPS[type(e)]}{_py(e.right)})"


_SAFE_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _check_names(variables: Sequence[str]) -> None:
    for v in variables:
        if not _SAFE_NAME.match(v) or v.startswith("_"):
            raise ExprError(f"invalid variable name {v!r}")


def compile_expr(e: Expr, variables: Sequence[str]) -> Callable[..., np.ndarray]:
    """Compile `e` into ``f(*arrays)`` taking one argument per variable.

    The result broadcasts over numpy arrays. Non-finite values are not
    trapped here; callers check the state they integrate.
    """
    _check_names(variables)
    missing = free_vars(e) - set(variables)
    if missing:
        raise EvalError(f"unbound variables {sorted(missing)}")
    src = f"lambda {', '.join(variables)}: {_py(e)}"
    return eval(src, {"_np": np})  # noqa: S307 - source generated from the AST


def compile_vector(exprs: Sequence[Expr], variables: Sequence[str]) -> Callable[..., np.ndarray]:
    """Compile a list of expressions into ``f(*arrays) -> array[..., len(exprs)]``."""
    _check_names(variables)
    for e in exprs:
        missing = free_vars(e) - set(variables)
        if missing:
            raise EvalError(f"unbound variables {sorted(missing)}")
    body = ", ".join(_py(e) for e in exprs)
    src = (f"lambda {', '.join(variables)}: "
           f"_np.stack(_np.broadcast_arrays({body}), axis=-1)")
    return eval(src, {"_np": np})  # noqa: S307


ExprLike = Union[Expr, str]
