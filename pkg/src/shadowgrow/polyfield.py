"""Polynomial vector fields: text grammar, canonical form, evaluation, derivatives."""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "FieldSyntaxError",
    "NotNormalizableError",
    "Monomial",
    "PolynomialField",
    "parse_field",
    "format_field",
    "field_from_terms",
    "eval_field",
    "jacobian",
    "top_degree_part",
    "homogeneous_parts",
]

NOT_NORMALIZABLE = "not normalizable: non-polynomial field"


class FieldSyntaxError(ValueError):
    """Malformed field source; carries a 1-based line and column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        self.reason = message
        super().__init__(f"line {line}, column {column}: {message}")


class NotNormalizableError(FieldSyntaxError):
    def __init__(self, line: int = 0, column: int = 0, detail: str = ""):
        msg = NOT_NORMALIZABLE + (f" ({detail})" if detail else "")
        super().__init__(msg, line, column)


@dataclass(frozen=True)
class Monomial:
    coefficient: Fraction
    exponents: tuple[int, ...]

    def __post_init__(self):
        if self.coefficient == 0:
            raise ValueError("zero-coefficient monomials are not stored")
        if any(e < 0 for e in self.exponents):
            raise ValueError("exponents must be non-negative")

    @property
    def total_degree(self) -> int:
        return sum(self.exponents)


# Polynomials during parsing are dicts {multi-index: Fraction}.
Poly = dict


def _canonical(poly: Mapping[tuple[int, ...], Fraction]) -> tuple[Monomial, ...]:
    keys = sorted((k for k, c in poly.items() if c != 0), reverse=True)
    return tuple(Monomial(Fraction(poly[k]), tuple(k)) for k in keys)


@dataclass(frozen=True)
class PolynomialField:
    """The system x' = X(x) on R^N with exact rational coefficients.

    Components are stored in canonical form: distinct multi-indices sorted in
    descending lexicographic order, zero coefficients dropped.
    """

    dimension: int
    components: tuple[tuple[Monomial, ...], ...]

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if len(self.components) != self.dimension:
            raise ValueError("one component per coordinate is required")
        for comp in self.components:
            seen = set()
            for mono in comp:
                if len(mono.exponents) != self.dimension:
                    raise ValueError("multi-index length differs from dimension")
                if mono.exponents in seen:
                    raise ValueError("repeated multi-index in a component")
                seen.add(mono.exponents)

    @property
    def degree(self) -> int:
        degs = [m.total_degree for comp in self.components for m in comp]
        return max(degs) if degs else 0

    @property
    def is_zero(self) -> bool:
        return all(len(c) == 0 for c in self.components)

    def __str__(self) -> str:
        return format_field(self)

    # compiled numeric tables (computed once, the field is immutable)
    @cached_property
    def _basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        index: dict[tuple[int, ...], int] = {}
        for comp in self.components:
            for mono in comp:
                index.setdefault(mono.exponents, len(index))
        n = self.dimension
        exps = np.zeros((max(len(index), 1), n), dtype=np.int64)
        coef = np.zeros((n, max(len(index), 1)))
        for k, j in index.items():
            exps[j] = k
        for i, comp in enumerate(self.components):
            for mono in comp:
                coef[i, index[mono.exponents]] = float(mono.coefficient)
        degs = exps.sum(axis=1)
        return exps, coef, degs

    @cached_property
    def _jac_basis(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.dimension
        index: dict[tuple[int, ...], int] = {}
        entries = []
        for i, comp in enumerate(self.components):
            for mono in comp:
                for j in range(n):
                    e = mono.exponents[j]
                    if e == 0:
                        continue
                    k = list(mono.exponents)
                    k[j] -= 1
                    k = tuple(k)
                    col = index.setdefault(k, len(index))
                    entries.append((i * n + j, col, float(mono.coefficient * e)))
        exps = np.zeros((max(len(index), 1), n), dtype=np.int64)
        for k, col in index.items():
            exps[col] = k
        coef = np.zeros((n * n, max(len(index), 1)))
        for row, col, c in entries:
            coef[row, col] += c
        return exps, coef

    def monomials(self, x: np.ndarray) -> np.ndarray:
        """Values of the monomial basis at x, shape (..., P)."""
        exps = self._basis[0]
        return _power_products(np.asarray(x, dtype=float), exps)


def _power_products(x: np.ndarray, exps: np.ndarray) -> np.ndarray:
    out = np.ones(x.shape[:-1] + (exps.shape[0],))
    for j in range(exps.shape[1]):
        col = exps[:, j]
        top = col.max()
        if top == 0:
            continue
        xj = x[..., j, None]
        out = out * (xj if top == 1 and col.min() == 1 else xj ** col)
    return out


def field_from_terms(dimension: int, components: Iterable[Mapping]) -> PolynomialField:
    """Build a canonical field from per-component {multi-index: coefficient} maps."""
    comps = []
    for poly in components:
        clean = {}
        for k, c in poly.items():
            k = tuple(int(e) for e in k)
            clean[k] = clean.get(k, Fraction(0)) + Fraction(c)
        comps.append(_canonical(clean))
    return PolynomialField(dimension, tuple(comps))


def _check_point(field: PolynomialField, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != field.dimension:
        raise ValueError(
            f"dimension mismatch: field has N={field.dimension}, point has shape {x.shape}"
        )
    return x


def eval_field(field: PolynomialField, x) -> np.ndarray:
    """Evaluate X at x; x may carry leading batch axes, shape (..., N)."""
    x = _check_point(field, x)
    exps, coef, _ = field._basis
    return _power_products(x, exps) @ coef.T


def jacobian(field: PolynomialField, x) -> np.ndarray:
    """Matrix of partial derivatives dX_i/dx_j at x, shape (..., N, N)."""
    x = _check_point(field, x)
    exps, coef = field._jac_basis
    n = field.dimension
    vals = _power_products(x, exps) @ coef.T
    return vals.reshape(x.shape[:-1] + (n, n))


def homogeneous_parts(field: PolynomialField) -> dict[int, PolynomialField]:
    """Split X into its homogeneous pieces, keyed by total degree."""
    degs = sorted({m.total_degree for comp in field.components for m in comp})
    parts = {}
    for d in degs:
        comps = tuple(
            tuple(m for m in comp if m.total_degree == d) for comp in field.components
        )
        parts[d] = PolynomialField(field.dimension, comps)
    return parts


def top_degree_part(field: PolynomialField) -> PolynomialField:
    """Homogeneous field keeping only the monomials of maximal total degree."""
    if field.is_zero:
        raise ValueError("zero field has no top-degree part")
    return homogeneous_parts(field)[field.degree]


# ---------------------------------------------------------------- printing

def _format_coef(c: Fraction) -> str:
    return str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"


def _format_poly(comp: tuple[Monomial, ...]) -> str:
    if not comp:
        return "0"
    pieces = []
    for idx, mono in enumerate(comp):
        c = mono.coefficient
        sign = "-" if c < 0 else "+"
        a = abs(c)
        factors = []
        for j, e in enumerate(mono.exponents):
            if e == 1:
                factors.append(f"x{j}")
            elif e > 1:
                factors.append(f"x{j}^{e}")
        if not factors:
            body = _format_coef(a)
        elif a == 1:
            body = "*".join(factors)
        else:
            body = _format_coef(a) + "*" + "*".join(factors)
        if idx == 0:
            pieces.append(("-" if sign == "-" else "") + body)
        else:
            pieces.append(f" {sign} {body}")
    return "".join(pieces)


def format_field(field: PolynomialField) -> str:
    """Canonical text form; parse_field(format_field(F)) == F."""
    lines = [f"dim {field.dimension}"]
    for i, comp in enumerate(field.components):
        lines.append(f"x{i}' = {_format_poly(comp)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<var>x\d+)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


class _Tokens:
    def __init__(self, text: str, line: int, offset: int):
        self.items = []
        pos = 0
        text = text.rstrip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                col = offset + pos + 1 + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise FieldSyntaxError(f"unexpected character {text[pos:].strip()[:1]!r}", line, col)
            kind = m.lastgroup
            col = offset + m.start(kind) + 1
            self.items.append((kind, m.group(kind), col))
            pos = m.end()
        self.i = 0
        self.line = line
        self.end_col = offset + len(text) + 1

    def peek(self):
        return self.items[self.i] if self.i < len(self.items) else (None, None, self.end_col)

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok


def _mul(a: Poly, b: Poly) -> Poly:
    out: Poly = {}
    for ka, ca in a.items():
        for kb, cb in b.items():
            k = tuple(x + y for x, y in zip(ka, kb))
            out[k] = out.get(k, Fraction(0)) + ca * cb
    return {k: c for k, c in out.items() if c != 0}


def _add(a: Poly, b: Poly, sign: int = 1) -> Poly:
    out = dict(a)
    for k, c in b.items():
        out[k] = out.get(k, Fraction(0)) + sign * c
    return {k: c for k, c in out.items() if c != 0}


class _Parser:
    def __init__(self, toks: _Tokens, n: int):
        self.t = toks
        self.n = n
        self.zero = (0,) * n

    def const(self, c) -> Poly:
        c = Fraction(c)
        return {self.zero: c} if c != 0 else {}

    def error(self, msg, col=None):
        if col is None:
            col = self.t.peek()[2]
        raise FieldSyntaxError(msg, self.t.line, col)

    def expr(self) -> Poly:
        acc = self.term()
        while self.t.peek()[1] in ("+", "-"):
            _, op, _ = self.t.take()
            acc = _add(acc, self.term(), 1 if op == "+" else -1)
        return acc

    def term(self) -> Poly:
        acc = self.unary()
        while self.t.peek()[1] in ("*", "/"):
            _, op, col = self.t.take()
            rhs = self.unary()
            if op == "*":
                acc = _mul(acc, rhs)
            else:
                if any(k != self.zero for k in rhs):
                    raise NotNormalizableError(self.t.line, col, "division by a non-constant")
                if not rhs:
                    self.error("division by zero", col)
                acc = {k: c / rhs[self.zero] for k, c in acc.items()}
        return acc

    def unary(self) -> Poly:
        kind, val, _ = self.t.peek()
        if val in ("-", "+"):
            self.t.take()
            inner = self.unary()
            return inner if val == "+" else {k: -c for k, c in inner.items()}
        return self.power()

    def power(self) -> Poly:
        base = self.atom()
        if self.t.peek()[1] == "^":
            _, _, col = self.t.take()
            neg = False
            if self.t.peek()[1] == "-":
                self.t.take()
                neg = True
            kind, val, ecol = self.t.take()
            if kind != "num":
                self.error("exponent must be a non-negative integer literal", ecol)
            if neg or "." in val:
                raise NotNormalizableError(self.t.line, ecol, "exponent not a non-negative integer")
            result = self.const(1)
            for _ in range(int(val)):
                result = _mul(result, base)
            return result
        return base

    def atom(self) -> Poly:
        kind, val, col = self.t.take()
        if kind == "num":
            return self.const(Fraction(val))
        if kind == "var":
            j = int(val[1:])
            if j >= self.n:
                raise FieldSyntaxError(
                    f"dimension mismatch: variable {val} exceeds dim {self.n}", self.t.line, col
                )
            k = [0] * self.n
            k[j] = 1
            return {tuple(k): Fraction(1)}
        if kind == "name":
            if self.t.peek()[1] == "(":
                raise NotNormalizableError(self.t.line, col, f"function {val}")
            self.error(f"unknown identifier {val!r}", col)
        if val == "(":
            inner = self.expr()
            if self.t.peek()[1] != ")":
                self.error("expected ')'")
            self.t.take()
            return inner
        if kind is None:
            self.error("unexpected end of expression", col)
        self.error(f"unexpected token {val!r}", col)


_HEAD = re.compile(r"^\s*dim\s+(\d+)\s*$")
_EQN = re.compile(r"^\s*x(\d+)\s*'\s*=")


def parse_field(source: str) -> PolynomialField:
    """Parse the ODE text grammar into a canonical PolynomialField.

    Examples
    --------
    >>> f = parse_field("dim 2\\nx0' = x0^2 - x1\\nx1' = 3/2*x0*x1")
    >>> f.degree
    2
    """
    lines = source.splitlines()
    n = None
    comps: dict[int, Poly] = {}
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0]
        if not text.strip():
            continue
        if n is None:
            m = _HEAD.match(text)
            if m is None:
                col = len(text) - len(text.lstrip()) + 1
                raise FieldSyntaxError("expected 'dim <N>' header", lineno, col)
            n = int(m.group(1))
            if n < 1:
                raise FieldSyntaxError("dimension must be positive", lineno, m.start(1) + 1)
            continue
        m = _EQN.match(text)
        if m is None:
            col = len(text) - len(text.lstrip()) + 1
            raise FieldSyntaxError("expected an equation x<i>' = <poly>", lineno, col)
        i = int(m.group(1))
        if i >= n:
            raise FieldSyntaxError(
                f"dimension mismatch: equation for x{i} with dim {n}", lineno, m.start(1) + 1
            )
        if i in comps:
            raise FieldSyntaxError(f"duplicate equation for x{i}", lineno, m.start(1) + 1)
        toks = _Tokens(text[m.end():], lineno, m.end())
        if not toks.items:
            raise FieldSyntaxError("empty right-hand side", lineno, m.end() + 1)
        parser = _Parser(toks, n)
        comps[i] = parser.expr()
        if toks.peek()[0] is not None:
            parser.error(f"unexpected token {toks.peek()[1]!r}")
    if n is None:
        raise FieldSyntaxError("missing 'dim <N>' header", 1, 1)
    missing = [i for i in range(n) if i not in comps]
    if missing:
        raise FieldSyntaxError(
            f"dimension mismatch: no equation for x{missing[0]} (dim {n})", len(lines), 1
        )
    return PolynomialField(n, tuple(_canonical(comps[i]) for i in range(n)))
