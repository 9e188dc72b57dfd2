"""Symbolic integer index expressions.

Every array subscript, loop bound and unit-id mapping the compiler produces is
an :class:`IndexExpr`.  Expressions are immutable trees over nonnegative
integers; :func:`simplify` applies a fixed, terminating rule list and
:func:`emit_c` renders a fully parenthesized C expression.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass
from typing import Callable, Mapping

from .errors import ParseError, UnboundVar


class IndexExpr:
    __slots__ = ()

    # operator sugar so builder code reads like arithmetic
    def __add__(self, other): return Add(self, as_expr(other))
    def __radd__(self, other): return Add(as_expr(other), self)
    def __mul__(self, other): return Mul(self, as_expr(other))
    def __rmul__(self, other): return Mul(as_expr(other), self)
    def __floordiv__(self, other): return Div(self, as_expr(other))
    def __mod__(self, other): return Mod(self, as_expr(other))
    def __rshift__(self, other): return Shr(self, as_expr(other))
    def __lshift__(self, other): return Shl(self, as_expr(other))
    def __and__(self, other): return BitAnd(self, as_expr(other))
    def __or__(self, other): return BitOr(self, as_expr(other))

    def __str__(self) -> str:
        return emit_c(self)


@dataclass(frozen=True, slots=True)
class Const(IndexExpr):
    value: int


@dataclass(frozen=True, slots=True)
class Var(IndexExpr):
    name: str


@dataclass(frozen=True, slots=True)
class BinOp(IndexExpr):
    lhs: IndexExpr
    rhs: IndexExpr


class Add(BinOp): __slots__ = ()
class Mul(BinOp): __slots__ = ()
class Div(BinOp): __slots__ = ()
class Mod(BinOp): __slots__ = ()
class Shr(BinOp): __slots__ = ()
class Shl(BinOp): __slots__ = ()
class BitAnd(BinOp): __slots__ = ()
class BitOr(BinOp): __slots__ = ()


_C_OPS: dict[type, str] = {
    Add: "+", Mul: "*", Div: "/", Mod: "%",
    Shr: ">>", Shl: "<<", BitAnd: "&", BitOr: "|",
}
_PY_OPS = {**_C_OPS, Div: "//"}

_FOLD: dict[type, Callable[[int, int], int]] = {
    Add: lambda a, b: a + b,
    Mul: lambda a, b: a * b,
    Div: lambda a, b: a // b,
    Mod: lambda a, b: a % b,
    Shr: lambda a, b: a >> b,
    Shl: lambda a, b: a << b,
    BitAnd: lambda a, b: a & b,
    BitOr: lambda a, b: a | b,
}

ZERO = Const(0)
ONE = Const(1)


def as_expr(x: IndexExpr | int | str) -> IndexExpr:
    if isinstance(x, IndexExpr):
        return x
    if isinstance(x, bool):
        raise TypeError("bool is not an index value")
    if isinstance(x, int):
        return Const(x)
    if isinstance(x, str):
        return Var(x)
    raise TypeError(f"cannot convert {type(x).__name__} to IndexExpr")


# --- evaluation -------------------------------------------------------------

def eval_expr(e: IndexExpr, env: Mapping[str, int]) -> int:
    """Evaluate ``e`` with integer semantics (floor division and modulo)."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise UnboundVar(e.name) from None
    return _FOLD[type(e)](eval_expr(e.lhs, env), eval_expr(e.rhs, env))


def apply_swizzle(s: IndexExpr, id: int) -> int:
    return eval_expr(s, {"id": id})


def free_vars(e: IndexExpr) -> frozenset[str]:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, BinOp):
        return free_vars(e.lhs) | free_vars(e.rhs)
    return frozenset()


def substitute(e: IndexExpr, binding: Mapping[str, IndexExpr | int]) -> IndexExpr:
    if isinstance(e, Var):
        if e.name in binding:
            return as_expr(binding[e.name])
        return e
    if isinstance(e, BinOp):
        lhs = substitute(e.lhs, binding)
        rhs = substitute(e.rhs, binding)
        if lhs is e.lhs and rhs is e.rhs:
            return e
        return type(e)(lhs, rhs)
    return e


def is_bijection(s: IndexExpr, domain: int, var: str = "id") -> bool:
    """True iff ``s`` permutes ``range(domain)`` when ``var`` ranges over it."""
    extra = free_vars(s) - {var}
    if extra:
        raise UnboundVar(sorted(extra)[0])
    fn = compile_py(s, (var,))
    image = {fn(i) for i in range(domain)}
    return image == set(range(domain))


def upper_bound(e: IndexExpr, ranges: Mapping[str, int]) -> int:
    """Inclusive upper bound of ``e`` given ``0 <= v <= ranges[v]`` per variable.

    Interval reasoning over the nonnegative domain; exact for the sums of
    products the compiler builds, conservative elsewhere.
    """
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return ranges[e.name]
        except KeyError:
            raise UnboundVar(e.name) from None
    hi_l = upper_bound(e.lhs, ranges)
    if isinstance(e, Mod) and isinstance(e.rhs, Const):
        return min(hi_l, e.rhs.value - 1)
    if isinstance(e, BitAnd) and isinstance(e.rhs, Const):
        return min(hi_l, e.rhs.value)
    hi_r = upper_bound(e.rhs, ranges)
    if isinstance(e, (Add, Mul, Shl)):
        return _FOLD[type(e)](hi_l, hi_r)
    if isinstance(e, (Div, Shr)):
        # numerator max over the smallest legal divisor
        return hi_l if isinstance(e, Shr) or not isinstance(e.rhs, Const) else hi_l // hi_r
    if isinstance(e, Mod):
        return min(hi_l, max(hi_r - 1, 0))
    if isinstance(e, BitAnd):
        return min(hi_l, hi_r)
    # BitOr: all bits up to the widest operand may be set
    return (1 << max(hi_l, hi_r).bit_length()) - 1


# --- simplification ---------------------------------------------------------

_ASSOC = (Add, Mul, BitOr, BitAnd)


def _flatten(e: IndexExpr, op: type) -> list[IndexExpr]:
    if type(e) is op:
        return _flatten(e.lhs, op) + _flatten(e.rhs, op)
    return [e]


def _rebuild(op: type, terms: list[IndexExpr]) -> IndexExpr:
    out = terms[-1]
    for t in reversed(terms[:-1]):
        out = op(t, out)
    return out


def _simplify_assoc(op: type, terms: list[IndexExpr]) -> IndexExpr:
    consts = [t.value for t in terms if isinstance(t, Const)]
    rest = [t for t in terms if not isinstance(t, Const)]
    c = None
    if consts:
        c = consts[0]
        for v in consts[1:]:
            c = _FOLD[op](c, v)
    if op is Mul and c == 0:
        return ZERO
    if op is BitAnd and c == 0:
        return ZERO
    if op is Add and c == 0 or op is Mul and c == 1 or op is BitOr and c == 0:
        c = None
    if op in (BitOr, BitAnd):
        # x | x == x, x & x == x
        seen: list[IndexExpr] = []
        for t in rest:
            if t not in seen:
                seen.append(t)
        rest = seen
    if not rest:
        return Const(c if c is not None else (1 if op is Mul else 0))
    if c is not None:
        rest = rest + [Const(c)]
    return _rebuild(op, rest)


def simplify(e: IndexExpr) -> IndexExpr:
    """Rewrite ``e`` with identities and constant folding.

    Rules: 0*x=0, 1*x=x, x+0=x, constant folding, (x*c1)*c2=x*(c1*c2),
    (x+y)*c=x*c+y*c,
    x/1=x, x%1=0, (x*c1)/c2=x*(c1/c2) and (x*c1)%c2=0 when c2 divides c1,
    shifts by 0 vanish, x&0=0, x|0=x.  Associative chains are flattened and
    rebuilt right-nested with the folded constant last, which makes the
    result canonical and the function idempotent.
    """
    if isinstance(e, (Const, Var)):
        return e
    op = type(e)
    if op in _ASSOC:
        terms = [simplify(t) for t in _flatten(e, op)]
        # simplified children may expose further chain members
        flat: list[IndexExpr] = []
        for t in terms:
            flat.extend(_flatten(t, op))
        out = _simplify_assoc(op, flat)
        if op is Mul and isinstance(out, Mul) and isinstance(out.lhs, Add) and isinstance(out.rhs, Const):
            # (x + c1) * c2 -> x*c2 + c1*c2, so unrolled offsets fold into one constant
            return simplify(_rebuild(Add, [Mul(t, out.rhs) for t in _flatten(out.lhs, Add)]))
        return out
    lhs = simplify(e.lhs)
    rhs = simplify(e.rhs)
    if isinstance(lhs, Const) and isinstance(rhs, Const):
        if op in (Div, Mod) and rhs.value == 0:
            return op(lhs, rhs)
        return Const(_FOLD[op](lhs.value, rhs.value))
    if op is Div:
        if rhs == ONE:
            return lhs
        if lhs == ZERO:
            return ZERO
        if isinstance(rhs, Const) and rhs.value > 0:
            scaled = _divide_product(lhs, rhs.value)
            if scaled is not None:
                return scaled
    elif op is Mod:
        if rhs == ONE or lhs == ZERO:
            return ZERO
        if isinstance(rhs, Const) and rhs.value > 0:
            if _divide_product(lhs, rhs.value) is not None:
                return ZERO
    elif op in (Shr, Shl):
        if rhs == ZERO or lhs == ZERO:
            return lhs
    return op(lhs, rhs)


def _divide_product(e: IndexExpr, d: int) -> IndexExpr | None:
    """``e / d`` when ``e`` is a product whose constant factor ``d`` divides."""
    if isinstance(e, Mul):
        terms = _flatten(e, Mul)
        c = terms[-1]
        if isinstance(c, Const) and c.value % d == 0:
            return _simplify_assoc(Mul, terms[:-1] + [Const(c.value // d)])
    return None


# --- emission ---------------------------------------------------------------

def emit_c(e: IndexExpr, names: Mapping[str, str] | None = None) -> str:
    """Fully parenthesized C rendering; constants are decimal."""
    if isinstance(e, Const):
        return str(e.value)
    if isinstance(e, Var):
        return names.get(e.name, e.name) if names else e.name
    return f"({emit_c(e.lhs, names)} {_C_OPS[type(e)]} {emit_c(e.rhs, names)})"


def emit_py(e: IndexExpr, names: Mapping[str, str] | None = None) -> str:
    if isinstance(e, Const):
        return str(e.value)
    if isinstance(e, Var):
        return names.get(e.name, e.name) if names else e.name
    return f"({emit_py(e.lhs, names)} {_PY_OPS[type(e)]} {emit_py(e.rhs, names)})"


def compile_py(e: IndexExpr, args: tuple[str, ...]) -> Callable[..., int]:
    """Compile ``e`` to a Python callable taking ``args`` positionally."""
    names = {a: f"_a{i}" for i, a in enumerate(args)}
    missing = free_vars(e) - set(args)
    if missing:
        raise UnboundVar(sorted(missing)[0])
    params = ", ".join(names[a] for a in args)
    return eval(f"lambda {params}: {emit_py(e, names)}")  # noqa: S307


# --- parsing ----------------------------------------------------------------

_AST_OPS = {
    ast.Add: Add, ast.Mult: Mul, ast.Div: Div, ast.FloorDiv: Div, ast.Mod: Mod,
    ast.RShift: Shr, ast.LShift: Shl, ast.BitAnd: BitAnd, ast.BitOr: BitOr,
}


def parse_index(text: str) -> IndexExpr:
    """Parse C-like integer syntax (``((id >> 1) & 0x07) | ...``).

    Operator precedence of the supported operators agrees between C and
    Python, so Python's own parser does the work.  Dotted names such as
    ``blockIdx.x`` are accepted as single variables.
    """
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ParseError(f"bad index expression {text!r}: {exc.msg}") from None
    return _from_ast(tree.body, text)


def _from_ast(node: ast.AST, text: str) -> IndexExpr:
    if isinstance(node, ast.Constant) and isinstance(node.value, int) and not isinstance(node.value, bool):
        if node.value < 0:
            raise ParseError(f"negative constant in {text!r}")
        return Const(node.value)
    if isinstance(node, ast.Name):
        return Var(node.id)
    if isinstance(node, ast.Attribute) and isinstance(node.value, ast.Name):
        return Var(f"{node.value.id}.{node.attr}")
    if isinstance(node, ast.BinOp) and type(node.op) in _AST_OPS:
        return _AST_OPS[type(node.op)](_from_ast(node.left, text), _from_ast(node.right, text))
    raise ParseError(f"unsupported construct in index expression {text!r}")
