"""Matrices, memory and compute hierarchies, specs, and executable patterns."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Union

from .errors import AmbiguousMatch, DuplicatePattern, ShapeMismatch, SpecError, ZeroDim

WARP_SIZE = 32


class ElemType(enum.Enum):
    F32 = 32
    F16 = 16

    @property
    def bit_width(self) -> int:
        return self.value

    @property
    def nbytes(self) -> int:
        return self.value // 8

    @property
    def c_name(self) -> str:
        return "float" if self is ElemType.F32 else "half"

    def __str__(self) -> str:
        return self.name


class ComputeLevel(enum.IntEnum):
    """Ordered so that ``Kernel > Block > Warp > Thread``."""

    THREAD = 0
    WARP = 1
    BLOCK = 2
    KERNEL = 3

    def __str__(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "ComputeLevel":
        key = text.strip().upper()
        if key == "LANE":
            key = "THREAD"
        if key == "CTA":
            key = "BLOCK"
        try:
            return cls[key]
        except KeyError:
            raise SpecError(f"unknown compute level {text!r}") from None


Kernel, Block, Warp, Thread = (ComputeLevel.KERNEL, ComputeLevel.BLOCK,
                               ComputeLevel.WARP, ComputeLevel.THREAD)


class Major(enum.Enum):
    ROW = "RowMajor"
    COL = "ColMajor"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "Major":
        t = text.strip().lower()
        if t in ("rowmajor", "row"):
            return cls.ROW
        if t in ("colmajor", "col", "columnmajor"):
            return cls.COL
        raise SpecError(f"unknown layout {text!r}")


RowMajor, ColMajor = Major.ROW, Major.COL


@dataclass(frozen=True)
class Layout:
    major: Major = Major.COL
    pad: int = 0

    def __post_init__(self):
        if self.pad < 0:
            raise SpecError("padding must be nonnegative")

    def stride(self, rows: int, cols: int) -> int:
        return (cols if self.major is Major.ROW else rows) + self.pad

    def extent(self, rows: int, cols: int) -> int:
        """Physical element count including padding."""
        if self.major is Major.ROW:
            return rows * (cols + self.pad)
        return cols * (rows + self.pad)


@dataclass(frozen=True)
class MemLevel:
    kind: str
    frag: tuple[int, int, int] | None = None

    _RANK = {"GL": 3, "SH": 2, "RF": 1, "FR": 1}

    def __post_init__(self):
        if self.kind not in self._RANK:
            raise SpecError(f"unknown memory level {self.kind!r}")
        if self.kind == "FR":
            if self.frag is None or len(self.frag) != 3 or min(self.frag) < 1:
                raise SpecError("FR needs three positive shape parameters")
        elif self.frag is not None:
            raise SpecError(f"{self.kind} takes no parameters")

    @property
    def rank(self) -> int:
        return self._RANK[self.kind]

    def is_below(self, other: "MemLevel") -> bool:
        return self.rank < other.rank

    def __str__(self) -> str:
        return self.kind

    def describe(self) -> str:
        if self.frag:
            return "FR(%d,%d,%d)" % self.frag
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "MemLevel":
        t = text.strip()
        m = re.fullmatch(r"(?:FR|Fragment)\s*[<(]\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*[>)]", t)
        if m:
            return cls("FR", tuple(int(g) for g in m.groups()))
        if t in ("FR", "Fragment"):
            return FR()
        return cls(t.upper())


GL = MemLevel("GL")
SH = MemLevel("SH")
RF = MemLevel("RF")


def FR(m: int = 16, n: int = 16, k: int = 16) -> MemLevel:
    return MemLevel("FR", (m, n, k))


@dataclass(frozen=True)
class MatrixRef:
    name: str
    rows: int
    cols: int
    elem: ElemType = ElemType.F32
    mem: MemLevel = GL
    layout: Layout = field(default_factory=Layout)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ZeroDim(f"matrix {self.name} has shape {self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def with_shape(self, rows: int, cols: int) -> "MatrixRef":
        return replace(self, rows=rows, cols=cols)


@dataclass(frozen=True)
class MatMul:
    """``C = A * B`` (or ``C += A * B`` once ``accumulate`` is set by an epilog).

    ``exotic`` marks instruction-shaped specs (HMMA) whose operand shapes do
    not follow the usual MxK * KxN = MxN rule.
    """

    a: MatrixRef
    b: MatrixRef
    c: MatrixRef
    level: ComputeLevel
    accumulate: bool = False
    exotic: bool = False

    def __post_init__(self):
        if self.exotic:
            return
        a, b, c = self.a, self.b, self.c
        if not (a.rows == c.rows and b.cols == c.cols and a.cols == b.rows):
            raise ShapeMismatch(
                f"MatMul operands {a.rows}x{a.cols} * {b.rows}x{b.cols} -> {c.rows}x{c.cols}")
        if len({a.name, b.name, c.name}) != 3:
            raise SpecError("operand names must be unique within a spec")

    @property
    def M(self) -> int:
        return self.a.rows

    @property
    def N(self) -> int:
        return self.c.cols

    @property
    def K(self) -> int:
        return self.a.cols

    def operand(self, name: str) -> MatrixRef:
        return {"A": self.a, "B": self.b, "C": self.c}[name]

    def with_operand(self, name: str, m: MatrixRef) -> "MatMul":
        return replace(self, **{name.lower(): m})

    def __str__(self) -> str:
        return spec_short_form(self)


@dataclass(frozen=True)
class Move:
    """Copy ``src`` into ``dst``; ``src is None`` means zero-fill ``dst``."""

    src: MatrixRef | None
    dst: MatrixRef
    level: ComputeLevel

    def __post_init__(self):
        s, d = self.src, self.dst
        if s is None:
            return
        if s.shape != d.shape:
            raise ShapeMismatch(f"Move {s.rows}x{s.cols} -> {d.rows}x{d.cols}")
        if s.elem is not d.elem:
            raise ShapeMismatch(f"Move element types differ ({s.elem} -> {d.elem})")

    @property
    def rows(self) -> int:
        return self.dst.rows

    @property
    def cols(self) -> int:
        return self.dst.cols

    @property
    def is_fill(self) -> bool:
        return self.src is None

    def operand(self, name: str) -> MatrixRef:
        m = {"SRC": self.src, "DST": self.dst}[name]
        if m is None:
            raise SpecError("zero-fill Move has no source operand")
        return m

    def with_operand(self, name: str, m: MatrixRef) -> "Move":
        return replace(self, **{name.lower(): m})

    def __str__(self) -> str:
        return spec_short_form(self)


Spec = Union[MatMul, Move]


def make_matmul_spec(M: int, N: int, K: int,
                     elems: tuple[ElemType, ElemType, ElemType] = (ElemType.F32,) * 3,
                     mems: tuple[MemLevel, MemLevel, MemLevel] = (GL, GL, GL),
                     layouts: tuple[Layout, Layout, Layout] = (Layout(), Layout(), Layout()),
                     level: ComputeLevel = Kernel) -> MatMul:
    for dim, v in (("M", M), ("N", N), ("K", K)):
        if v < 1:
            raise ZeroDim(f"{dim}={v}")
    a = MatrixRef("A", M, K, elems[0], mems[0], layouts[0])
    b = MatrixRef("B", K, N, elems[1], mems[1], layouts[1])
    c = MatrixRef("C", M, N, elems[2], mems[2], layouts[2])
    return MatMul(a, b, c, level)


def make_move_spec(src: MatrixRef, dst: MatrixRef, level: ComputeLevel) -> Move:
    return Move(src, dst, level)


def spec_short_form(s: Spec) -> str:
    if isinstance(s, MatMul):
        return (f"MatMul({s.M},{s.N},{s.K})"
                f"({s.a.mem},{s.b.mem},{s.c.mem})({s.level})")
    src = "0" if s.src is None else str(s.src.mem)
    return f"Move({s.rows}x{s.cols})({src}->{s.dst.mem})({s.level})"


# --- executables ------------------------------------------------------------

class SimSemantics(enum.Enum):
    FMA = "FMA"
    WMMA_MMA = "WMMA_MMA"
    WMMA_LOAD = "WMMA_LOAD"
    WMMA_STORE = "WMMA_STORE"
    MOVE = "MOVE"
    ZERO = "ZERO"
    OPAQUE = "OPAQUE"


@dataclass(frozen=True)
class MatrixPattern:
    """Constraints on one operand; ``None`` fields match anything."""

    rows: int | None = None
    cols: int | None = None
    elems: frozenset[ElemType] | None = None
    mems: frozenset[str] | None = None
    major: Major | None = None

    def matches(self, m: MatrixRef) -> bool:
        return ((self.rows is None or m.rows == self.rows)
                and (self.cols is None or m.cols == self.cols)
                and (self.elems is None or m.elem in self.elems)
                and (self.mems is None or m.mem.kind in self.mems)
                and (self.major is None or m.layout.major is self.major))


@dataclass(frozen=True)
class SpecPattern:
    kind: str  # "MatMul" | "Move"
    level: ComputeLevel
    operands: tuple[MatrixPattern, ...]
    fill: bool = False
    exotic: bool = False

    def matches(self, s: Spec) -> bool:
        if s.level is not self.level:
            return False
        if isinstance(s, MatMul):
            return (self.kind == "MatMul" and s.exotic == self.exotic
                    and all(p.matches(m) for p, m in zip(self.operands, (s.a, s.b, s.c))))
        if self.kind != "Move" or s.is_fill != self.fill:
            return False
        if self.fill:
            return self.operands[-1].matches(s.dst)
        return all(p.matches(m) for p, m in zip(self.operands, (s.src, s.dst)))

    def describe(self) -> str:
        def one(p: MatrixPattern) -> str:
            mem = "|".join(sorted(p.mems)) if p.mems else "_"
            return mem
        if self.kind == "MatMul":
            a, b, c = self.operands
            return (f"MatMul({a.rows or 'M'},{c.cols or 'N'},{a.cols or 'K'})"
                    f"({one(a)},{one(b)},{one(c)})({self.level})")
        d = self.operands[-1]
        src = "0" if self.fill else one(self.operands[0])
        return f"Move({d.rows or 'R'}x{d.cols or 'C'})({src}->{one(d)})({self.level})"


@dataclass(frozen=True)
class Instruction:
    name: str
    pattern: SpecPattern
    emission: str
    sim: SimSemantics

    @property
    def simulatable(self) -> bool:
        return self.sim is not SimSemantics.OPAQUE


_F16 = frozenset({ElemType.F16})
_F32 = frozenset({ElemType.F32})
_ANY_ELEM = frozenset(ElemType)
_MEMORY = frozenset({"GL", "SH", "RF"})
_SCALAR = MatrixPattern(1, 1, mems=frozenset({"RF"}))
_TILE16 = dict(rows=16, cols=16)

BUILTINS: tuple[Instruction, ...] = (
    Instruction("FFMA", SpecPattern("MatMul", Thread, (
        MatrixPattern(1, 1, _F32, frozenset({"RF"})),
        MatrixPattern(1, 1, _F32, frozenset({"RF"})),
        MatrixPattern(1, 1, _F32, frozenset({"RF"})))),
        "{C} += {A} * {B};", SimSemantics.FMA),
    Instruction("HFMA", SpecPattern("MatMul", Thread, (
        MatrixPattern(1, 1, _F16, frozenset({"RF"})),
        MatrixPattern(1, 1, _F16, frozenset({"RF"})),
        MatrixPattern(1, 1, _F16, frozenset({"RF"})))),
        "{C} = __hfma({A}, {B}, {C});", SimSemantics.FMA),
    Instruction("MOV", SpecPattern("Move", Thread, (
        MatrixPattern(1, 1, mems=_MEMORY), MatrixPattern(1, 1, mems=_MEMORY))),
        "{DST} = {SRC};", SimSemantics.MOVE),
    Instruction("ZERO", SpecPattern("Move", Thread, (
        MatrixPattern(1, 1, mems=_MEMORY),), fill=True),
        "{DST} = {ZERO};", SimSemantics.ZERO),
    Instruction("wmma::mma_sync", SpecPattern("MatMul", Warp, (
        MatrixPattern(16, 16, _F16, frozenset({"FR"})),
        MatrixPattern(16, 16, _F16, frozenset({"FR"})),
        MatrixPattern(16, 16, _ANY_ELEM, frozenset({"FR"})))),
        "wmma::mma_sync({C}, {A}, {B}, {C});", SimSemantics.WMMA_MMA),
    Instruction("wmma::load_matrix_sync", SpecPattern("Move", Warp, (
        MatrixPattern(**_TILE16, elems=_ANY_ELEM, mems=_MEMORY),
        MatrixPattern(**_TILE16, elems=_ANY_ELEM, mems=frozenset({"FR"})))),
        "wmma::load_matrix_sync({DST}, {SRC_PTR}, {SRC_LD});", SimSemantics.WMMA_LOAD),
    Instruction("wmma::store_matrix_sync", SpecPattern("Move", Warp, (
        MatrixPattern(**_TILE16, elems=_ANY_ELEM, mems=frozenset({"FR"})),
        MatrixPattern(**_TILE16, elems=_ANY_ELEM, mems=_MEMORY))),
        "wmma::store_matrix_sync({DST_PTR}, {SRC}, {DST_LD}, {DST_MAJOR});", SimSemantics.WMMA_STORE),
    # accumulator initialisation without a further wmma API form
    Instruction("fragment-zero", SpecPattern("Move", Warp, (
        MatrixPattern(**_TILE16, mems=frozenset({"FR"})),), fill=True),
        "for (int e = 0; e < {DST}.num_elements; e++) {DST}.x[e] = {ZERO};", SimSemantics.ZERO),
    Instruction("HMMA.884", SpecPattern("MatMul", Thread, (
        MatrixPattern(1, 4, _F16, frozenset({"RF"}), Major.ROW),
        MatrixPattern(4, 1, _F16, frozenset({"RF"}), Major.COL),
        MatrixPattern(1, 8, _ANY_ELEM, frozenset({"RF"}), Major.COL)), exotic=True),
        "{MMA884}",  # operand packing depends on the accumulator type; see codegen
        SimSemantics.OPAQUE),
)

BUILTINS_BY_NAME = {i.name: i for i in BUILTINS}


_PLACEHOLDER = re.compile(r"\$\{(\w+)\}")


@dataclass(frozen=True)
class MicroKernel:
    """Handwritten source bound to one concrete spec.

    Placeholders in ``body`` are written ``${NAME}``; every placeholder used
    must be listed in ``declared_vars``.
    """

    name: str
    pattern: Spec
    body: str
    declared_vars: tuple[str, ...] = ()

    def __post_init__(self):
        used = set(_PLACEHOLDER.findall(self.body))
        undeclared = used - set(self.declared_vars)
        if undeclared:
            raise SpecError(f"micro-kernel {self.name}: undeclared placeholders {sorted(undeclared)}")

    def matches(self, s: Spec) -> bool:
        return spec_signature(s) == spec_signature(self.pattern)

    def render(self, values: dict[str, str]) -> str:
        def sub(m: re.Match) -> str:
            return values[m.group(1)]
        return _PLACEHOLDER.sub(sub, self.body)


def _matrix_signature(m: MatrixRef | None):
    if m is None:
        return None
    return (m.rows, m.cols, m.elem, m.mem, m.layout.major)


def spec_signature(s: Spec) -> tuple:
    """Everything executable matching compares: shapes, element types,
    memory levels, layout majors and level (padding is not compared)."""
    if isinstance(s, MatMul):
        return ("MatMul", s.level, s.exotic) + tuple(_matrix_signature(m) for m in (s.a, s.b, s.c))
    return ("Move", s.level, _matrix_signature(s.src), _matrix_signature(s.dst))


def check_micro_kernels(mks: Iterable[MicroKernel]) -> None:
    seen: dict[tuple, str] = {}
    names: set[str] = set()
    for mk in mks:
        if mk.name in names:
            raise DuplicatePattern(f"micro-kernel name {mk.name!r} registered twice")
        names.add(mk.name)
        sig = spec_signature(mk.pattern)
        if sig in seen:
            raise DuplicatePattern(
                f"micro-kernels {seen[sig]!r} and {mk.name!r} share pattern {spec_short_form(mk.pattern)}")
        seen[sig] = mk.name


def match_executable(s: Spec, instrs: Iterable[Instruction] = BUILTINS,
                     mks: Iterable[MicroKernel] = ()) -> Instruction | MicroKernel | None:
    mk_hits = [mk for mk in mks if mk.matches(s)]
    if len(mk_hits) > 1:
        raise AmbiguousMatch(
            f"{spec_short_form(s)} matches micro-kernels {[m.name for m in mk_hits]}")
    if mk_hits:
        return mk_hits[0]
    hits = [i for i in instrs if i.pattern.matches(s)]
    if len(hits) > 1:
        raise AmbiguousMatch(f"{spec_short_form(s)} matches {[i.name for i in hits]}")
    return hits[0] if hits else None


def nearest_patterns(s: Spec, instrs: Iterable[Instruction] = BUILTINS) -> list[str]:
    """Built-in patterns of the same spec kind, closest level first."""
    kind = "MatMul" if isinstance(s, MatMul) else "Move"
    same = [i for i in instrs if i.pattern.kind == kind]
    same.sort(key=lambda i: (abs(int(i.pattern.level) - int(s.level)), i.name))
    return [f"{i.name}: {i.pattern.describe()}" for i in same[:3]]
