"""Decomposition trees, refinements, spec transformation rules and validation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

from . import spec as S
from .errors import (
    CNotInGL, DecompositionError, HierarchyViolation, IllegalRefinement, InvalidMoveDecomp,
    InvalidOperand, NoExecutableMatch, NonDivisible, NotMatMul, PatternMismatch,
    SwizzleNotBijective, TileSchedError, UnboundVar, UnitCountMismatch, UpwardLoad,
)
from .index import IndexExpr, as_expr, free_vars, is_bijection, parse_index
from .spec import (
    BUILTINS, ComputeLevel, ElemType, Instruction, Layout, Major, MatMul, MatrixRef,
    MemLevel, MicroKernel, Move, Spec, WARP_SIZE, match_executable, nearest_patterns,
    spec_short_form,
)

# --- refinements and nodes --------------------------------------------------


@dataclass(frozen=True)
class TileRefinements:
    to: ComputeLevel | None = None
    unroll: bool = False
    layout: Major | None = None
    swizzle: IndexExpr | None = None


@dataclass(frozen=True)
class SplitRefinements:
    unroll: bool = False
    sync: bool = False


@dataclass(frozen=True)
class LoadRefinements:
    no_sync: bool = False
    storage_layout: Major | None = None
    pad: int = 0
    align: int | None = None
    reuse_buffer: bool = False


@dataclass(frozen=True)
class Done:
    micro_kernel: MicroKernel | None = None


@dataclass(frozen=True)
class Tile:
    r: int
    c: int
    ref: TileRefinements
    child: "DecompNode"


@dataclass(frozen=True)
class Split:
    k: int
    ref: SplitRefinements
    child: "DecompNode"


@dataclass(frozen=True)
class Load:
    operand: str  # "A" | "B" | "SRC"
    target: MemLevel
    move: "DecompNode"
    ref: LoadRefinements
    child: "DecompNode"


@dataclass(frozen=True)
class Epilog:
    acc: MemLevel
    init: "DecompNode"
    store: "DecompNode"
    child: "DecompNode"


@dataclass(frozen=True)
class MmaTile:
    child: "DecompNode"


DecompNode = Union[Tile, Split, Load, Epilog, MmaTile, Done]


def main_chain(node: DecompNode) -> list[DecompNode]:
    out = []
    while True:
        out.append(node)
        if isinstance(node, Done):
            return out
        node = node.child


# --- fluent construction ----------------------------------------------------


class Fluent:
    """Chained construction of a decomposition, e.g.::

        Fluent().tile(128, 128).to(Block).split(8).tile(1, 1).done()

    Refinement methods modify the most recent decomposition step and raise
    :class:`IllegalRefinement` when they do not apply to it.
    """

    def __init__(self):
        self._steps: list[list] = []

    # decompositions
    def tile(self, r: int, c: int) -> "Fluent":
        self._steps.append(["tile", r, c, {}])
        return self

    def split(self, k: int) -> "Fluent":
        self._steps.append(["split", k, {}])
        return self

    def load(self, operand: str, target: MemLevel, move: DecompNode) -> "Fluent":
        operand = operand.upper()
        if operand not in ("A", "B", "SRC"):
            raise InvalidOperand(f"cannot load operand {operand!r}")
        self._steps.append(["load", operand, target, move, {}])
        return self

    def epilog(self, acc: MemLevel, init: DecompNode, store: DecompNode) -> "Fluent":
        self._steps.append(["epilog", acc, init, store])
        return self

    def mma_tile(self) -> "Fluent":
        self._steps.append(["mmaTile"])
        return self

    # refinements
    def _last(self, *kinds: str) -> dict:
        if not self._steps or self._steps[-1][0] not in kinds:
            have = self._steps[-1][0] if self._steps else "nothing"
            raise IllegalRefinement(f"refinement requires a preceding {'/'.join(kinds)}, found {have}")
        return self._steps[-1][-1]

    def to(self, level: ComputeLevel) -> "Fluent":
        self._last("tile")["to"] = level
        return self

    def unroll(self) -> "Fluent":
        self._last("tile", "split")["unroll"] = True
        return self

    def layout(self, major: Major) -> "Fluent":
        self._last("tile")["layout"] = major
        return self

    def swizzle(self, expr: IndexExpr | str) -> "Fluent":
        self._last("tile")["swizzle"] = parse_index(expr) if isinstance(expr, str) else as_expr(expr)
        return self

    def sync(self) -> "Fluent":
        self._last("split")["sync"] = True
        return self

    def no_sync(self) -> "Fluent":
        refs = self._last("load")
        refs["no_sync"] = True
        return self

    def storage_layout(self, major: Major) -> "Fluent":
        self._last("load")["storage_layout"] = major
        return self

    def pad(self, n: int) -> "Fluent":
        refs = self._last("load")
        if self._steps[-1][2].kind != "SH":
            raise IllegalRefinement(f"pad applies to shared-memory loads, not {self._steps[-1][2]}")
        if n < 0:
            raise IllegalRefinement("pad must be nonnegative")
        refs["pad"] = n
        return self

    def align(self, nbytes: int) -> "Fluent":
        if nbytes < 1 or nbytes & (nbytes - 1) or 256 % nbytes:
            raise IllegalRefinement(f"alignment {nbytes} must be a power of two dividing 256")
        self._last("load")["align"] = nbytes
        return self

    def reuse_buffer(self) -> "Fluent":
        self._last("load")
        if self._steps[-1][2].kind != "SH":
            raise IllegalRefinement("reuseBuffer applies to shared-memory loads")
        self._steps[-1][-1]["reuse_buffer"] = True
        return self

    def done(self, micro_kernel: MicroKernel | None = None) -> DecompNode:
        node: DecompNode = Done(micro_kernel)
        for step in reversed(self._steps):
            node = _build(step, node)
        return node


def _build(step: list, child: DecompNode) -> DecompNode:
    kind = step[0]
    if kind == "tile":
        ref = TileRefinements(**step[3])
        if ref.to is None and (ref.layout is not None or ref.swizzle is not None):
            raise IllegalRefinement("layout/swizzle modify a parallel assignment and need .to(level)")
        return Tile(step[1], step[2], ref, child)
    if kind == "split":
        return Split(step[1], SplitRefinements(**step[2]), child)
    if kind == "load":
        return Load(step[1], step[2], step[3], LoadRefinements(**step[4]), child)
    if kind == "epilog":
        return Epilog(step[1], step[2], step[3], child)
    if not isinstance(child, Done):
        raise IllegalRefinement("mmaTile must be the last decomposition before done")
    return MmaTile(child)


# --- spec transformation rules ----------------------------------------------


def tile(s: Spec, r: int, c: int) -> Spec:
    if r < 1 or c < 1:
        raise NonDivisible("tile", 0, min(r, c))
    if isinstance(s, MatMul):
        if s.exotic:
            raise PatternMismatch("instruction-shaped specs cannot be tiled")
        if s.M % r:
            raise NonDivisible("M", s.M, r)
        if s.N % c:
            raise NonDivisible("N", s.N, c)
        return replace(s, a=s.a.with_shape(r, s.K), b=s.b.with_shape(s.K, c), c=s.c.with_shape(r, c))
    if s.rows % r:
        raise NonDivisible("rows", s.rows, r)
    if s.cols % c:
        raise NonDivisible("cols", s.cols, c)
    src = None if s.src is None else s.src.with_shape(r, c)
    return Move(src, s.dst.with_shape(r, c), s.level)


def tile_counts(s: Spec, r: int, c: int) -> tuple[int, int]:
    if isinstance(s, MatMul):
        return s.M // r, s.N // c
    return s.rows // r, s.cols // c


_ALLOWED_ASSIGN = {
    ComputeLevel.KERNEL: (ComputeLevel.BLOCK,),
    ComputeLevel.BLOCK: (ComputeLevel.WARP, ComputeLevel.THREAD),
    ComputeLevel.WARP: (ComputeLevel.THREAD,),
    ComputeLevel.THREAD: (),
}


def assign_to(s: Spec, level: ComputeLevel) -> Spec:
    """Hand the tiled spec to ``level``; only strictly descending moves are
    legal and a kernel-level spec must first go to blocks."""
    if level not in _ALLOWED_ASSIGN[s.level]:
        raise HierarchyViolation(f"cannot assign a {s.level}-level spec to {level}")
    return replace(s, level=level)


def split(s: Spec, k: int) -> MatMul:
    if not isinstance(s, MatMul) or s.exotic:
        raise NotMatMul(f"split applies to MatMul specs, not {spec_short_form(s)}")
    if k < 1 or s.K % k:
        raise NonDivisible("K", s.K, k)
    return replace(s, a=s.a.with_shape(s.M, k), b=s.b.with_shape(k, s.N))


def load_move_spec(s: Spec, operand: str, target: MemLevel,
                   ref: LoadRefinements = LoadRefinements()) -> tuple[Spec, Move]:
    """Return the spec after ``load`` and the induced Move spec."""
    if isinstance(s, MatMul):
        if operand not in ("A", "B") or s.exotic:
            raise InvalidOperand(f"MatMul loads operand A or B, not {operand}")
    elif operand != "SRC":
        raise InvalidOperand(f"Move loads operand SRC, not {operand}")
    elif s.src is None:
        raise InvalidOperand("a zero-fill Move has no source to load")
    m = s.operand(operand)
    staging = isinstance(s, Move) and m.mem.kind in ("RF", "FR") and target.kind == "SH"
    if not (target.is_below(m.mem) or staging):
        raise UpwardLoad(f"cannot load {operand} from {m.mem} to {target}")
    if ref.pad and target.kind != "SH":
        raise IllegalRefinement("pad applies to shared-memory loads")
    if ref.align is not None and ref.align < m.elem.nbytes:
        raise IllegalRefinement(f"alignment {ref.align} is below the element size {m.elem.nbytes}")
    layout = Layout(ref.storage_layout or m.layout.major, ref.pad)
    moved = replace(m, mem=target, layout=layout)
    return s.with_operand(operand, moved), Move(m, moved, s.level)


def load(s: Spec, operand: str, target: MemLevel, move_decomp: DecompNode | None = None,
         ref: LoadRefinements = LoadRefinements()) -> Spec:
    new, induced = load_move_spec(s, operand, target, ref)
    if move_decomp is not None:
        _check_nested(induced, move_decomp, f"load({operand},{target})")
    return new


def epilog_specs(s: Spec, acc: MemLevel) -> tuple[MatMul, Move, Move]:
    """Return the accumulating spec plus the init and store Move specs."""
    if not isinstance(s, MatMul) or s.exotic:
        raise NotMatMul("epilog applies to MatMul specs")
    if s.c.mem.kind != "GL":
        raise CNotInGL(f"epilog expects C in GL, found {s.c.mem}")
    if acc.kind not in ("RF", "FR"):
        raise IllegalRefinement(f"epilog accumulates in RF or FR, not {acc}")
    acc_c = replace(s.c, mem=acc, layout=Layout(s.c.layout.major))
    new = replace(s, c=acc_c, accumulate=True)
    return new, Move(None, acc_c, s.level), Move(acc_c, s.c, s.level)


def epilog(s: Spec, acc: MemLevel, init: DecompNode | None = None,
           store: DecompNode | None = None) -> MatMul:
    new, init_spec, store_spec = epilog_specs(s, acc)
    if init is not None:
        _check_nested(init_spec, init, "epilog/init")
    if store is not None:
        _check_nested(store_spec, store, "epilog/store")
    return new


def mma_tile(s: Spec) -> MatMul:
    """Warp-level 16x16x(4k) register MatMul -> the per-thread HMMA.884 spec."""
    ok = (isinstance(s, MatMul) and not s.exotic and s.level is ComputeLevel.WARP
          and s.M == 16 and s.N == 16 and s.K % 4 == 0
          and all(m.mem.kind == "RF" for m in (s.a, s.b, s.c))
          and s.a.elem is ElemType.F16 and s.b.elem is ElemType.F16)
    if not ok:
        raise PatternMismatch(f"mmaTile expects MatMul(16,16,4k)(RF,RF,RF)(Warp) in F16, got {spec_short_form(s)}")
    a = MatrixRef("A", 1, 4, ElemType.F16, S.RF, Layout(Major.ROW))
    b = MatrixRef("B", 4, 1, ElemType.F16, S.RF, Layout(Major.COL))
    c = MatrixRef("C", 1, 8, s.c.elem, S.RF, Layout(Major.COL))
    return MatMul(a, b, c, ComputeLevel.THREAD, accumulate=s.accumulate, exotic=True)


@dataclass(frozen=True)
class ResidualBinding:
    spec: Spec
    executable: Instruction | MicroKernel

    @property
    def is_micro_kernel(self) -> bool:
        return isinstance(self.executable, MicroKernel)

    @property
    def simulatable(self) -> bool:
        return not self.is_micro_kernel and self.executable.simulatable


def done(s: Spec, mk: MicroKernel | None = None,
         instrs: tuple[Instruction, ...] = BUILTINS) -> ResidualBinding:
    if mk is not None and mk.matches(s):
        return ResidualBinding(s, mk)
    hit = match_executable(s, instrs)
    if hit is None:
        near = "; ".join(nearest_patterns(s, instrs))
        raise NoExecutableMatch(f"residual {spec_short_form(s)} is not executable (nearest: {near})")
    return ResidualBinding(s, hit)


def _check_nested(induced: Spec, node: DecompNode, label: str) -> None:
    w = _Walker()
    w.walk(induced, node, path=label, main=False)
    if w.violations:
        first = w.violations[0]
        raise InvalidMoveDecomp(f"{label}: {first}")


# --- elaboration and validation ---------------------------------------------


@dataclass(frozen=True)
class TraceEntry:
    label: str
    spec: Spec
    depth: int = 0
    nested: tuple[tuple[str, tuple["TraceEntry", ...]], ...] = ()

    @property
    def short_form(self) -> str:
        return spec_short_form(self.spec)


@dataclass(frozen=True)
class LaunchConfig:
    grid: tuple[int, int, int]
    block: tuple[int, int, int]

    @property
    def threads(self) -> int:
        return self.block[0]

    @property
    def warps(self) -> int:
        return max(1, -(-self.block[0] // WARP_SIZE))

    @property
    def blocks(self) -> int:
        return self.grid[0] * self.grid[1] * self.grid[2]


@dataclass
class ValidationReport:
    ok: bool
    violations: list[TileSchedError]
    warnings: list[str]
    launch: LaunchConfig | None = None
    shared_bytes: int | None = None
    trace: list[TraceEntry] = field(default_factory=list)
    bindings: list[tuple[str, ResidualBinding]] = field(default_factory=list)

    def raise_first(self) -> None:
        if self.violations:
            raise self.violations[0]


@dataclass
class _UnitEvent:
    seq: int
    step: int
    path: str
    main: bool
    src: ComputeLevel
    dst: ComputeLevel
    counts: tuple[int, int]
    layout: Major
    swizzle: IndexExpr | None


class _Walker:
    def __init__(self, instrs: tuple[Instruction, ...] = BUILTINS):
        self.instrs = instrs
        self.violations: list[tuple[int, TileSchedError]] = []
        self.events: list[_UnitEvent] = []
        self.warnings: list[str] = []
        self.bindings: list[tuple[str, ResidualBinding]] = []
        self.seq = 0
        self.step = 0

    def fail(self, exc: TileSchedError, path: str) -> None:
        self.seq += 1
        exc.step = self.step
        exc.path = path
        self.violations.append((self.seq, exc))

    def walk(self, s: Spec, node: DecompNode, path: str, main: bool) -> list[TraceEntry]:
        entries: list[TraceEntry] = []

        def emit(label: str, spec: Spec, nested=()) -> None:
            entries.append(TraceEntry(label, spec, 0 if main else 1, tuple(nested)))
            if main:
                self.step += 1

        here = path or "root"
        if not main:
            entries.append(TraceEntry("root", s, 1, ()))  # the induced Move itself
        while True:
            try:
                if isinstance(node, Tile):
                    t = tile(s, node.r, node.c)
                    emit(f".tile({node.r},{node.c})", t)
                    if node.ref.to is not None:
                        counts = tile_counts(s, node.r, node.c)
                        self._check_swizzle(node.ref, counts, here)
                        t2 = assign_to(t, node.ref.to)
                        self.seq += 1
                        self.events.append(_UnitEvent(self.seq, self.step, here, main, s.level,
                                                      node.ref.to, counts,
                                                      node.ref.layout or Major.ROW, node.ref.swizzle))
                        emit(f".to({node.ref.to})", t2)
                        t = t2
                    s = t
                elif isinstance(node, Split):
                    s = split(s, node.k)
                    if not node.ref.sync and _contains_shared_load(node.child):
                        self.warnings.append(
                            f"{here}: split({node.k}) encloses a shared-memory load without .sync; "
                            "the next iteration's writes may race with this iteration's reads")
                    emit(f".split({node.k})", s)
                elif isinstance(node, Load):
                    new, induced = load_move_spec(s, node.operand, node.target, node.ref)
                    if s.level is ComputeLevel.KERNEL:
                        raise HierarchyViolation("loads need a block-level (or lower) spec")
                    if node.target.kind == "FR" and s.level is ComputeLevel.THREAD:
                        raise HierarchyViolation("fragments are warp-wide; cannot load to FR at thread level")
                    label = f".load({node.operand},{node.target})"
                    sub = self.walk(induced, node.move, f"{here}/{label[1:]}", main=False)
                    s = new
                    emit(label, s, [(label[1:], tuple(sub))])
                elif isinstance(node, Epilog):
                    new, init_spec, store_spec = epilog_specs(s, node.acc)
                    if s.level is ComputeLevel.KERNEL:
                        raise HierarchyViolation("epilog needs a block-level (or lower) spec")
                    if node.acc.kind == "FR" and s.level is ComputeLevel.THREAD:
                        raise HierarchyViolation("fragments are warp-wide; cannot accumulate in FR at thread level")
                    label = f".epilog({node.acc})"
                    init_tr = self.walk(init_spec, node.init, f"{here}/epilog-init", main=False)
                    store_tr = self.walk(store_spec, node.store, f"{here}/epilog-store", main=False)
                    s = new
                    emit(label, s, [("init", tuple(init_tr)), ("store", tuple(store_tr))])
                elif isinstance(node, MmaTile):
                    s = mma_tile(s)
                    emit(".mmaTile", s)
                elif isinstance(node, Done):
                    binding = done(s, node.micro_kernel, self.instrs)
                    self.bindings.append((here, binding))
                    return entries
                else:  # pragma: no cover - closed union
                    raise DecompositionError(f"unknown node {node!r}")
            except TileSchedError as exc:
                self.fail(exc, here)
                return entries
            node = node.child

    def _check_swizzle(self, ref: TileRefinements, counts: tuple[int, int], path: str) -> None:
        if ref.swizzle is None:
            return
        extra = free_vars(ref.swizzle) - {"id"}
        if extra:
            raise UnboundVar(sorted(extra)[0])
        domain = counts[0] * counts[1]
        if not is_bijection(ref.swizzle, domain):
            self.fail(SwizzleNotBijective(
                f"swizzle {ref.swizzle} does not permute [0,{domain})"), path)


def _contains_shared_load(node: DecompNode) -> bool:
    while not isinstance(node, Done):
        if isinstance(node, Load) and node.target.kind == "SH":
            return True
        node = node.child
    return False


def _derive_launch(root: Spec, events: list[_UnitEvent]) -> tuple[LaunchConfig, list[tuple[int, TileSchedError]]]:
    grid = (1, 1, 1)
    threads: int | None = None
    problems: list[tuple[int, TileSchedError]] = []
    ordered = [e for e in events if e.main] + [e for e in events if not e.main]
    for e in ordered:
        if e.dst is ComputeLevel.BLOCK and e.main and grid == (1, 1, 1):
            nr, nc = e.counts
            if e.swizzle is not None:
                grid = (nr * nc, 1, 1)
            elif e.layout is Major.ROW:
                grid = (nr, nc, 1)
            else:
                grid = (nc, nr, 1)
        if threads is None:
            if e.dst is ComputeLevel.WARP:
                threads = e.counts[0] * e.counts[1] * WARP_SIZE
            elif e.dst is ComputeLevel.THREAD and e.src is ComputeLevel.BLOCK:
                threads = e.counts[0] * e.counts[1]
    if root.level is ComputeLevel.THREAD:
        threads = 1
    elif root.level is ComputeLevel.WARP:
        threads = WARP_SIZE
    elif threads is None:
        threads = 1 if not any(e.dst is ComputeLevel.THREAD for e in events) else WARP_SIZE
    for e in events:
        n = e.counts[0] * e.counts[1]
        want = None
        if e.dst is ComputeLevel.BLOCK and not e.main:
            want = grid[0] * grid[1]
        elif e.dst is ComputeLevel.WARP:
            if threads % WARP_SIZE:
                want = -1
            else:
                want = threads // WARP_SIZE
        elif e.dst is ComputeLevel.THREAD:
            want = WARP_SIZE if e.src is ComputeLevel.WARP else threads
        if want is not None and n != want:
            exc = UnitCountMismatch(
                f"{e.counts[0]}x{e.counts[1]} tiles assigned to {e.dst} but there are "
                f"{want if want >= 0 else 'no whole'} {str(e.dst).lower()} units")
            exc.step, exc.path = e.step, e.path
            problems.append((e.seq, exc))
    return LaunchConfig(grid, (threads, 1, 1)), problems


def validate(root: Spec, tree: DecompNode, instrs: tuple[Instruction, ...] = BUILTINS) -> ValidationReport:
    w = _Walker(instrs)
    trace = [TraceEntry("root", root)] + w.walk(root, tree, path="", main=True)
    launch, unit_problems = _derive_launch(root, w.events)
    found = sorted(w.violations + unit_problems, key=lambda p: p[0])
    violations = [exc for _, exc in found]
    report = ValidationReport(not violations, violations, w.warnings, launch,
                              trace=trace, bindings=w.bindings)
    if report.ok:
        from .lower import lower  # deferred: lowering depends on this module

        from .lower import SHARED_CAPACITY

        try:
            report.shared_bytes = lower(root, tree, launch, instrs, check_capacity=False).plan.shared_bytes
            if report.shared_bytes > SHARED_CAPACITY:
                report.warnings.append(
                    f"shared memory plan needs {report.shared_bytes} bytes per block, over the "
                    f"{SHARED_CAPACITY}-byte budget; code generation will fail")
        except TileSchedError as exc:
            report.ok = False
            report.violations.append(exc)
    return report


def elaborate(root: Spec, tree: DecompNode, instrs: tuple[Instruction, ...] = BUILTINS) -> list[TraceEntry]:
    report = validate(root, tree, instrs)
    report.raise_first()
    return report.trace


def format_trace(entries: list[TraceEntry], nested: bool = False, labels: bool = False) -> str:
    lines: list[str] = []

    def put(es, indent: int) -> None:
        for e in es:
            text = e.short_form
            if labels:
                text = f"{e.label:<18} // {text}"
            lines.append("  " * indent + text)
            if nested:
                for name, sub in e.nested:
                    lines.append("  " * (indent + 1) + f"[{name}]")
                    put(sub, indent + 2)

    put(entries, 0)
    return "\n".join(lines) + "\n"
