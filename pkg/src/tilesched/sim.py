"""Deterministic CPU execution of lowered kernels, race detection and
distributed-array ownership checking.

Blocks run one after another. Inside a block every thread is a Python
generator that yields at each barrier; the scheduler advances all threads of
the block in lane order through one barrier phase at a time. Shared-memory
accesses are logged as ``(phase, block, thread, op, buffer, index)``.
Warp-wide instructions run on lane 0 of their warp. Every store rounds to the
element type of its buffer, so F32 results carry single-precision error.
"""
from __future__ import annotations

import hashlib
import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .decomp import DecompNode, validate
from .errors import BarrierDivergence, OwnershipViolation, ShapeMismatch, UnsimulatableResidual
from .index import Var, ZERO, compile_py, emit_py, free_vars
from .lower import (
    Barrier, Buffer, Exec, Loop, LoweredKernel, Note, Stmt, View, address, logical_index, lower,
    walk_stmts,
)
from .spec import BUILTINS, ElemType, Instruction, MatMul, MicroKernel, SimSemantics, Spec, spec_short_form

_PY_NAMES = {"blockIdx.x": "bx", "blockIdx.y": "by", "threadIdx.x": "tid"}
_F16 = struct.Struct("<e")
_F32 = struct.Struct("<f")


def round_f16(x: float) -> float:
    try:
        return _F16.unpack(_F16.pack(x))[0]
    except OverflowError:
        return math.copysign(math.inf, x)


def round_f32(x: float) -> float:
    try:
        return _F32.unpack(_F32.pack(x))[0]
    except OverflowError:
        return math.copysign(math.inf, x)


Matrix = list[list[float]]


# --- race reports -----------------------------------------------------------


@dataclass(frozen=True)
class Race:
    buffer: str
    index: int
    writer: int
    other: int
    phase: int
    block: int
    kind: str  # "WW" or "RW"


@dataclass
class RaceReport:
    races: list[Race] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.races)

    def __bool__(self) -> bool:
        return bool(self.races)

    def __iter__(self):
        return iter(self.races)

    @property
    def empty(self) -> bool:
        return not self.races

    def summary(self) -> str:
        if not self.races:
            return "no races"
        kinds = {k: sum(1 for r in self.races if r.kind == k) for k in ("WW", "RW")}
        bufs = sorted({r.buffer for r in self.races})
        return (f"{len(self.races)} racing cells ({kinds['WW']} write-write, {kinds['RW']} read-write) "
                f"in {', '.join(bufs)}")


LogEntry = tuple[int, int, int, str, str, int]  # phase, block, thread, op, buffer, index


def detect_races(log: Iterable[LogEntry]) -> RaceReport:
    """Flag same-phase conflicting accesses by different threads; one entry per cell and phase."""
    cells: dict[tuple, tuple[list[int], list[int]]] = {}
    for phase, block, tid, op, buf, idx in log:
        writers, readers = cells.setdefault((block, phase, buf, idx), ([], []))
        (writers if op == "W" else readers).append(tid)
    races = []
    for (block, phase, buf, idx), (writers, readers) in cells.items():
        if not writers:
            continue
        w = writers[0]
        other = next((t for t in writers if t != w), None)
        kind = "WW"
        if other is None:
            other = next((t for t in readers if t != w), None)
            kind = "RW"
        if other is not None:
            races.append(Race(buf, idx, w, other, phase, block, kind))
    races.sort(key=lambda r: (r.block, r.phase, r.buffer, r.index))
    return RaceReport(races)


def format_log(log: Iterable[LogEntry]) -> str:
    return "".join(f"{p} {b} {t} {op} {buf} {i}\n" for p, b, t, op, buf, i in log)


# --- compilation of the lowered IR to Python --------------------------------


def _var(buf: Buffer) -> str:
    return "b_" + buf.name


def _tags(buf: Buffer) -> str:
    return "t_" + buf.name


class _PyEmitter:
    def __init__(self, kernel: LoweredKernel):
        self.k = kernel
        self.lines: list[str] = []
        self.storage = {}
        for g in kernel.plan.groups:
            name = g.members[0].name if len(g.members) == 1 else f"shared_pool_{g.index}"
            for m in g.members:
                self.storage[m.name] = name

    def put(self, depth: int, text: str) -> None:
        self.lines.append("    " * depth + text)

    def py(self, e) -> str:
        return emit_py(e, _PY_NAMES)

    def read(self, depth: int, view: View, dr, dc, dest: str) -> None:
        buf = view.buf
        idx = self.py(address(view, dr, dc))
        if buf.mem.kind == "SH":
            self.put(depth, f"_a = {idx}")
            self.put(depth, f"LOG((P[0], blk, tid, 'R', {self.storage[buf.name]!r}, _a))")
            self.put(depth, f"{dest} = {_var(buf)}[_a]")
        elif buf.distributed:
            owner = "tid" if buf.owner == "thread" else "warp_id"
            self.put(depth, f"_a = {idx}")
            self.put(depth, f"_g = {self.py(logical_index(view, dr, dc))}")
            self.put(depth, f"if {_tags(buf)}[_a] != _g: OWN({buf.name!r}, {owner}, _a, {_tags(buf)}[_a], _g)")
            self.put(depth, f"{dest} = {_var(buf)}[_a]")
        else:
            self.put(depth, f"{dest} = {_var(buf)}[{idx}]")

    def write(self, depth: int, view: View, dr, dc, value: str) -> None:
        buf = view.buf
        value = f"f16({value})" if buf.elem is ElemType.F16 else f"f32({value})"
        idx = self.py(address(view, dr, dc))
        if buf.mem.kind == "SH":
            self.put(depth, f"_a = {idx}")
            self.put(depth, f"LOG((P[0], blk, tid, 'W', {self.storage[buf.name]!r}, _a))")
            self.put(depth, f"{_var(buf)}[_a] = {value}")
        elif buf.distributed:
            self.put(depth, f"_a = {idx}")
            self.put(depth, f"{_tags(buf)}[_a] = {self.py(logical_index(view, dr, dc))}")
            self.put(depth, f"{_var(buf)}[_a] = {value}")
        else:
            self.put(depth, f"{_var(buf)}[{idx}] = {value}")

    def block(self, stmts: list[Stmt], depth: int) -> None:
        for s in stmts:
            if isinstance(s, Loop):
                self.put(depth, f"for {s.var} in range({s.extent}):")
                self.block(s.body, depth + 1)
                if not s.body:
                    self.put(depth + 1, "pass")
            elif isinstance(s, Barrier):
                self.put(depth, "yield")
            elif isinstance(s, Exec):
                self.instruction(s, depth)
            elif isinstance(s, Note):
                self.put(depth, f"# {s.text}")

    def instruction(self, ex: Exec, depth: int) -> None:
        exe = ex.binding.executable
        if isinstance(exe, MicroKernel):
            raise UnsimulatableResidual(
                f"micro-kernel {exe.name} bound to {spec_short_form(ex.spec)} has no simulation semantics")
        if exe.sim is SimSemantics.OPAQUE:
            raise UnsimulatableResidual(
                f"{exe.name} bound to {spec_short_form(ex.spec)} is emittable but not simulatable")
        s = ex.spec
        if ex.warp_wide:
            self.put(depth, "if lane_id == 0:")
            depth += 1
        rows, cols = (s.c.shape if isinstance(s, MatMul) else s.dst.shape)
        di = dj = ZERO
        if rows > 1:
            self.put(depth, f"for _i in range({rows}):")
            depth, di = depth + 1, Var("_i")
        if cols > 1:
            self.put(depth, f"for _j in range({cols}):")
            depth, dj = depth + 1, Var("_j")
        v = ex.views
        if isinstance(s, MatMul):
            self.read(depth, v["C"], di, dj, "_c")
            dk = ZERO
            inner = depth
            if s.K > 1:
                self.put(depth, f"for _k in range({s.K}):")
                inner, dk = depth + 1, Var("_k")
            self.read(inner, v["A"], di, dk, "_x")
            self.read(inner, v["B"], dk, dj, "_y")
            self.put(inner, "_c = _c + _x * _y")
            self.write(depth, v["C"], di, dj, "_c")
        elif s.is_fill:
            self.write(depth, v["DST"], di, dj, "0.0")
        else:
            self.read(depth, v["SRC"], di, dj, "_x")
            self.write(depth, v["DST"], di, dj, "_x")

    def source(self) -> str:
        k = self.k
        head = ["def _thread(G, S, WF, P, LOG, OWN, f16, f32, blk, bx, by, tid):",
                "    warp_id = tid // 32",
                "    lane_id = tid % 32",
                "    nan = float('nan')"]
        for b in k.plan.buffers:
            if b.is_param:
                head.append(f"    {_var(b)} = G[{b.name!r}]")
            elif b.mem.kind == "SH":
                head.append(f"    {_var(b)} = S[{self.storage[b.name]!r}]")
            elif b.owner == "warp":
                head.append(f"    {_var(b)} = WF[warp_id][{b.name!r}]")
                head.append(f"    {_tags(b)} = WF[warp_id]['tags:' + {b.name!r}]")
            else:
                head.append(f"    {_var(b)} = [nan] * {b.extent}")
                if b.distributed:
                    head.append(f"    {_tags(b)} = [None] * {b.extent}")
        self.block(k.body, 1)
        return "\n".join(head + self.lines + ["    return", "    yield"]) + "\n"


def compile_kernel(kernel: LoweredKernel):
    """Python source and generator factory for one thread of ``kernel``."""
    src = _PyEmitter(kernel).source()
    ns: dict = {}
    exec(compile(src, f"<kernel {spec_short_form(kernel.root)}>", "exec"), ns)
    return src, ns["_thread"]


# --- running ----------------------------------------------------------------


@dataclass
class RunResult:
    c: Matrix
    races: RaceReport
    log: list[LogEntry] | None
    phases: int


def _check_shape(name: str, m: Sequence[Sequence[float]], rows: int, cols: int) -> None:
    if len(m) != rows or any(len(r) != cols for r in m):
        got = f"{len(m)}x{len(m[0]) if m else 0}"
        raise ShapeMismatch(f"input {name} is {got}, the root spec expects {rows}x{cols}")


def _to_global(buf: Buffer, m: Sequence[Sequence[float]] | None) -> list[float]:
    flat = [0.0] * buf.extent
    if m is None:
        return flat
    rnd = round_f16 if buf.elem is ElemType.F16 else round_f32
    stride = buf.stride
    row_major = buf.layout.major.value == "RowMajor"
    for r in range(buf.rows):
        row = m[r]
        for c in range(buf.cols):
            flat[r * stride + c if row_major else r + c * stride] = rnd(row[c])
    return flat


def _from_global(buf: Buffer, flat: list[float]) -> Matrix:
    stride = buf.stride
    if buf.layout.major.value == "RowMajor":
        return [[flat[r * stride + c] for c in range(buf.cols)] for r in range(buf.rows)]
    return [[flat[r + c * stride] for c in range(buf.cols)] for r in range(buf.rows)]


def _own_violation(buf: str, owner: int, local: int, holds, wants) -> None:
    raise OwnershipViolation(
        f"{buf}: unit {owner} reads slot {local} holding logical element {holds}, expected {wants}")


def execute(kernel: LoweredKernel, a: Sequence[Sequence[float]] | None,
            b: Sequence[Sequence[float]] | None = None, keep_log: bool = False) -> RunResult:
    root = kernel.root
    _, thread = compile_kernel(kernel)
    inputs = {}
    for p in kernel.params:
        if p.role in ("A", "SRC"):
            if a is None:
                raise ShapeMismatch(f"missing input for {p.name}")
            _check_shape(p.name, a, p.rows, p.cols)
            inputs[p.name] = a
        elif p.role == "B":
            if b is None:
                raise ShapeMismatch(f"missing input for {p.name}")
            _check_shape(p.name, b, p.rows, p.cols)
            inputs[p.name] = b
    G = {p.name: _to_global(p, inputs.get(p.name)) for p in kernel.params}
    launch = kernel.launch
    threads, warps = launch.threads, launch.warps
    frag_bufs = [buf for buf in kernel.plan.private() if buf.owner == "warp"]
    log: list[LogEntry] = []
    races = RaceReport()
    phases = 0
    nan = float("nan")
    blk = 0
    for bx in range(launch.grid[0]):
        for by in range(launch.grid[1]):
            S = {}
            for g in kernel.plan.groups:
                name = g.members[0].name if len(g.members) == 1 else f"shared_pool_{g.index}"
                S[name] = [nan] * (max(m.extent for m in g.members) * g.replicas)
            WF = []
            for _ in range(warps):
                frags = {}
                for buf in frag_bufs:
                    frags[buf.name] = [nan] * buf.extent
                    frags["tags:" + buf.name] = [None] * buf.extent
                WF.append(frags)
            P = [0]
            block_log: list[LogEntry] = []
            gens = [thread(G, S, WF, P, block_log.append, _own_violation, round_f16, round_f32, blk,
                           bx, by, t)
                    for t in range(threads)]
            while True:
                finished = 0
                for g in gens:
                    try:
                        next(g)
                    except StopIteration:
                        finished += 1
                if finished == len(gens):
                    break
                if finished:
                    raise BarrierDivergence(
                        f"block {blk}: {finished} of {len(gens)} threads exited while others wait at a barrier")
                P[0] += 1
            phases += P[0]
            races.races.extend(detect_races(block_log).races)
            if keep_log:
                log.extend(block_log)
            blk += 1
    out = next(p for p in kernel.params if p.role in ("C", "DST"))
    return RunResult(_from_global(out, G[out.name]), races, log if keep_log else None, phases)


def run(root: Spec, tree: DecompNode, a: Sequence[Sequence[float]] | None,
        b: Sequence[Sequence[float]] | None = None, *, keep_log: bool = False,
        instrs: tuple[Instruction, ...] = BUILTINS) -> tuple[Matrix, RaceReport]:
    """Simulate ``tree`` on inputs ``a`` (and ``b`` for MatMul roots)."""
    return simulate(root, tree, a, b, keep_log=keep_log, instrs=instrs)[:2]


def simulate(root: Spec, tree: DecompNode, a, b=None, *, keep_log: bool = False,
             instrs: tuple[Instruction, ...] = BUILTINS) -> tuple[Matrix, RaceReport, RunResult]:
    report = validate(root, tree, instrs)
    report.raise_first()
    kernel = lower(root, tree, report.launch, instrs, check_capacity=False)
    result = execute(kernel, a, b, keep_log)
    return result.c, result.races, result


# --- ownership --------------------------------------------------------------


@dataclass(frozen=True)
class OwnershipIssue:
    buffer: str
    owner: int  # thread id for registers, warp id for fragments
    local: int  # slot index within the owner's private storage
    holds: int | None  # logical element last written to the slot (None: never written)
    wants: int  # logical element the read expects


@dataclass
class OwnershipReport:
    violations: list[OwnershipIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def owners(self) -> list[int]:
        return sorted({v.owner for v in self.violations})

    def summary(self) -> str:
        if self.ok:
            return "ownership clean"
        return f"{len(self.violations)} ownership violations across {len(self.owners)} units"


def check_ownership(root: Spec, tree: DecompNode, instrs: tuple[Instruction, ...] = BUILTINS) -> OwnershipReport:
    """Statically enumerate every access to distributed private buffers and
    confirm each unit only reads slots it wrote for the same logical element."""
    report = validate(root, tree, instrs)
    report.raise_first()
    kernel = lower(root, tree, report.launch, instrs, check_capacity=False)
    return ownership_of(kernel)


def ownership_of(kernel: LoweredKernel) -> OwnershipReport:
    launch = kernel.launch
    held: dict[tuple[str, int, int], int] = {}
    issues: dict[tuple[str, int, int], OwnershipIssue] = {}
    for site in sorted(kernel.sites, key=lambda s: s.position):
        buf = site.view.buf
        if not buf.distributed:
            continue
        rows, cols = site.exec.operand_shape(site.role)
        loc_e = address(site.view, Var("_i"), Var("_j"))
        log_e = logical_index(site.view, Var("_i"), Var("_j"))
        used = (free_vars(loc_e) | free_vars(log_e))
        loop_vars = [(v, n) for v, n in site.loops if v in used]
        args = ("threadIdx.x", "warp_id", "lane_id", "blockIdx.x", "blockIdx.y", "_i", "_j") + tuple(
            v for v, _ in loop_vars)
        f_loc = compile_py(loc_e, args)
        f_log = compile_py(log_e, args)
        if buf.owner == "warp":
            units = [(w, w * 32, w, 0) for w in range(launch.warps)]
        else:
            units = [(t, t, t // 32, t % 32) for t in range(launch.threads)]
        ranges = [range(n) for _, n in loop_vars]
        for owner, tid, wid, lid in units:
            for combo in itertools.product(range(rows), range(cols), *ranges):
                vals = (tid, wid, lid, 0, 0) + combo
                local, logical = f_loc(*vals), f_log(*vals)
                key = (buf.name, owner, local)
                if "R" in site.mode and held.get(key) != logical and key not in issues:
                    issues[key] = OwnershipIssue(buf.name, owner, local, held.get(key), logical)
                if "W" in site.mode:
                    held[key] = logical
    return OwnershipReport(sorted(issues.values(), key=lambda i: (i.buffer, i.owner, i.local)))


# --- oracle and inputs ------------------------------------------------------


def naive_matmul(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> Matrix:
    """Reference triple loop."""
    m, k, n = len(a), len(b), len(b[0]) if b else 0
    if any(len(row) != k for row in a):
        raise ShapeMismatch("inner dimensions differ")
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        ai, oi = a[i], out[i]
        for p in range(k):
            x, bp = ai[p], b[p]
            if x:
                for j in range(n):
                    oi[j] += x * bp[j]
    return out


def max_abs_error(x: Matrix, y: Matrix) -> float:
    return max((abs(p - q) for rx, ry in zip(x, y) for p, q in zip(rx, ry)), default=0.0)


def digest(m: Matrix) -> str:
    h = hashlib.sha256()
    for row in m:
        for v in row:
            h.update(struct.pack("<d", float(v)))
    return h.hexdigest()
