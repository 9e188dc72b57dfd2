"""Lowering of a validated decomposition tree into a small loop-nest IR.

Codegen prints this IR as kernel source and the simulator compiles it to
Python, so both back ends agree on loop structure, buffer placement, barrier
positions and every index expression.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

from .decomp import (
    Done, Epilog, LaunchConfig, Load, MmaTile, ResidualBinding, Split, Tile, DecompNode,
    assign_to, done, epilog_specs, load_move_spec, mma_tile, split, tile, tile_counts,
)
from .errors import CapacityError, CodegenError
from .index import Const, IndexExpr, Var, ZERO, simplify, substitute, upper_bound
from .spec import (
    BUILTINS, ComputeLevel, ElemType, Instruction, Layout, Major, MatMul, MemLevel, Move,
    SimSemantics, Spec, WARP_SIZE, spec_short_form,
)

SHARED_CAPACITY = 48 * 1024

BLOCK_X, BLOCK_Y = Var("blockIdx.x"), Var("blockIdx.y")
THREAD_ID, WARP_ID, LANE_ID = Var("threadIdx.x"), Var("warp_id"), Var("lane_id")
UNIT_VARS = ("blockIdx.x", "blockIdx.y", "threadIdx.x", "warp_id", "lane_id")
_UNIT_ZERO = {v: 0 for v in UNIT_VARS}


@dataclass(eq=False)
class Buffer:
    name: str
    mem: MemLevel
    elem: ElemType
    rows: int
    cols: int
    layout: Layout
    level: ComputeLevel  # compute level of the spec that allocated it
    role: str  # operand the buffer stages: A, B, C, or a Move matrix name
    align: int
    is_param: bool = False
    reuse: bool = False
    replicas: int = 1
    footprint: tuple[int, int] | None = None
    alias_group: int | None = None

    @property
    def owner(self) -> str | None:
        """'thread' for registers, 'warp' for fragments, None for shared storage."""
        return {"RF": "thread", "FR": "warp"}.get(self.mem.kind)

    @property
    def distributed(self) -> bool:
        """Private storage allocated above its owner level: a distributed array."""
        if self.is_param:
            return False
        if self.mem.kind == "RF":
            return self.level > ComputeLevel.THREAD
        if self.mem.kind == "FR":
            return self.level > ComputeLevel.WARP
        return False

    @property
    def extent(self) -> int:
        """Elements per owner (private) or per replica (shared/global), incl. padding."""
        if self.owner:
            fr, fc = self.footprint or (self.rows, self.cols)
            return fr * fc
        return self.layout.extent(self.rows, self.cols)

    @property
    def nbytes(self) -> int:
        return self.extent * self.elem.nbytes

    @property
    def stride(self) -> int:
        return self.layout.stride(self.rows, self.cols)

    @property
    def ld(self) -> int:
        """Leading dimension as seen by instructions and micro-kernels.

        Private storage is always column-major over the owner's footprint."""
        if self.owner:
            return (self.footprint or (self.rows, self.cols))[0]
        return self.stride


@dataclass(frozen=True)
class View:
    buf: Buffer
    row: IndexExpr
    col: IndexExpr

    def shifted(self, dr: IndexExpr | int, dc: IndexExpr | int) -> "View":
        return View(self.buf, simplify(self.row + dr), simplify(self.col + dc))


@dataclass
class Loop:
    var: str
    extent: int
    body: list["Stmt"]
    unroll: bool = False


@dataclass
class Barrier:
    reason: str


@dataclass
class Note:
    text: str


@dataclass
class Exec:
    binding: ResidualBinding
    spec: Spec
    views: dict[str, View]
    warp_wide: bool

    def access_modes(self) -> dict[str, str]:
        ex = self.binding.executable
        sim = getattr(ex, "sim", None)
        if isinstance(self.spec, MatMul):
            return {"A": "R", "B": "R", "C": "RW"}
        if sim is SimSemantics.ZERO or self.spec.is_fill:
            return {"DST": "W"}
        return {"SRC": "R", "DST": "W"}

    def operand_shape(self, role: str) -> tuple[int, int]:
        return self.spec.operand(role).shape


Stmt = Union[Loop, Barrier, Note, Exec]


@dataclass
class AliasGroup:
    index: int
    members: list[Buffer]
    replicas: int
    offset: int = 0

    @property
    def nbytes(self) -> int:
        return max(b.nbytes for b in self.members) * self.replicas

    @property
    def align(self) -> int:
        return max(b.align for b in self.members)


@dataclass
class BufferPlan:
    buffers: list[Buffer]
    groups: list[AliasGroup]

    @property
    def shared_bytes(self) -> int:
        if not self.groups:
            return 0
        last = self.groups[-1]
        return last.offset + last.nbytes

    def __getitem__(self, name: str) -> Buffer:
        for b in self.buffers:
            if b.name == name:
                return b
        raise KeyError(name)

    def shared(self) -> list[Buffer]:
        return [b for b in self.buffers if b.mem.kind == "SH" and not b.is_param]

    def private(self) -> list[Buffer]:
        return [b for b in self.buffers if b.owner and not b.is_param]


@dataclass
class Site:
    """One operand access of one executable, with its enclosing loops."""

    exec: Exec
    role: str
    view: View
    mode: str
    loops: tuple[tuple[str, int], ...]
    position: int
    loop_ids: tuple[int, ...]


@dataclass
class LoweredKernel:
    root: Spec
    launch: LaunchConfig
    body: list[Stmt]
    params: list[Buffer]
    plan: BufferPlan
    sites: list[Site] = field(default_factory=list)

    @property
    def executables(self) -> list[Exec]:
        return [s for s in walk_stmts(self.body) if isinstance(s, Exec)]


def walk_stmts(stmts: list[Stmt]) -> Iterator[Stmt]:
    for s in stmts:
        yield s
        if isinstance(s, Loop):
            yield from walk_stmts(s.body)


# --- address arithmetic -----------------------------------------------------


def unit_index(buf: Buffer) -> IndexExpr:
    """Replica selector for shared buffers allocated below block level."""
    if buf.mem.kind != "SH" or buf.replicas == 1:
        return ZERO
    return WARP_ID if buf.level is ComputeLevel.WARP else THREAD_ID


def local_coords(view: View, dr: IndexExpr | int = 0, dc: IndexExpr | int = 0) -> tuple[IndexExpr, IndexExpr]:
    """Owner-relative coordinates of a private access (unit ids dropped)."""
    r = simplify(substitute(view.row + dr, _UNIT_ZERO))
    c = simplify(substitute(view.col + dc, _UNIT_ZERO))
    return r, c


def address(view: View, dr: IndexExpr | int = 0, dc: IndexExpr | int = 0) -> IndexExpr:
    """Storage index of element ``(row+dr, col+dc)`` of ``view``."""
    buf = view.buf
    if buf.owner:
        r, c = local_coords(view, dr, dc)
        fr = (buf.footprint or (buf.rows, buf.cols))[0]
        return simplify(r + c * fr)
    r, c = view.row + dr, view.col + dc
    if buf.layout.major is Major.ROW:
        phys = r * buf.stride + c
    else:
        phys = r + c * buf.stride
    return simplify(phys + unit_index(buf) * buf.extent)


def logical_index(view: View, dr: IndexExpr | int = 0, dc: IndexExpr | int = 0) -> IndexExpr:
    """Column-major index into the whole (logical) matrix a buffer holds."""
    return simplify((view.row + dr) + (view.col + dc) * view.buf.rows)


# --- lowering ---------------------------------------------------------------


class _Lowerer:
    def __init__(self, launch: LaunchConfig, instrs: tuple[Instruction, ...]):
        self.launch = launch
        self.instrs = instrs
        self.buffers: list[Buffer] = []
        self.loop_counter = 0

    def alloc(self, base: str, mem: MemLevel, m, level: ComputeLevel, role: str,
              layout: Layout, align: int | None = None, reuse: bool = False) -> Buffer:
        n = sum(1 for b in self.buffers if not b.is_param) + 1
        replicas = 1
        if mem.kind == "SH" and level is ComputeLevel.WARP:
            replicas = self.launch.warps
        elif mem.kind == "SH" and level is ComputeLevel.THREAD:
            replicas = self.launch.threads
        buf = Buffer(f"{base}_{mem.kind}_{n}", mem, m.elem, m.rows, m.cols, layout, level, role,
                     align or m.elem.nbytes, reuse=reuse, replicas=replicas)
        self.buffers.append(buf)
        return buf

    def fresh(self, prefix: str) -> str:
        self.loop_counter += 1
        return f"{prefix}{self.loop_counter}"

    def unit_coords(self, src: ComputeLevel, dst: ComputeLevel, nr: int, nc: int,
                    major: Major, swizzle: IndexExpr | None) -> tuple[IndexExpr, IndexExpr]:
        if dst is ComputeLevel.BLOCK and swizzle is None:
            x, y = (BLOCK_X, BLOCK_Y) if major is Major.ROW else (BLOCK_Y, BLOCK_X)
            return (x if nr > 1 else ZERO), (y if nc > 1 else ZERO)
        if dst is ComputeLevel.BLOCK:
            u: IndexExpr = BLOCK_X
        elif dst is ComputeLevel.WARP:
            u = WARP_ID
        elif src is ComputeLevel.WARP:
            u = LANE_ID
        else:
            u = THREAD_ID
        if swizzle is not None:
            u = substitute(swizzle, {"id": u})
        if major is Major.ROW:
            return simplify(u % nr), simplify(u // nr)
        return simplify(u // nc), simplify(u % nc)

    @staticmethod
    def tile_views(s: Spec, views: dict[str, View], dr: IndexExpr, dc: IndexExpr) -> dict[str, View]:
        out = dict(views)
        if isinstance(s, MatMul):
            out["A"] = views["A"].shifted(dr, 0)
            out["B"] = views["B"].shifted(0, dc)
            out["C"] = views["C"].shifted(dr, dc)
        else:
            for role in views:
                out[role] = views[role].shifted(dr, dc)
        return out

    def node(self, node: DecompNode, s: Spec, views: dict[str, View]) -> list[Stmt]:
        if isinstance(node, Done):
            binding = done(s, node.micro_kernel, self.instrs)
            warp_wide = s.level is ComputeLevel.WARP and not binding.is_micro_kernel
            return [Exec(binding, s, views, warp_wide)]

        if isinstance(node, Tile):
            t = tile(s, node.r, node.c)
            nr, nc = tile_counts(s, node.r, node.c)
            ref = node.ref
            if ref.to is not None:
                rt, ct = self.unit_coords(s.level, ref.to, nr, nc, ref.layout or Major.ROW, ref.swizzle)
                t = assign_to(t, ref.to)
                sub = self.tile_views(s, views, simplify(rt * node.r), simplify(ct * node.c))
                return self.node(node.child, t, sub)
            rv = Var(self.fresh("i")) if nr > 1 else None
            cv = Var(self.fresh("j")) if nc > 1 else None
            dr = simplify((rv or ZERO) * node.r)
            dc = simplify((cv or ZERO) * node.c)
            body = self.node(node.child, t, self.tile_views(s, views, dr, dc))
            if cv is not None:
                body = [Loop(cv.name, nc, body, ref.unroll)]
            if rv is not None:
                body = [Loop(rv.name, nr, body, ref.unroll)]
            return body

        if isinstance(node, Split):
            t = split(s, node.k)
            nk = s.K // node.k
            kv = Var(self.fresh("k")) if nk > 1 else None
            off = simplify((kv or ZERO) * node.k)
            sub = dict(views)
            sub["A"] = views["A"].shifted(0, off)
            sub["B"] = views["B"].shifted(off, 0)
            body = self.node(node.child, t, sub)
            if node.ref.sync:
                body = body + [Barrier("split")]
            if kv is not None:
                body = [Loop(kv.name, nk, body, node.ref.unroll)]
            return body

        if isinstance(node, Load):
            new, induced = load_move_spec(s, node.operand, node.target, node.ref)
            src_m = s.operand(node.operand)
            buf = self.alloc(src_m.name, node.target, src_m, s.level, node.operand,
                             induced.dst.layout, node.ref.align, node.ref.reuse_buffer)
            dst_view = View(buf, ZERO, ZERO)
            out: list[Stmt] = [Note(f"load {node.operand}: {spec_short_form(induced)}")]
            out += self.node(node.move, induced, {"SRC": views[node.operand], "DST": dst_view})
            if node.target.kind == "SH" and not node.ref.no_sync:
                out.append(Barrier("load"))
            sub = dict(views)
            sub[node.operand] = dst_view
            return out + self.node(node.child, new, sub)

        if isinstance(node, Epilog):
            new, init_spec, store_spec = epilog_specs(s, node.acc)
            acc = self.alloc(s.c.name, node.acc, s.c, s.level, "C", new.c.layout)
            acc_view = View(acc, ZERO, ZERO)
            out = [Note(f"epilog init: {spec_short_form(init_spec)}")]
            out += self.node(node.init, init_spec, {"DST": acc_view})
            out += self.node(node.child, new, {**views, "C": acc_view})
            out.append(Note(f"epilog store: {spec_short_form(store_spec)}"))
            out += self.node(node.store, store_spec, {"SRC": acc_view, "DST": views["C"]})
            return out

        if isinstance(node, MmaTile):
            t = mma_tile(s)
            mk = node.child.micro_kernel if isinstance(node.child, Done) else None
            return [Exec(done(t, mk, self.instrs), t, views, True)]

        raise CodegenError(f"cannot lower {node!r}")  # pragma: no cover


def _collect_sites(body: list[Stmt]) -> tuple[list[Site], list[int], dict[int, tuple[int, int]]]:
    sites: list[Site] = []
    barriers: list[int] = []
    spans: dict[int, tuple[int, int]] = {}
    pos = 0

    def go(stmts, loops, loop_ids):
        nonlocal pos
        for s in stmts:
            pos += 1
            if isinstance(s, Loop):
                lid = pos
                go(s.body, loops + ((s.var, s.extent),), loop_ids + (lid,))
                spans[lid] = (lid, pos)
            elif isinstance(s, Barrier):
                barriers.append(pos)
            elif isinstance(s, Exec):
                for role, mode in s.access_modes().items():
                    if role in s.views:
                        sites.append(Site(s, role, s.views[role], mode, loops, pos, loop_ids))

    go(body, (), ())
    return sites, barriers, spans


def _plan_footprints(buffers: list[Buffer], sites: list[Site]) -> None:
    for buf in buffers:
        if not buf.owner:
            continue
        fr = fc = 1
        for site in sites:
            if site.view.buf is not buf:
                continue
            ranges = {v: n - 1 for v, n in site.loops}
            r, c = local_coords(site.view)
            rows, cols = site.exec.operand_shape(site.role)
            fr = max(fr, upper_bound(r, ranges) + rows)
            fc = max(fc, upper_bound(c, ranges) + cols)
        if buf.mem.kind == "FR":
            m, n, _ = buf.mem.frag
            fr, fc = -(-fr // m) * m, -(-fc // n) * n
        buf.footprint = (min(fr, buf.rows) if buf.mem.kind == "RF" else fr,
                         min(fc, buf.cols) if buf.mem.kind == "RF" else fc)


def _dead_before(x: Buffer, y: Buffer, sites: list[Site], barriers: list[int],
                 spans: dict[int, tuple[int, int]]) -> bool:
    xs = [s for s in sites if s.view.buf is x]
    ys = [s for s in sites if s.view.buf is y]
    if not xs or not ys:
        return True
    last_x = max(s.position for s in xs)
    first_y = min(s.position for s in ys)
    last_y = max(s.position for s in ys)
    first_x = min(s.position for s in xs)
    if last_x >= first_y or not any(last_x < b < first_y for b in barriers):
        return False
    common = set().union(*(s.loop_ids for s in xs)) & set().union(*(s.loop_ids for s in ys))
    for lid in common:
        lo, hi = spans[lid]
        # the next iteration's x accesses must wait for this iteration's y accesses
        if not any(lo < b <= hi and (b > last_y or b < first_x) for b in barriers):
            return False
    return True


def _plan_shared(buffers: list[Buffer], sites, barriers, spans, check_capacity: bool) -> list[AliasGroup]:
    groups: list[AliasGroup] = []
    for buf in buffers:
        if buf.mem.kind != "SH" or buf.is_param:
            continue
        if buf.reuse:
            for g in groups:
                if g.replicas == buf.replicas and all(
                        _dead_before(m, buf, sites, barriers, spans) for m in g.members):
                    g.members.append(buf)
                    break
            else:
                raise CodegenError(
                    f"reuseBuffer on {buf.name}: no earlier shared buffer is dead and "
                    "separated from it by a barrier")
        else:
            groups.append(AliasGroup(len(groups), [buf], buf.replicas))
    offset = 0
    for g in groups:
        offset = -(-offset // g.align) * g.align
        g.offset = offset
        offset += g.nbytes
        for m in g.members:
            m.alias_group = g.index
    if check_capacity and offset > SHARED_CAPACITY:
        raise CapacityError(
            f"shared-memory plan needs {offset} bytes per block, over the {SHARED_CAPACITY}-byte budget")
    return groups


def lower(root: Spec, tree: DecompNode, launch: LaunchConfig,
          instrs: tuple[Instruction, ...] = BUILTINS, check_capacity: bool = True) -> LoweredKernel:
    """Lower a validated tree; ``check_capacity`` enforces the shared-memory budget."""
    lw = _Lowerer(launch, instrs)
    if isinstance(root, MatMul):
        mats = {"A": root.a, "B": root.b, "C": root.c}
    else:
        mats = {"DST": root.dst} if root.src is None else {"SRC": root.src, "DST": root.dst}
    params = []
    views = {}
    for role, m in mats.items():
        buf = Buffer(m.name, m.mem, m.elem, m.rows, m.cols, m.layout, ComputeLevel.KERNEL,
                     role, m.elem.nbytes, is_param=True)
        params.append(buf)
        views[role] = View(buf, ZERO, ZERO)
    lw.buffers.extend(params)
    body = lw.node(tree, root, views)
    sites, barriers, spans = _collect_sites(body)
    _plan_footprints(lw.buffers, sites)
    groups = _plan_shared(lw.buffers, sites, barriers, spans, check_capacity)
    return LoweredKernel(root, launch, body, params, BufferPlan(lw.buffers, groups), sites)


def lower_tree(root: Spec, tree: DecompNode, instrs: tuple[Instruction, ...] = BUILTINS) -> LoweredKernel:
    """Validate, then lower."""
    from .decomp import validate

    report = validate(root, tree, instrs)
    report.raise_first()
    return lower(root, tree, report.launch, instrs)
