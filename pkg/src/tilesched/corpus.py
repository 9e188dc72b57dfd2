"""Seeded generator of random valid Listing-2-shaped decomposition trees.

Every tree tiles a MatMul over Block, Warp and Thread, accumulates into
registers through an epilog placed above the K loop, optionally stages A and B
through shared memory, and ends in the scalar FMA residual. Shapes come from
divisor lattices with M, N, K <= 256. Shared-memory stages always sit under a
``split .sync`` so the trees are race-free by construction.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .decomp import DecompNode, Fluent
from .spec import ComputeLevel, Major, MatMul, RF, SH, Layout, make_matmul_spec

MAX_DIM = 256
VOLUME_CAP = 1 << 19
THREAD_GRIDS = [(1, 32), (2, 16), (4, 8), (8, 4), (16, 2), (32, 1)]


@dataclass(frozen=True)
class CorpusCase:
    seed: int
    spec: MatMul
    tree: DecompNode
    label: str


@dataclass(frozen=True)
class _Assign:
    """A tile-and-assign step: tile size, level, and its refinements."""

    r: int
    c: int
    level: ComputeLevel
    layout: Major | None = None
    swizzle: str | None = None

    def apply(self, f: Fluent) -> Fluent:
        f = f.tile(self.r, self.c).to(self.level)
        if self.layout is not None:
            f = f.layout(self.layout)
        if self.swizzle is not None:
            f = f.swizzle(self.swizzle)
        return f


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _swizzle(rng: random.Random, units: int) -> str | None:
    if units < 2 or rng.random() < 0.6:
        return None
    s = rng.randrange(1, units)
    if units % 2 == 0 and rng.random() < 0.5:
        return f"(id * {rng.choice([3, 5, 7]) if units > 8 else 3} + {s}) % {units}"
    return f"(id + {s}) % {units}"


def _layout(rng: random.Random) -> Major | None:
    return rng.choice([None, Major.ROW, Major.COL])


def _counts(rows: int, cols: int, units: int, rng: random.Random) -> tuple[int, int] | None:
    """A random (row count, col count) with product ``units`` dividing the shape."""
    opts = [(a, units // a) for a in _divisors(units) if rows % a == 0 and cols % (units // a) == 0]
    return rng.choice(opts) if opts else None


def _move_tree(rows: int, cols: int, level: ComputeLevel, warps: int, rng: random.Random) -> DecompNode | None:
    """Distribute a Move of ``rows x cols`` over all threads below ``level``."""
    f = Fluent()
    if level is ComputeLevel.BLOCK and warps > 1 and rng.random() < 0.4:
        wc = _counts(rows, cols, warps, rng)
        if wc is not None:
            wr, wcc = rows // wc[0], cols // wc[1]
            tc = _counts(wr, wcc, 32, rng)
            if tc is not None:
                f = _Assign(wr, wcc, ComputeLevel.WARP, _layout(rng)).apply(f)
                f = _Assign(wr // tc[0], wcc // tc[1], ComputeLevel.THREAD, _layout(rng),
                            _swizzle(rng, 32)).apply(f)
                return f.tile(1, 1).done()
    units = 32 * warps if level is ComputeLevel.BLOCK else 32
    tc = _counts(rows, cols, units, rng)
    if tc is None:
        return None
    f = _Assign(rows // tc[0], cols // tc[1], ComputeLevel.THREAD, _layout(rng), _swizzle(rng, units)).apply(f)
    f = f.tile(1, 1)
    if rng.random() < 0.3:
        f = f.unroll()
    return f.done()


def _sh_load(f: Fluent, op: str, rows: int, cols: int, level: ComputeLevel, warps: int,
              rng: random.Random) -> Fluent:
    sub = _move_tree(rows, cols, level, warps, rng)
    if sub is None:
        return f
    f = f.load(op, SH, sub)
    if rng.random() < 0.4:
        f = f.storage_layout(rng.choice([Major.ROW, Major.COL]))
    if rng.random() < 0.4:
        f = f.pad(rng.choice([1, 2, 4]))
    if rng.random() < 0.2:
        f = f.align(rng.choice([16, 32, 128]))
    return f


def _accumulate(chain: list[_Assign]) -> DecompNode:
    """Epilog init/store tree that mirrors the compute assignment below it."""
    f = Fluent()
    for a in chain:
        f = a.apply(f)
    return f.tile(1, 1).done()


def random_case(seed: int) -> CorpusCase:
    rng = random.Random(seed)
    while True:
        tm, tn = rng.choice([1, 2, 4]), rng.choice([1, 2, 4])
        pr, pc = rng.choice(THREAD_GRIDS)
        wm, wn = pr * tm, pc * tn
        qr, qc = rng.choice([(1, 1), (1, 2), (2, 1), (2, 2), (1, 4), (4, 1)])
        bm, bn = qr * wm, qc * wn
        gr, gc = rng.choice([1, 2, 4, 8]), rng.choice([1, 2, 4, 8])
        M, N = gr * bm, gc * bn
        ks = rng.choice([1, 2, 4, 8, 16])
        K = ks * rng.choice([1, 2, 4, 8])
        if M <= MAX_DIM and N <= MAX_DIM and K <= MAX_DIM and M * N * K <= VOLUME_CAP:
            break
    warps = qr * qc
    block = _Assign(bm, bn, ComputeLevel.BLOCK, _layout(rng), _swizzle(rng, gr * gc))
    warp = _Assign(wm, wn, ComputeLevel.WARP, _layout(rng), _swizzle(rng, warps))
    thread = _Assign(tm, tn, ComputeLevel.THREAD, _layout(rng), _swizzle(rng, 32))
    where = rng.choice([ComputeLevel.BLOCK, ComputeLevel.BLOCK, ComputeLevel.WARP, ComputeLevel.THREAD])

    f = block.apply(Fluent())
    below = {ComputeLevel.BLOCK: [warp, thread], ComputeLevel.WARP: [thread], ComputeLevel.THREAD: []}[where]
    if where is ComputeLevel.BLOCK:
        f = _epilog_and_split(f, rng, below, tm, tn, ks, bm, bn, ComputeLevel.BLOCK, warps)
        f = thread.apply(warp.apply(f))
    elif where is ComputeLevel.WARP:
        f = warp.apply(f)
        f = _epilog_and_split(f, rng, below, tm, tn, ks, wm, wn, ComputeLevel.WARP, warps)
        f = thread.apply(f)
    else:
        f = thread.apply(warp.apply(f))
        f = _epilog_and_split(f, rng, below, tm, tn, ks, tm, tn, ComputeLevel.THREAD, warps)

    one = lambda: Fluent().tile(1, 1).done()  # noqa: E731
    if rng.random() < 0.5:
        f = f.split(1)
        if rng.random() < 0.3:
            f = f.unroll()
        f = f.load("A", RF, one()).load("B", RF, one())
    else:
        f = f.load("A", RF, one()).load("B", RF, one()).split(1)
    f = f.tile(1, 1)
    if rng.random() < 0.3:
        f = f.unroll()
    tree = f.done()
    root = make_matmul_spec(M, N, K, layouts=tuple(Layout(rng.choice([Major.COL, Major.ROW])) for _ in range(3)))
    label = f"seed={seed} {M}x{N}x{K} block={bm}x{bn} warp={wm}x{wn} thread={tm}x{tn} epilog@{where}"
    return CorpusCase(seed, root, tree, label)


def _epilog_and_split(f: Fluent, rng: random.Random, below: list[_Assign], tm: int, tn: int, ks: int,
                      rows: int, cols: int, level: ComputeLevel, warps: int) -> Fluent:
    f = f.epilog(RF, _accumulate(below), _accumulate(below))
    f = f.split(ks).sync()
    if level is ComputeLevel.THREAD:
        return f
    ops = [op for op in ("A", "B") if rng.random() < 0.75]
    rng.shuffle(ops)
    for op in ops:
        shape = (rows, ks) if op == "A" else (ks, cols)
        f = _sh_load(f, op, *shape, level, warps, rng)
    return f


def corpus(count: int = 50, base_seed: int = 0) -> list[CorpusCase]:
    return [random_case(base_seed + i) for i in range(count)]
