"""Tree builders and input generators shared by the test modules."""
from __future__ import annotations

import random
from pathlib import Path

from tilesched import RF, SH, Block, ColMajor, Fluent, Thread, Warp, make_matmul_spec
from tilesched.script import load_script

ROOT = Path(__file__).resolve().parent.parent
LISTINGS = ROOT / "listings"
GOLDEN = Path(__file__).resolve().parent / "golden"


def script(name: str):
    return load_script((LISTINGS / name).read_text())


def compute_tiling(layout=None):
    f = Fluent().tile(64, 32).to(Warp).tile(8, 8).to(Thread)
    if layout is not None:
        f = f.layout(layout)
    return f


def listing2(M=128, N=128, K=32, *, a_no_sync=False, store_layout=None, a_first=False):
    """Listing-2 tree: 128x128 block, RF epilog, split 8 with SH staging, 8x8 thread tiles."""
    one = lambda: Fluent().tile(1, 1).done()  # noqa: E731
    f = Fluent().tile(128, 128).to(Block).epilog(
        RF, compute_tiling().tile(1, 1).done(), compute_tiling(store_layout).tile(1, 1).done())
    f = f.split(8).sync()
    load_a = lambda g: g.load("A", SH, Fluent().tile(4, 1).to(Thread).tile(1, 1).done())  # noqa: E731
    load_b = lambda g: g.load("B", SH, Fluent().tile(1, 4).to(Thread).tile(1, 1).done())  # noqa: E731
    if a_first:
        f = load_a(f)
        if a_no_sync:
            f = f.no_sync()
        f = load_b(f)
    else:
        f = load_a(load_b(f))
        if a_no_sync:
            f = f.no_sync()
    f = f.tile(64, 32).to(Warp).tile(8, 8).to(Thread)
    tree = f.split(1).load("A", RF, one()).load("B", RF, one()).tile(1, 1).done()
    return make_matmul_spec(M, N, K), tree


def padded_a_load():
    """Listing-2 shape with a single A staging load padded by 4 elements per column."""
    one = lambda: Fluent().tile(1, 1).done()  # noqa: E731
    tree = (Fluent().tile(128, 128).to(Block).epilog(
        RF, compute_tiling().tile(1, 1).done(), compute_tiling().tile(1, 1).done())
        .split(8).sync().load("A", SH, Fluent().tile(4, 1).to(Thread).tile(1, 1).done()).pad(4)
        .tile(64, 32).to(Warp).tile(8, 8).to(Thread).split(1)
        .load("A", RF, one()).tile(1, 1).load("B", RF, Fluent().done()).done())
    return make_matmul_spec(128, 128, 32), tree


def transposed_store():
    return listing2(store_layout=ColMajor)


def reuse_tree(*, reuse=True, sync=True):
    """64x64 block whose epilog store hops through SH, optionally reusing A's staging buffer."""
    thr = lambda: Fluent().tile(32, 32).to(Warp).tile(4, 8).to(Thread)  # noqa: E731
    store = Fluent().load("SRC", SH, thr().tile(1, 1).done())
    if reuse:
        store = store.reuse_buffer()
    store = store.tile(16, 2).to(Thread).tile(1, 1).done()
    f = Fluent().tile(64, 64).to(Block).epilog(RF, thr().tile(1, 1).done(), store).split(8)
    if sync:
        f = f.sync()
    tree = (f.load("A", SH, Fluent().tile(1, 4).to(Thread).tile(1, 1).done())
             .load("B", SH, Fluent().tile(4, 1).to(Thread).tile(1, 1).done())
             .tile(32, 32).to(Warp).tile(4, 8).to(Thread).split(1)
             .load("A", RF, Fluent().tile(1, 1).done()).load("B", RF, Fluent().tile(1, 1).done())
             .tile(1, 1).done())
    return make_matmul_spec(64, 64, 16), tree


def int_inputs(spec, seed, lo=-3, hi=3):
    rng = random.Random(seed)
    a = [[float(rng.randint(lo, hi)) for _ in range(spec.K)] for _ in range(spec.M)]
    b = [[float(rng.randint(lo, hi)) for _ in range(spec.N)] for _ in range(spec.K)]
    return a, b


def float_inputs(spec, seed):
    rng = random.Random(seed)
    a = [[rng.uniform(-1.0, 1.0) for _ in range(spec.K)] for _ in range(spec.M)]
    b = [[rng.uniform(-1.0, 1.0) for _ in range(spec.N)] for _ in range(spec.K)]
    return a, b
