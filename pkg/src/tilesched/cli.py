"""Command-line driver: elaborate, codegen, simulate and verify decomposition scripts."""
from __future__ import annotations

import argparse
import random
import sys
from pathlib import Path
from typing import Sequence

from .codegen import generate
from .decomp import elaborate, format_trace
from .errors import ParseError, TileSchedError
from .script import Script, load_script
from .sim import Matrix, check_ownership, digest, format_log, max_abs_error, naive_matmul, round_f16, simulate
from .spec import ElemType, MatMul, Move, Spec

EXIT_PASS, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


# --- matrix text I/O --------------------------------------------------------


def read_matrix(path: str | Path) -> Matrix:
    """Read the ``rows cols`` header followed by row-major values."""
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: missing 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    vals = [float(t) for t in tokens[2:]]
    if len(vals) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(vals)}")
    return [vals[r * cols:(r + 1) * cols] for r in range(rows)]


def format_matrix(m: Matrix) -> str:
    rows, cols = len(m), len(m[0]) if m else 0
    lines = [f"{rows} {cols}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in m]
    return "\n".join(lines) + "\n"


def _rounded(m: Matrix, elem: ElemType) -> Matrix:
    if elem is ElemType.F16:
        return [[round_f16(v) for v in row] for row in m]
    return m


def random_inputs(spec: Spec, seed: int, floats: bool = False) -> tuple[Matrix, Matrix | None]:
    """Seeded inputs: integers in [-4, 4] by default, uniform [-1, 1] with ``floats``."""
    rng = random.Random(seed)

    def draw(rows: int, cols: int) -> Matrix:
        if floats:
            return [[rng.uniform(-1.0, 1.0) for _ in range(cols)] for _ in range(rows)]
        return [[float(rng.randint(-4, 4)) for _ in range(cols)] for _ in range(rows)]

    if isinstance(spec, MatMul):
        return (_rounded(draw(spec.M, spec.K), spec.a.elem),
                _rounded(draw(spec.K, spec.N), spec.b.elem))
    if spec.is_fill:
        return None, None
    return _rounded(draw(spec.rows, spec.cols), spec.src.elem), None


def oracle(spec: Spec, a: Matrix | None, b: Matrix | None) -> Matrix:
    if isinstance(spec, MatMul):
        return naive_matmul(a, b)
    if isinstance(spec, Move) and spec.is_fill:
        return [[0.0] * spec.cols for _ in range(spec.rows)]
    return [list(row) for row in a]


# --- commands ---------------------------------------------------------------


def _load(args) -> Script:
    text = Path(args.script).read_text(encoding="utf-8")
    script = load_script(text)
    if args.m or args.n or args.k:
        script = script.with_dims(args.m, args.n, args.k)
    return script


def _inputs(args, spec: Spec) -> tuple[Matrix | None, Matrix | None]:
    a, b = random_inputs(spec, args.seed, args.float)
    if args.a:
        a = read_matrix(args.a)
    if args.b:
        b = read_matrix(args.b)
    return a, b


def _dump_trace(args, script: Script) -> None:
    if args.dump_trace:
        sys.stdout.write(format_trace(elaborate(script.spec, script.tree), nested=True, labels=True))


def cmd_elaborate(args) -> int:
    script = _load(args)
    trace = elaborate(script.spec, script.tree)
    sys.stdout.write(format_trace(trace, nested=args.nested, labels=args.labels))
    return EXIT_PASS


def cmd_codegen(args) -> int:
    script = _load(args)
    _dump_trace(args, script)
    src = generate(script.spec, script.tree).source
    if args.out:
        Path(args.out).write_text(src)
    else:
        sys.stdout.write(src)
    return EXIT_PASS


def cmd_simulate(args) -> int:
    script = _load(args)
    _dump_trace(args, script)
    a, b = _inputs(args, script.spec)
    c, races, result = simulate(script.spec, script.tree, a, b, keep_log=bool(args.dump_log))
    if args.dump_log:
        Path(args.dump_log).write_text(format_log(result.log))
    if args.out:
        Path(args.out).write_text(format_matrix(c))
    print(f"digest: {digest(c)}")
    print(f"races: {races.summary()}")
    return EXIT_PASS


def cmd_verify(args) -> int:
    script = _load(args)
    _dump_trace(args, script)
    a, b = _inputs(args, script.spec)
    c, races, _ = simulate(script.spec, script.tree, a, b)
    expected = oracle(script.spec, a, b)
    err = max_abs_error(c, expected)
    tol = args.tolerance if args.tolerance is not None else (1e-3 if args.float else 0.0)
    own = check_ownership(script.spec, script.tree)
    ok = err <= tol and races.empty and own.ok
    print("PASS" if ok else "FAIL")
    print(f"max abs error: {err:g} (tolerance {tol:g})")
    print(f"races: {races.summary()}")
    print(f"ownership: {own.summary()}")
    return EXIT_PASS if ok else EXIT_FAIL


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilesched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("script", help="decomposition script (.fi)")
        p.add_argument("--m", type=int, help="override M (or rows of a Move)")
        p.add_argument("--n", type=int, help="override N (or cols of a Move)")
        p.add_argument("--k", type=int, help="override K")

    def running(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--float", action="store_true", help="uniform [-1, 1] inputs instead of integers")
        p.add_argument("--a", metavar="FILE", help="read A (or SRC) from a matrix text file")
        p.add_argument("--b", metavar="FILE", help="read B from a matrix text file")
        p.add_argument("--dump-trace", action="store_true")

    p = sub.add_parser("elaborate", help="print the spec trace")
    common(p)
    p.add_argument("--nested", action="store_true", help="include load/epilog sub-traces")
    p.add_argument("--labels", action="store_true", help="prefix each spec with its decomposition")
    p.set_defaults(func=cmd_elaborate)

    p = sub.add_parser("codegen", help="emit kernel source")
    common(p)
    p.add_argument("--out", metavar="FILE")
    p.add_argument("--dump-trace", action="store_true")
    p.set_defaults(func=cmd_codegen)

    p = sub.add_parser("simulate", help="run the simulator and print a result digest")
    common(p)
    running(p)
    p.add_argument("--out", metavar="FILE", help="write C as a matrix text file")
    p.add_argument("--dump-log", metavar="FILE", help="write the shared-memory access log")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="simulate and compare against the naive oracle")
    common(p)
    running(p)
    p.add_argument("--tolerance", type=float, help="default 0 (integer inputs) or 1e-3 (--float)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        where = args.script if exc.line is None else f"{args.script}:{exc.line}:{exc.col}"
        print(f"{where}: {exc.message}", file=sys.stderr)
    except TileSchedError as exc:
        where = ""
        if "script" in vars(args):
            try:
                line = load_script(Path(args.script).read_text(encoding="utf-8")).line_of(exc)
            except TileSchedError:
                line = None
            if line is not None:
                where = f"{args.script}:{line}: "
        print(f"{where}{exc}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
