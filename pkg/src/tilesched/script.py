"""The ``.fi`` decomposition-script format: tokenizer, parser and canonical printer.

A script is a spec header, one decomposition chain ending in ``done`` and
optional micro-kernel blocks::

    spec matmul 128 128 32
    tile 128 128 .to Block
    load A SH {
      tile 4 1 .to Thread
      tile 1 1
      done
    } .pad 4
    ...
    done dot

    microkernel dot matmul 1 1 32 mem RF RF GL level Thread vars K A B C
    ```
    ... verbatim source with ${K}-style placeholders ...
    ```
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .decomp import (
    DecompNode, Done, Epilog, Fluent, Load, MmaTile, Split, Tile, main_chain,
)
from .errors import ParseError, TileSchedError
from .index import emit_c, parse_index
from .spec import (
    ComputeLevel, ElemType, Layout, Major, MatMul, MatrixRef, MemLevel, MicroKernel, Move, Spec,
    make_matmul_spec, check_micro_kernels,
)

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+) | (?P<nl>\n) | (?P<comment>\#[^\n]*)
  | (?P<fence>```)
  | (?P<ref>\.[A-Za-z]\w*)
  | (?P<word>[A-Za-z_]\w*(?:\(\s*\d+\s*,\s*\d+\s*,\s*\d+\s*\))?)
  | (?P<int>\d+)
  | (?P<punct>[{}:])
  | (?P<paren>\()
""", re.VERBOSE)

KEYWORDS = {"tile", "to", "split", "load", "epilog", "mmaTile", "done", "microkernel", "spec"}


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    out: list[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        col = pos - line_start + 1
        m = _TOKEN.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        if kind == "nl":
            line, line_start = line + 1, m.end()
        elif kind == "fence":
            end = text.find("```", m.end())
            if end < 0:
                raise ParseError("unterminated ``` block", line, col)
            body = text[m.end():end]
            if body.startswith("\n"):
                body = body[1:]
            if body.endswith("\n"):
                body = body[:-1]
            out.append(Token("fence", body, line, col))
            consumed = text[pos:end + 3]
            line += consumed.count("\n")
            if "\n" in consumed:
                line_start = pos + consumed.rfind("\n") + 1
            pos = end + 3
            continue
        elif kind == "paren":
            depth, i = 0, pos
            while i < len(text):
                if text[i] == "(":
                    depth += 1
                elif text[i] == ")":
                    depth -= 1
                    if depth == 0:
                        break
                elif text[i] == "\n":
                    raise ParseError("unbalanced parenthesis", line, col)
                i += 1
            if depth:
                raise ParseError("unbalanced parenthesis", line, col)
            out.append(Token("paren", text[pos + 1:i], line, col))
            pos = i + 1
            continue
        elif kind not in ("ws", "comment"):
            out.append(Token(kind, m.group(), line, col))
        pos = m.end()
    return out


@dataclass
class Script:
    spec: Spec
    tree: DecompNode
    micro_kernels: tuple[MicroKernel, ...] = ()
    step_lines: list[int] = field(default_factory=list)

    def line_of(self, exc: TileSchedError) -> int | None:
        if exc.step is None or not self.step_lines:
            return None
        return self.step_lines[min(exc.step, len(self.step_lines) - 1)]

    def with_dims(self, m: int | None = None, n: int | None = None, k: int | None = None) -> "Script":
        return Script(resize(self.spec, m, n, k), self.tree, self.micro_kernels, self.step_lines)


def resize(s: Spec, m: int | None = None, n: int | None = None, k: int | None = None) -> Spec:
    """Same spec with new static dimensions (Move roots take m x n)."""
    if isinstance(s, MatMul):
        M, N, K = m or s.M, n or s.N, k or s.K
        return make_matmul_spec(M, N, K, (s.a.elem, s.b.elem, s.c.elem),
                                (s.a.mem, s.b.mem, s.c.mem), (s.a.layout, s.b.layout, s.c.layout), s.level)
    R, C = m or s.rows, n or s.cols
    src = None if s.src is None else s.src.with_shape(R, C)
    return Move(src, s.dst.with_shape(R, C), s.level)


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    def peek(self) -> Token | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def error(self, msg: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.peek()
        if tok is None:
            last = self.toks[-1] if self.toks else None
            return ParseError(msg + " (at end of input)", last.line if last else 1, last.col if last else 1)
        return ParseError(msg, tok.line, tok.col)

    def next(self, what: str = "token") -> Token:
        tok = self.peek()
        if tok is None:
            raise self.error(f"expected {what}")
        self.i += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.next(repr(text))
        if tok.text != text:
            raise self.error(f"expected {text!r}, found {tok.text!r}", tok)
        return tok

    def integer(self, what: str = "integer") -> int:
        tok = self.next(what)
        if tok.kind != "int":
            raise self.error(f"expected {what}, found {tok.text!r}", tok)
        return int(tok.text)

    def word(self, what: str = "name") -> Token:
        tok = self.next(what)
        if tok.kind != "word":
            raise self.error(f"expected {what}, found {tok.text!r}", tok)
        return tok

    def convert(self, fn, tok: Token):
        try:
            return fn(tok.text)
        except TileSchedError as exc:
            raise self.error(exc.message, tok) from None

    # header ------------------------------------------------------------------

    def spec_body(self) -> Spec:
        kind = self.word("'matmul' or 'move'")
        if kind.text == "matmul":
            dims = [self.integer("dimension") for _ in range(3)]
            arity = 3
        elif kind.text == "move":
            dims = [self.integer("dimension") for _ in range(2)]
            arity = 2
        else:
            raise self.error(f"unknown spec kind {kind.text!r}", kind)
        elems = [ElemType.F32] * arity
        mems: list[MemLevel | None] = [MemLevel("GL")] * arity
        majors = [Major.COL] * arity
        level = ComputeLevel.KERNEL
        while (tok := self.peek()) and tok.kind == "word" and tok.text in ("elem", "mem", "layout", "level"):
            self.i += 1
            if tok.text == "level":
                level = self.convert(ComputeLevel.parse, self.word("level"))
                continue
            vals = [self.word(tok.text) for _ in range(arity)] if tok.text != "mem" else [
                self.next("memory level") for _ in range(arity)]
            if tok.text == "elem":
                elems = [self.convert(_parse_elem, v) for v in vals]
            elif tok.text == "layout":
                majors = [self.convert(Major.parse, v) for v in vals]
            else:
                mems = [None if (v.text == "0" and kind.text == "move" and j == 0)
                        else self.convert(MemLevel.parse, v) for j, v in enumerate(vals)]
        try:
            if kind.text == "matmul":
                return make_matmul_spec(*dims, tuple(elems), tuple(mems),
                                        tuple(Layout(mj) for mj in majors), level)
            dst = MatrixRef("DST", dims[0], dims[1], elems[1], mems[1], Layout(majors[1]))
            src = None if mems[0] is None else MatrixRef("SRC", dims[0], dims[1], elems[0], mems[0],
                                                         Layout(majors[0]))
            return Move(src, dst, level)
        except TileSchedError as exc:
            raise self.error(exc.message, kind) from None

    # chains ------------------------------------------------------------------

    def chain(self, depth: int) -> list:
        steps = []
        while True:
            tok = self.next("decomposition step")
            if tok.kind != "word" or tok.text not in KEYWORDS - {"microkernel", "spec"}:
                raise self.error(f"expected a decomposition step, found {tok.text!r}", tok)
            if tok.text == "done":
                nxt = self.peek()
                mk = None
                if nxt is not None and nxt.kind == "word" and nxt.text not in KEYWORDS:
                    mk = self.next()
                steps.append(("done", tok, mk))
                return steps
            if tok.text == "tile":
                steps.append(("tile", tok, self.integer("tile rows"), self.integer("tile cols"), self.refs()))
            elif tok.text == "to":
                # bare `to Level` line: same as a `.to Level` suffix on the preceding tile
                if not steps or steps[-1][0] != "tile":
                    raise self.error("'to' must follow a tile step", tok)
                level = self.convert(ComputeLevel.parse, self.word("compute level"))
                steps[-1][4].append((Token("ref", ".to", tok.line, tok.col), level))
                steps[-1][4].extend(self.refs())
            elif tok.text == "split":
                steps.append(("split", tok, self.integer("split size"), self.refs()))
            elif tok.text == "mmaTile":
                steps.append(("mmaTile", tok))
            elif tok.text == "load":
                op = self.word("operand")
                if op.text.upper() not in ("A", "B", "SRC"):
                    raise self.error(f"cannot load operand {op.text!r}", op)
                target = self.convert(MemLevel.parse, self.word("memory level"))
                self.expect("{")
                sub = self.chain(depth + 1)
                self.expect("}")
                steps.append(("load", tok, op.text.upper(), target, sub, self.refs()))
            elif tok.text == "epilog":
                acc = self.convert(MemLevel.parse, self.word("memory level"))
                parts = {}
                for name in ("init", "store"):
                    self.expect("{")
                    self.expect(name)
                    self.expect(":")
                    parts[name] = self.chain(depth + 1)
                    self.expect("}")
                steps.append(("epilog", tok, acc, parts["init"], parts["store"]))

    def refs(self) -> list[tuple[Token, object]]:
        out = []
        while (tok := self.peek()) and tok.kind == "ref":
            self.i += 1
            name = tok.text[1:]
            if name == "to":
                arg = self.convert(ComputeLevel.parse, self.word("compute level"))
            elif name in ("layout", "storageLayout"):
                arg = self.convert(Major.parse, self.word("layout"))
            elif name in ("pad", "align"):
                arg = self.integer(name)
            elif name == "swizzle":
                p = self.next("swizzle expression")
                if p.kind != "paren":
                    raise self.error("expected (expression) after .swizzle", p)
                arg = self.convert(parse_index, p)
            elif name in ("unroll", "sync", "noSync", "reuseBuffer"):
                arg = None
            else:
                raise self.error(f"unknown refinement .{name}", tok)
            out.append((tok, arg))
        return out

    def micro_kernel(self) -> tuple[MicroKernel, Token]:
        name = self.word("micro-kernel name")
        pattern = self.spec_body()
        declared: list[str] = []
        if (tok := self.peek()) and tok.text == "vars":
            self.i += 1
            while (tok := self.peek()) and tok.kind == "word":
                declared.append(self.next().text)
        body = self.next("``` block")
        if body.kind != "fence":
            raise self.error("expected a ``` fenced micro-kernel body", body)
        try:
            return MicroKernel(name.text, pattern, body.text, tuple(declared)), name
        except TileSchedError as exc:
            raise self.error(exc.message, name) from None


def _parse_elem(text: str) -> ElemType:
    t = text.upper()
    if t in ("FP32", "FLOAT"):
        t = "F32"
    if t in ("FP16", "HALF"):
        t = "F16"
    try:
        return ElemType[t]
    except KeyError:
        raise ParseError(f"unknown element type {text!r}") from None


_REFINE = {
    "to": "to", "unroll": "unroll", "layout": "layout", "swizzle": "swizzle", "sync": "sync",
    "noSync": "no_sync", "storageLayout": "storage_layout", "pad": "pad", "align": "align",
    "reuseBuffer": "reuse_buffer",
}


def _build(steps: list, mks: dict[str, MicroKernel], p: _Parser, lines: list[int] | None) -> DecompNode:
    f = Fluent()
    for step in steps:
        kind, tok = step[0], step[1]
        cur = tok
        try:
            if kind == "tile":
                f.tile(step[2], step[3])
                if lines is not None:
                    lines.append(tok.line)
                refs = step[4]
            elif kind == "split":
                f.split(step[2])
                refs = step[3]
            elif kind == "load":
                f.load(step[2], step[3], _build(step[4], mks, p, None))
                refs = step[5]
            elif kind == "epilog":
                f.epilog(step[2], _build(step[3], mks, p, None), _build(step[4], mks, p, None))
                refs = []
            elif kind == "mmaTile":
                f.mma_tile()
                refs = []
            else:
                mk = None
                if step[2] is not None:
                    if step[2].text not in mks:
                        raise p.error(f"unknown micro-kernel {step[2].text!r}", step[2])
                    mk = mks[step[2].text]
                if lines is not None:
                    lines.append(tok.line)
                return f.done(mk)
            if lines is not None and kind != "tile":
                lines.append(tok.line)
            for rtok, arg in refs:
                cur = rtok
                method = getattr(f, _REFINE[rtok.text[1:]])
                method() if arg is None else method(arg)
                if lines is not None and rtok.text == ".to":
                    lines.append(rtok.line)
        except ParseError:
            raise
        except TileSchedError as exc:
            raise ParseError(f"{exc.kind}: {exc.message}", cur.line, cur.col) from None
    raise p.error("decomposition chain must end in done")  # pragma: no cover


def load_script(text: str) -> Script:
    p = _Parser(text)
    p.expect("spec")
    root = p.spec_body()
    steps = p.chain(0)
    mks: dict[str, MicroKernel] = {}
    order = []
    while (tok := p.peek()) is not None:
        if tok.text != "microkernel":
            raise p.error(f"unexpected {tok.text!r} after the final done", tok)
        p.i += 1
        mk, name_tok = p.micro_kernel()
        if mk.name in mks:
            raise p.error(f"micro-kernel {mk.name!r} defined twice", name_tok)
        mks[mk.name] = mk
        order.append(mk)
    try:
        check_micro_kernels(order)
    except TileSchedError as exc:
        raise ParseError(f"{exc.kind}: {exc.message}") from None
    lines: list[int] = []
    tree = _build(steps, mks, p, lines)
    return Script(root, tree, tuple(order), lines)


def parse_script(text: str) -> tuple[Spec, DecompNode]:
    s = load_script(text)
    return s.spec, s.tree


# --- printing ---------------------------------------------------------------


def _spec_header(s: Spec) -> str:
    if isinstance(s, MatMul):
        mats = (s.a, s.b, s.c)
        head = f"matmul {s.M} {s.N} {s.K}"
        mems = [m.mem.describe() for m in mats]
    else:
        mats = (s.src or s.dst, s.dst)
        head = f"move {s.rows} {s.cols}"
        mems = ["0" if s.src is None else s.src.mem.describe(), s.dst.mem.describe()]
    if any(m.layout.pad for m in mats):
        raise ParseError("padded root layouts have no script syntax")
    parts = [head]
    if any(m.elem is not ElemType.F32 for m in mats):
        parts.append("elem " + " ".join(m.elem.name for m in mats))
    if any(x != "GL" for x in mems):
        parts.append("mem " + " ".join(mems))
    if any(m.layout.major is not Major.COL for m in mats):
        parts.append("layout " + " ".join(str(m.layout.major) for m in mats))
    if s.level is not ComputeLevel.KERNEL:
        parts.append(f"level {s.level}")
    return " ".join(parts)


def _print_chain(node: DecompNode, depth: int, out: list[str]) -> None:
    pad = "  " * depth
    for n in main_chain(node):
        if isinstance(n, Tile):
            r = n.ref
            refs = "".join([f" .to {r.to}" if r.to is not None else "",
                            f" .layout {r.layout}" if r.layout is not None else "",
                            f" .swizzle({emit_c(r.swizzle)})" if r.swizzle is not None else "",
                            " .unroll" if r.unroll else ""])
            out.append(f"{pad}tile {n.r} {n.c}{refs}")
        elif isinstance(n, Split):
            refs = (" .unroll" if n.ref.unroll else "") + (" .sync" if n.ref.sync else "")
            out.append(f"{pad}split {n.k}{refs}")
        elif isinstance(n, Load):
            r = n.ref
            refs = "".join([" .noSync" if r.no_sync else "",
                            f" .storageLayout {r.storage_layout}" if r.storage_layout else "",
                            f" .pad {r.pad}" if r.pad else "",
                            f" .align {r.align}" if r.align is not None else "",
                            " .reuseBuffer" if r.reuse_buffer else ""])
            out.append(f"{pad}load {n.operand} {n.target.describe()} {{")
            _print_chain(n.move, depth + 1, out)
            out.append(f"{pad}}}{refs}")
        elif isinstance(n, Epilog):
            out.append(f"{pad}epilog {n.acc.describe()} {{")
            out.append(f"{pad}  init:")
            _print_chain(n.init, depth + 1, out)
            out.append(f"{pad}}} {{")
            out.append(f"{pad}  store:")
            _print_chain(n.store, depth + 1, out)
            out.append(f"{pad}}}")
        elif isinstance(n, MmaTile):
            out.append(f"{pad}mmaTile")
        else:
            out.append(f"{pad}done" + (f" {n.micro_kernel.name}" if n.micro_kernel else ""))


def _tree_micro_kernels(node: DecompNode, acc: dict[str, MicroKernel]) -> None:
    for n in main_chain(node):
        if isinstance(n, Load):
            _tree_micro_kernels(n.move, acc)
        elif isinstance(n, Epilog):
            _tree_micro_kernels(n.init, acc)
            _tree_micro_kernels(n.store, acc)
        elif isinstance(n, Done) and n.micro_kernel is not None:
            acc.setdefault(n.micro_kernel.name, n.micro_kernel)


def print_script(spec: Spec | Script, tree: DecompNode | None = None,
                 micro_kernels: tuple[MicroKernel, ...] = ()) -> str:
    """Canonical text; ``load_script(print_script(s))`` rebuilds ``s``."""
    if isinstance(spec, Script):
        spec, tree, micro_kernels = spec.spec, spec.tree, spec.micro_kernels
    out = [f"spec {_spec_header(spec)}"]
    _print_chain(tree, 0, out)
    mks: dict[str, MicroKernel] = {m.name: m for m in micro_kernels}
    _tree_micro_kernels(tree, mks)
    for mk in mks.values():
        out.append("")
        vars_ = (" vars " + " ".join(mk.declared_vars)) if mk.declared_vars else ""
        out.append(f"microkernel {mk.name} {_spec_header(mk.pattern)}{vars_}")
        out.append("```")
        out.append(mk.body)
        out.append("```")
    return "\n".join(out) + "\n"


# --- short forms ------------------------------------------------------------

_SHORT_MATMUL = re.compile(r"MatMul\((\d+),(\d+),(\d+)\)\((\w+),(\w+),(\w+)\)\((\w+)\)")
_SHORT_MOVE = re.compile(r"Move\((\d+)x(\d+)\)\((\w+)->(\w+)\)\((\w+)\)")


def parse_short_form(text: str) -> Spec:
    """Inverse of ``spec_short_form`` with default element types and layouts."""
    t = re.sub(r"\s+", "", text)
    if m := _SHORT_MATMUL.fullmatch(t):
        M, N, K = (int(g) for g in m.groups()[:3])
        mems = tuple(MemLevel.parse(g) for g in m.groups()[3:6])
        return make_matmul_spec(M, N, K, mems=mems, level=ComputeLevel.parse(m.group(7)))
    if m := _SHORT_MOVE.fullmatch(t):
        R, C = int(m.group(1)), int(m.group(2))
        level = ComputeLevel.parse(m.group(5))
        dst = MatrixRef("DST", R, C, mem=MemLevel.parse(m.group(4)))
        src = None if m.group(3) == "0" else MatrixRef("SRC", R, C, mem=MemLevel.parse(m.group(3)))
        return Move(src, dst, level)
    raise ParseError(f"not a spec short form: {text!r}")
