"""GPU-dialect C source emission from the lowered loop-nest IR."""
from __future__ import annotations

from dataclasses import dataclass

from .decomp import DecompNode, LaunchConfig, validate
from .index import Const, IndexExpr, emit_c, simplify, substitute
from .lower import (
    AliasGroup, Barrier, BufferPlan, Buffer, Exec, Loop, LoweredKernel, Note, Stmt, View,
    address, local_coords, lower,
)
from .spec import (
    BUILTINS, ElemType, Instruction, Major, MatMul, MicroKernel, SimSemantics, Spec,
    spec_short_form,
)

INDENT = "  "


@dataclass(frozen=True)
class KernelSource:
    source: str
    launch: LaunchConfig
    plan: BufferPlan
    entry_name: str
    lowered: LoweredKernel

    def __str__(self) -> str:
        return self.source


def _zero(elem: ElemType) -> str:
    return "0.0f" if elem is ElemType.F32 else "__float2half(0.0f)"


def _mma884(values: dict[str, str]) -> str:
    """Inline PTX for one quad-pair m8n8k4 HMMA; A and B travel as packed half2 registers."""
    a = f"reinterpret_cast<const unsigned*>({values['A_PTR']})"
    b = f"reinterpret_cast<const unsigned*>({values['B_PTR']})"
    ins = f'"r"({a}[0]), "r"({a}[1]), "r"({b}[0]), "r"({b}[1])'
    if values["CT"] == "f32":
        c = f"({values['C_PTR']})"
        outs = ", ".join(f'"+f"({c}[{i}])' for i in range(8))
        regs, rest = "%0,%1,%2,%3,%4,%5,%6,%7", "{%8,%9}, {%10,%11}"
    else:
        c = f"reinterpret_cast<unsigned*>({values['C_PTR']})"
        outs = ", ".join(f'"+r"({c}[{i}])' for i in range(4))
        regs, rest = "%0,%1,%2,%3", "{%4,%5}, {%6,%7}"
    ct = values["CT"]
    return (f'asm volatile("mma.sync.aligned.m8n8k4.row.col.{ct}.f16.f16.{ct} '
            f'{{{regs}}}, {rest}, {{{regs}}};" : {outs} : {ins});')


def _fragment_decl(buf: Buffer) -> str:
    m, n, k = buf.mem.frag
    layout = "wmma::row_major" if buf.layout.major is Major.ROW else "wmma::col_major"
    if buf.role == "A":
        kind = f"wmma::matrix_a, {m}, {n}, {k}, {buf.elem.c_name}, {layout}"
    elif buf.role == "B":
        kind = f"wmma::matrix_b, {m}, {n}, {k}, {buf.elem.c_name}, {layout}"
    else:
        kind = f"wmma::accumulator, {m}, {n}, {k}, {buf.elem.c_name}"
    count = _fragment_count(buf)
    suffix = f"[{count}]" if count > 1 else ""
    return f"wmma::fragment<{kind}> {buf.name}{suffix};"


def _fragment_count(buf: Buffer) -> int:
    m, n, _ = buf.mem.frag
    fr, fc = buf.footprint
    return (fr // m) * (fc // n)


class _Emitter:
    def __init__(self, kernel: LoweredKernel):
        self.k = kernel
        self.lines: list[str] = []
        self.uses_wmma = False

    def expr(self, e: IndexExpr, env: dict[str, int]) -> str:
        return emit_c(simplify(substitute(e, env)) if env else simplify(e))

    def element(self, view: View, env: dict[str, int]) -> str:
        buf = view.buf
        if buf.mem.kind == "FR":
            return self.fragment(view, env)
        return f"{buf.name}[{self.expr(address(view), env)}]"

    def fragment(self, view: View, env: dict[str, int]) -> str:
        buf = view.buf
        if _fragment_count(buf) == 1:
            return buf.name
        m, n, _ = buf.mem.frag
        r, c = local_coords(view)
        idx = r // m + (c // n) * (buf.footprint[0] // m)
        return f"{buf.name}[{self.expr(idx, env)}]"

    def pointer(self, view: View, env: dict[str, int]) -> str:
        off = simplify(substitute(address(view), env))
        if isinstance(off, Const) and off.value == 0:
            return view.buf.name
        return f"{view.buf.name} + {emit_c(off)}"

    def put(self, depth: int, text: str) -> None:
        self.lines.append(INDENT * depth + text)

    def block(self, stmts: list[Stmt], depth: int, env: dict[str, int]) -> None:
        for s in stmts:
            if isinstance(s, Note):
                self.put(depth, f"// {s.text}")
            elif isinstance(s, Barrier):
                self.put(depth, "__syncthreads();")
            elif isinstance(s, Loop):
                if s.unroll:
                    for v in range(s.extent):
                        self.block(s.body, depth, {**env, s.var: v})
                else:
                    self.put(depth, f"for (int {s.var} = 0; {s.var} < {s.extent}; ++{s.var}) {{")
                    self.block(s.body, depth + 1, env)
                    self.put(depth, "}")
            else:
                self.instruction(s, depth, env)

    def instruction(self, ex: Exec, depth: int, env: dict[str, int]) -> None:
        exe = ex.binding.executable
        views = ex.views
        if isinstance(exe, MicroKernel):
            self.put(depth, f"{{ // micro-kernel {exe.name}: {spec_short_form(ex.spec)}")
            for line in exe.render(self.mk_values(ex, env)).splitlines():
                self.put(depth + 1, line) if line.strip() else self.lines.append("")
            self.put(depth, "}")
            return
        values: dict[str, str] = {}
        for role, view in views.items():
            if role not in ("A", "B", "C", "SRC", "DST"):
                continue
            values[role] = self.element(view, env)
            values[f"{role}_PTR"] = self.pointer(view, env)
            values[f"{role}_LD"] = str(view.buf.ld)
            major = "wmma::mem_row_major" if view.buf.layout.major is Major.ROW else "wmma::mem_col_major"
            values[f"{role}_MAJOR"] = major
        target = views.get("DST") or views.get("C")
        values["ZERO"] = _zero(target.buf.elem)
        values["CT"] = "f32" if ex.spec.operand("C" if isinstance(ex.spec, MatMul) else "DST").elem is ElemType.F32 else "f16"
        if exe.name == "HMMA.884":
            values["MMA884"] = _mma884(values)
        if exe.sim in (SimSemantics.WMMA_LOAD, SimSemantics.WMMA_STORE, SimSemantics.WMMA_MMA):
            self.uses_wmma = True
        for line in exe.emission.format(**values).splitlines():
            self.put(depth, line)

    def mk_values(self, ex: Exec, env: dict[str, int]) -> dict[str, str]:
        s = ex.spec
        vals: dict[str, str] = {}
        if isinstance(s, MatMul):
            vals.update(M=str(s.M), N=str(s.N), K=str(s.K))
        else:
            vals.update(ROWS=str(s.rows), COLS=str(s.cols))
        for role, view in ex.views.items():
            vals[role] = f"({self.pointer(view, env)})"
            vals[f"ld{role}"] = str(view.buf.ld)
        return vals


def _shared_decls(groups: list[AliasGroup]) -> list[str]:
    out = []
    for g in groups:
        if len(g.members) == 1:
            b = g.members[0]
            out.append(f"__shared__ __align__({b.align}) {b.elem.c_name} {b.name}[{b.extent * b.replicas}];")
            continue
        pool = f"shared_pool_{g.index}"
        names = ", ".join(m.name for m in g.members)
        out.append(f"__shared__ __align__({g.align}) unsigned char {pool}[{g.nbytes}]; // reused by {names}")
        for m in g.members:
            out.append(f"{m.elem.c_name}* const {m.name} = reinterpret_cast<{m.elem.c_name}*>({pool});")
    return out


def emit_kernel(kernel: LoweredKernel, entry_name: str | None = None) -> str:
    root = kernel.root
    em = _Emitter(kernel)
    em.block(kernel.body, 1, {})
    body = em.lines
    plan = kernel.plan
    launch = kernel.launch
    entry = entry_name or ("matmul_kernel" if isinstance(root, MatMul) else "move_kernel")
    elems = {b.elem for b in plan.buffers}
    uses_fr = any(b.mem.kind == "FR" for b in plan.buffers)

    out = [f"// {spec_short_form(root)}"]
    if ElemType.F16 in elems:
        out.append("#include <cuda_fp16.h>")
    if uses_fr or em.uses_wmma:
        out += ["#include <mma.h>", "using namespace nvcuda;"]
    out.append("")
    if isinstance(root, MatMul):
        out.append(f"constexpr int M = {root.M}, N = {root.N}, K = {root.K};")
    else:
        out.append(f"constexpr int ROWS = {root.rows}, COLS = {root.cols};")
    g, b = launch.grid, launch.block
    out.append(f"// launch: grid ({g[0]}, {g[1]}, {g[2]}), block ({b[0]}, {b[1]}, {b[2]}), "
               f"shared {plan.shared_bytes} bytes")
    params = []
    for p in kernel.params:
        const = "const " if p.role in ("A", "B", "SRC") else ""
        params.append(f"{const}{p.elem.c_name}* __restrict__ {p.name}")
    out.append(f'extern "C" __global__ void __launch_bounds__({b[0]}) {entry}({", ".join(params)}) {{')
    text = "\n".join(body)
    if "warp_id" in text:
        out.append(f"{INDENT}const int warp_id = threadIdx.x / 32;")
    if "lane_id" in text:
        out.append(f"{INDENT}const int lane_id = threadIdx.x % 32;")
    out += [INDENT + d for d in _shared_decls(plan.groups)]
    for buf in plan.private():
        if buf.mem.kind == "FR":
            out.append(INDENT + _fragment_decl(buf))
        else:
            out.append(f"{INDENT}{buf.elem.c_name} {buf.name}[{buf.extent}];")
    out += body
    out.append("}")
    return "\n".join(out) + "\n"


def generate(root: Spec, tree: DecompNode, instrs: tuple[Instruction, ...] = BUILTINS,
             entry_name: str | None = None) -> KernelSource:
    """Validate ``tree`` and emit a complete kernel translation unit."""
    report = validate(root, tree, instrs)
    report.raise_first()
    kernel = lower(root, tree, report.launch, instrs)
    source = emit_kernel(kernel, entry_name)
    entry = entry_name or ("matmul_kernel" if isinstance(root, MatMul) else "move_kernel")
    return KernelSource(source, report.launch, kernel.plan, entry, kernel)
