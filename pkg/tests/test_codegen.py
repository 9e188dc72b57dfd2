import re

import pytest

from helpers import listing2, padded_a_load, reuse_tree, script
from tilesched import Fluent, generate, lower_tree
from tilesched.corpus import corpus
from tilesched.errors import CapacityError
from tilesched.script import load_script
from tilesched.spec import RF, ElemType, Thread, make_matmul_spec

BAD_TOKENS = re.compile(r"\* 0\b|\+ 0\b|\* 1\b")

SMALL_DOT = """
spec matmul 128 128 16
tile 128 128 .to Block
load A SH {
  tile 4 2 .to Thread
  tile 1 1
  done
}
load B SH {
  tile 2 4 .to Thread
  tile 1 1
  done
}
tile 64 32 .to Warp
tile 8 8 .to Thread
load A RF {
  tile 1 1
  done
}
load B RF {
  tile 1 1
  done
}
tile 1 1
done dot

microkernel dot matmul 1 1 16 mem RF RF GL level Thread vars K A B C ldA
```
float acc = 0.0f;
for (int k = 0; k < ${K}; ++k) {
  acc += ${A}[k * ${ldA}] * ${B}[k];
}
*${C} = acc;
```
"""


def fma_spec(M, N, K):
    return make_matmul_spec(M, N, K, mems=(RF, RF, RF), level=Thread)


def test_listing2_structure():
    src = generate(*listing2()).source
    assert src.startswith("// MatMul(128,128,32)(GL,GL,GL)(Kernel)\n")
    assert "__launch_bounds__(256)" in src
    # one barrier per shared load plus one for the synced split
    assert src.count("__syncthreads();") == 3
    assert "for (int k3 = 0; k3 < 4; ++k3) {" in src
    assert "(k3 * 8)" in src
    assert "+= A_RF_4[i9] * B_RF_5[j10];" in src
    assert "blockIdx" not in src  # a single block: the block id collapses to 0


def test_sync_split_barrier_is_last_in_loop_body():
    lines = generate(*listing2()).source.splitlines()
    start = next(i for i, ln in enumerate(lines) if ln.startswith("  for (int k3"))
    end = next(i for i in range(start + 1, len(lines)) if lines[i] == "  }")
    assert lines[end - 1].strip() == "__syncthreads();"


def test_no_sync_drops_one_barrier():
    src = generate(*listing2(a_no_sync=True)).source
    assert src.count("__syncthreads();") == 2


def test_block_assignment_uses_block_ids():
    s, tree = listing2(M=256, N=256)
    src = generate(s, tree).source
    assert "blockIdx.x" in src and "blockIdx.y" in src
    assert "// launch: grid (2, 2, 1)" in src


def test_sequential_tiles_become_loops():
    tree = Fluent().tile(2, 2).tile(1, 1).split(1).done()
    src = generate(fma_spec(4, 4, 1), tree).source
    assert "for (int i1 = 0; i1 < 2; ++i1) {" in src
    assert "for (int j2 = 0; j2 < 2; ++j2) {" in src


def test_unroll_inlines_bodies():
    tree = Fluent().tile(2, 2).tile(1, 1).unroll().split(1).done()
    src = generate(fma_spec(4, 4, 1), tree).source
    # the outer 2x2 stays as loops, the inner 2x2 is inlined
    assert src.count("for (") == 2
    assert src.count("+=") == 4


def test_minimal_kernel():
    src = generate(fma_spec(1, 1, 1), Fluent().done()).source
    assert "for" not in src and "__syncthreads" not in src
    assert "C[0] += A[0] * B[0];" in src


def test_trivial_thread_epilog():
    s = make_matmul_spec(1, 1, 1, mems=(RF, RF, make_matmul_spec(1, 1, 1).c.mem), level=Thread)
    src = generate(s, Fluent().epilog(RF, Fluent().done(), Fluent().done()).done()).source
    body = [ln.strip() for ln in src.splitlines() if ln.strip().endswith(";") and "=" in ln
            and not ln.strip().startswith("constexpr")]
    assert body == ["C_RF_1[0] = 0.0f;", "C_RF_1[0] += A[0] * B[0];", "C[0] = C_RF_1[0];"]


def test_wmma_source():
    sc = script("wmma_simple.fi")
    src = generate(sc.spec, sc.tree).source
    assert "#include <mma.h>" in src and "#include <cuda_fp16.h>" in src
    assert sorted(set(re.findall(r"wmma::(\w+)\(", src))) == [
        "load_matrix_sync", "mma_sync", "store_matrix_sync"]
    assert src.count("wmma::load_matrix_sync(") == 2
    assert "wmma::fragment<wmma::accumulator, 16, 16, 16, float> C_FR_1;" in src


def test_hmma_emission():
    sc = script("hmma.fi")
    src = generate(sc.spec, sc.tree).source
    assert "mma.sync.aligned.m8n8k4.row.col.f16.f16.f16.f16" in src
    assert src.count('"+r"(') == 4


def test_micro_kernel_emission():
    sc = load_script(SMALL_DOT)
    src = generate(sc.spec, sc.tree).source
    assert src.count("// micro-kernel dot: MatMul(1,1,16)(RF,RF,GL)(Thread)") == 1
    assert "for (int k = 0; k < 16; ++k) {" in src
    assert "[k * 8]" in src
    assert "${" not in src


def test_capacity_error():
    sc = script("listing1.fi")
    with pytest.raises(CapacityError):
        generate(sc.spec, sc.tree)


def test_padding_extent():
    s, tree = padded_a_load()
    kernel = lower_tree(s, tree)
    (buf,) = kernel.plan.shared()
    assert buf.extent == 8 * (128 + 4)
    assert f"A_SH_2[{8 * 132}]" in generate(s, tree).source


def test_reuse_buffer_aliases_one_allocation():
    plain = lower_tree(*reuse_tree(reuse=False)).plan
    shared = lower_tree(*reuse_tree(reuse=True)).plan
    assert len(plain.groups) == 3 and len(shared.groups) == 2
    group = next(g for g in shared.groups if len(g.members) == 2)
    assert {m.name for m in group.members} == {"A_SH_2", "C_SH_6"}
    assert group.nbytes == max(m.nbytes for m in group.members) == 64 * 64 * 4
    assert shared.shared_bytes == plain.shared_bytes - 64 * 8 * 4
    src = generate(*reuse_tree()).source
    assert "unsigned char shared_pool_0[16384];" in src


def test_reuse_without_barrier_is_rejected():
    from tilesched import validate
    report = validate(*reuse_tree(sync=False))
    assert not report.ok and "reuseBuffer" in str(report.violations[0])


def test_buffer_plan_details():
    plan = lower_tree(*listing2()).plan
    names = [b.name for b in plan.buffers if not b.is_param]
    assert names == ["C_RF_1", "B_SH_2", "A_SH_3", "A_RF_4", "B_RF_5"]
    assert plan["C_RF_1"].distributed and plan["C_RF_1"].extent == 64
    assert not plan["A_RF_4"].distributed and plan["A_RF_4"].extent == 8


def test_no_identity_arithmetic_in_emitted_kernels():
    sources = [generate(*listing2()).source, generate(*reuse_tree()).source]
    for name in ("wmma_simple.fi", "hmma.fi", "listing2_a_first.fi"):
        sc = script(name)
        sources.append(generate(sc.spec, sc.tree).source)
    sources += [generate(c.spec, c.tree).source for c in corpus(20)]
    for src in sources:
        assert not BAD_TOKENS.search(src), BAD_TOKENS.search(src).group()


def test_generation_is_deterministic():
    assert generate(*listing2()).source == generate(*listing2()).source


def test_f16_elements_use_half():
    s = make_matmul_spec(1, 1, 1, elems=(ElemType.F16,) * 3, mems=(RF, RF, RF), level=Thread)
    src = generate(s, Fluent().done()).source
    assert "__hfma" in src and "const half*" in src
