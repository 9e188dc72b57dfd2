import pytest

from helpers import float_inputs, int_inputs, listing2, reuse_tree, script, transposed_store
from tilesched import Block, Fluent, Kernel, Thread, check_ownership, run, simulate
from tilesched.errors import OwnershipViolation, ShapeMismatch, UnsimulatableResidual
from tilesched.sim import (
    detect_races, digest, format_log, max_abs_error, naive_matmul, round_f16, round_f32,
)
from tilesched.spec import RF, MatrixRef, make_matmul_spec, make_move_spec


def test_listing2_is_exact_and_race_free():
    s, tree = listing2()
    a, b = int_inputs(s, 1)
    c, races = run(s, tree, a, b)
    assert c == naive_matmul(a, b)
    assert races.empty


def test_listing2_float_error():
    s, tree = listing2()
    a, b = float_inputs(s, 2)
    c, _ = run(s, tree, a, b)
    assert max_abs_error(c, naive_matmul(a, b)) <= 1e-3


def test_multi_block_grid():
    s, tree = listing2(M=256, N=128, K=16)
    a, b = int_inputs(s, 3)
    c, races = run(s, tree, a, b)
    assert c == naive_matmul(a, b) and races.empty


def test_missing_barrier_is_reported_as_race():
    s, tree = listing2(a_no_sync=True)
    a, b = int_inputs(s, 4)
    _, races = run(s, tree, a, b)
    assert not races.empty
    assert {r.buffer for r in races} == {"A_SH_3"}
    assert "A_SH_3" in races.summary()


def test_a_first_no_sync_is_covered_by_the_b_barrier():
    s, tree = listing2(a_no_sync=True, a_first=True)
    a, b = int_inputs(s, 4)
    c, races = run(s, tree, a, b)
    assert races.empty and c == naive_matmul(a, b)


def test_transposed_store_breaks_ownership():
    s, tree = transposed_store()
    report = check_ownership(s, tree)
    assert not report.ok
    assert report.summary() == "15360 ownership violations across 240 units"
    first = report.violations[0]
    assert first.buffer == "C_RF_1" and first.holds != first.wants
    a, b = int_inputs(s, 5)
    with pytest.raises(OwnershipViolation):
        run(s, tree, a, b)


def test_reuse_buffer_kernel_is_exact_and_clean():
    s, tree = reuse_tree()
    a, b = int_inputs(s, 6)
    c, races = run(s, tree, a, b)
    assert c == naive_matmul(a, b) and races.empty
    assert check_ownership(s, tree).ok


def test_move_root_identity_copy():
    s = make_move_spec(MatrixRef("S", 8, 8), MatrixRef("D", 8, 8), Kernel)
    tree = Fluent().tile(8, 8).to(Block).tile(1, 1).to(Thread).done()
    a = [[float(r * 8 + c) for c in range(8)] for r in range(8)]
    c, races = run(s, tree, a)
    assert c == a and races.empty


def test_single_thread_kernel_is_vacuously_clean():
    s = make_matmul_spec(2, 2, 2, mems=(RF, RF, RF), level=Thread)
    tree = Fluent().tile(1, 1).split(1).done()
    a, b = [[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]
    c, races, result = simulate(s, tree, a, b, keep_log=True)
    assert c == [[19.0, 22.0], [43.0, 50.0]]
    assert races.empty and result.phases == 0


def test_race_detector_on_constructed_logs():
    ww = detect_races([(0, 0, 1, "W", "S", 0), (0, 0, 2, "W", "S", 0)])
    assert len(ww) == 1 and ww.races[0].kind == "WW"
    separated = detect_races([(0, 0, 1, "W", "S", 0), (1, 0, 2, "R", "S", 0)])
    assert separated.empty
    rw = detect_races([(3, 0, 1, "W", "S", 7), (3, 0, 5, "R", "S", 7)])
    assert rw.races[0].kind == "RW" and rw.races[0].other == 5
    same_thread = detect_races([(0, 0, 1, "W", "S", 0), (0, 0, 1, "R", "S", 0)])
    assert same_thread.empty


def test_log_records_shared_accesses():
    s, tree = listing2()
    a, b = int_inputs(s, 7)
    _, _, result = simulate(s, tree, a, b, keep_log=True)
    assert result.log and result.phases == 12
    text = format_log(result.log[:2])
    assert text.count("\n") == 2 and " W " in text


def test_wmma_within_half_precision_tolerance():
    sc = script("wmma_simple.fi")
    a, b = float_inputs(sc.spec, 8)
    a = [[round_f16(x) for x in row] for row in a]
    b = [[round_f16(x) for x in row] for row in b]
    c, races = run(sc.spec, sc.tree, a, b)
    assert races.empty
    assert max_abs_error(c, naive_matmul(a, b)) <= 2 ** -8


def test_hmma_is_not_simulated():
    sc = script("hmma.fi")
    a, b = int_inputs(sc.spec, 9)
    with pytest.raises(UnsimulatableResidual):
        run(sc.spec, sc.tree, a, b)


def test_input_shape_checked():
    s, tree = listing2()
    with pytest.raises(ShapeMismatch):
        run(s, tree, [[0.0] * 4] * 4, [[0.0] * 4] * 4)


def test_digest_is_deterministic():
    s, tree = listing2(K=16)
    a, b = int_inputs(s, 10)
    assert digest(run(s, tree, a, b)[0]) == digest(run(s, tree, a, b)[0])
    assert digest([[1.0]]) != digest([[2.0]])


def test_round_f16():
    assert round_f16(1.0) == 1.0
    assert round_f16(1 + 2 ** -12) == 1.0
    assert round_f16(1e6) == float("inf")


def test_f32_stores_round_to_single_precision():
    assert round_f32(1 + 2 ** -30) == 1.0
    assert round_f32(0.1) != 0.1
    s = make_matmul_spec(1, 1, 1, mems=(RF, RF, RF), level=Thread)
    c, _ = run(s, Fluent().done(), [[0.1]], [[0.3]])
    assert c[0][0] == round_f32(round_f32(0.1) * round_f32(0.3))
