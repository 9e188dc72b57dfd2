import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilesched.errors import ParseError, UnboundVar
from tilesched.index import (
    Add, BitAnd, BitOr, Const, Div, Mod, Mul, Shl, Shr, Var, apply_swizzle, compile_py, emit_c,
    emit_py, eval_expr, free_vars, is_bijection, parse_index, simplify, substitute, upper_bound,
)

MAXWELL = "((id>>1)&0x07)|(id&0x30)|((id&0x01)<<3)"
VARS = ("x", "y", "z")


def exprs():
    leaves = st.one_of(st.integers(0, 40).map(Const), st.sampled_from(VARS).map(Var))

    def grow(children):
        small = st.integers(1, 9).map(Const)
        shift = st.integers(0, 4).map(Const)
        return st.one_of(
            st.builds(Add, children, children),
            st.builds(Mul, children, children),
            st.builds(BitAnd, children, children),
            st.builds(BitOr, children, children),
            st.builds(Div, children, small),
            st.builds(Mod, children, small),
            st.builds(Shr, children, shift),
            st.builds(Shl, children, shift),
        )

    return st.recursive(leaves, grow, max_leaves=12)


envs = st.fixed_dictionaries({v: st.integers(0, 200) for v in VARS})


@settings(max_examples=400, deadline=None)
@given(exprs(), envs)
def test_simplify_preserves_value(e, env):
    assert eval_expr(simplify(e), env) == eval_expr(e, env)


@settings(max_examples=200, deadline=None)
@given(exprs())
def test_simplify_is_idempotent(e):
    once = simplify(e)
    assert simplify(once) == once


@settings(max_examples=200, deadline=None)
@given(exprs(), envs)
def test_python_emission_agrees_with_eval(e, env):
    f = compile_py(e, VARS)
    assert f(*(env[v] for v in VARS)) == eval_expr(e, env)


@settings(max_examples=200, deadline=None)
@given(exprs(), envs)
def test_emit_c_round_trips_through_parser(e, env):
    assert eval_expr(parse_index(emit_c(e)), env) == eval_expr(e, env)


@settings(max_examples=200, deadline=None)
@given(exprs())
def test_upper_bound_is_sound(e):
    ranges = {"x": 5, "y": 3, "z": 7}
    bound = upper_bound(e, ranges)
    rng = random.Random(0)
    for _ in range(30):
        env = {v: rng.randint(0, hi) for v, hi in ranges.items()}
        assert eval_expr(e, env) <= bound


def test_identities():
    assert simplify(Mul(Const(0), Var("N"))) == Const(0)
    assert simplify(Add(Var("x"), Const(0))) == Var("x")
    assert simplify(Mul(Var("x"), Const(1))) == Var("x")
    assert simplify(Div(Var("x"), Const(1))) == Var("x")
    assert simplify(Mod(Var("x"), Const(1))) == Const(0)


def test_nested_constant_products_fold():
    e = simplify(Mul(Mul(Var("t"), Const(4)), Const(8)))
    assert e == Mul(Var("t"), Const(32))
    for t in range(101):
        assert eval_expr(e, {"t": t}) == t * 32


def test_constant_distributes_over_offset():
    e = simplify(Mul(Add(Mul(Var("j"), Const(2)), Const(1)), Const(4)))
    assert emit_c(e) == "((j * 8) + 4)"


def test_emit_c_goldens():
    assert emit_c(Const(0)) == "0"
    assert emit_c(Add(Mul(Var("blockIdx.x"), Const(128)), Var("row"))) == "((blockIdx.x * 128) + row)"
    assert emit_c(simplify(parse_index(MAXWELL))) == "(((id >> 1) & 7) | ((id & 48) | ((id & 1) << 3)))"


def test_emit_py_renames():
    assert emit_py(Div(Var("threadIdx.x"), Const(32)), {"threadIdx.x": "tid"}) == "(tid // 32)"


def test_eval():
    assert eval_expr(Const(7), {}) == 7
    assert eval_expr(parse_index(MAXWELL), {"id": 2}) == 1
    with pytest.raises(UnboundVar):
        eval_expr(Var("x"), {})


def test_swizzles():
    ident = Var("id")
    assert apply_swizzle(ident, 13) == 13
    maxwell = parse_index(MAXWELL)
    assert apply_swizzle(maxwell, 1) == 8
    assert sorted(apply_swizzle(maxwell, i) for i in range(64)) == list(range(64))
    assert is_bijection(maxwell, 64)
    assert not is_bijection(Const(3), 32)
    assert not is_bijection(Mod(Var("id"), Const(16)), 32)


def test_free_vars_and_substitute():
    e = parse_index("a * 4 + b")
    assert free_vars(e) == {"a", "b"}
    assert simplify(substitute(e, {"a": 2})) == simplify(parse_index("b + 8"))
    assert upper_bound(e, {"a": 3, "b": 3}) == 15


@pytest.mark.parametrize("text", ["id +", "id ** 2", "f(id)", "id - 1", "1.5"])
def test_parse_rejects(text):
    with pytest.raises(ParseError):
        parse_index(text)
