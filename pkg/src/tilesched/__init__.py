"""Scheduling-language compiler for GPU matrix kernels.

Specs describe a MatMul or Move; decompositions (tile, split, load, epilog,
mmaTile) rewrite a spec into smaller ones until the residual matches an
instruction or micro-kernel. ``generate`` prints kernel source and ``run``
executes the same lowered program on a reference simulator.
"""
from .codegen import KernelSource, generate
from .decomp import (
    Fluent, LaunchConfig, TraceEntry, ValidationReport, elaborate, format_trace, validate,
)
from .errors import (
    CapacityError, CodegenError, DecompositionError, ParseError, SimulationError, SpecError,
    TileSchedError,
)
from .index import Const, Var, apply_swizzle, emit_c, eval_expr, parse_index, simplify
from .lower import SHARED_CAPACITY, lower_tree
from .script import Script, load_script, parse_script, print_script
from .sim import (
    OwnershipReport, RaceReport, check_ownership, digest, max_abs_error, naive_matmul, run, simulate,
)
from .spec import (
    BUILTINS, FR, GL, RF, SH, Block, ColMajor, ComputeLevel, ElemType, Kernel, Layout, MatMul,
    MicroKernel, Move, RowMajor, Thread, Warp, make_matmul_spec, make_move_spec, spec_short_form,
)

__all__ = [
    "BUILTINS", "Block", "CapacityError", "CodegenError", "ColMajor", "ComputeLevel", "Const",
    "DecompositionError", "ElemType", "FR", "Fluent", "GL", "Kernel", "KernelSource", "LaunchConfig",
    "Layout", "MatMul", "MicroKernel", "Move", "OwnershipReport", "ParseError", "RF", "RaceReport",
    "RowMajor", "SH", "SHARED_CAPACITY", "Script", "SimulationError", "SpecError", "Thread",
    "TileSchedError", "TraceEntry", "ValidationReport", "Var", "Warp", "apply_swizzle",
    "check_ownership", "digest", "elaborate", "emit_c", "eval_expr", "format_trace", "generate",
    "load_script", "lower_tree", "make_matmul_spec", "make_move_spec", "max_abs_error",
    "naive_matmul", "parse_index", "parse_script", "print_script", "run", "simulate", "simplify",
    "spec_short_form", "validate",
]
