"""Exception hierarchy.  ``kind`` is the stable, machine-readable error name."""
from __future__ import annotations


class TileSchedError(Exception):
    kind = "Error"

    def __init__(self, message: str = "", *, step: int | None = None, path: str = ""):
        super().__init__(message)
        self.message = message
        self.step = step
        self.path = path

    def __str__(self) -> str:
        where = ""
        if self.step is not None:
            where = f" at step {self.step}"
            if self.path:
                where += f" ({self.path})"
        return f"{self.kind}{where}: {self.message}"


class SpecError(TileSchedError):
    kind = "SpecError"


class ZeroDim(SpecError):
    kind = "ZeroDim"


class ShapeMismatch(SpecError):
    kind = "ShapeMismatch"


class AmbiguousMatch(SpecError):
    kind = "AmbiguousMatch"


class DuplicatePattern(SpecError):
    kind = "DuplicatePattern"


class UnboundVar(TileSchedError):
    kind = "UnboundVar"

    def __init__(self, name: str):
        super().__init__(f"unbound variable {name!r}")
        self.name = name


class DecompositionError(TileSchedError):
    kind = "DecompositionError"


class NonDivisible(DecompositionError):
    kind = "NonDivisible"

    def __init__(self, dim: str, size: int, tile: int, **kw):
        super().__init__(f"{dim}={size} is not divisible by tile size {tile}", **kw)
        self.dim, self.size, self.tile = dim, size, tile


class HierarchyViolation(DecompositionError):
    kind = "HierarchyViolation"


class UnitCountMismatch(DecompositionError):
    kind = "UnitCountMismatch"


class NotMatMul(DecompositionError):
    kind = "NotMatMul"


class InvalidOperand(DecompositionError):
    kind = "InvalidOperand"


class UpwardLoad(DecompositionError):
    kind = "UpwardLoad"


class InvalidMoveDecomp(DecompositionError):
    kind = "InvalidMoveDecomp"


class CNotInGL(DecompositionError):
    kind = "CNotInGL"


class PatternMismatch(DecompositionError):
    kind = "PatternMismatch"


class NoExecutableMatch(DecompositionError):
    kind = "NoExecutableMatch"


class SwizzleNotBijective(DecompositionError):
    kind = "SwizzleNotBijective"


class IllegalRefinement(DecompositionError):
    kind = "IllegalRefinement"


class ParseError(TileSchedError):
    kind = "ParseError"

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        super().__init__(message)
        self.line, self.col = line, col

    def __str__(self) -> str:
        if self.line is None:
            return f"{self.kind}: {self.message}"
        return f"{self.kind} at line {self.line}, column {self.col}: {self.message}"


class CodegenError(TileSchedError):
    kind = "CodegenError"


class CapacityError(CodegenError):
    kind = "CapacityError"


class SimulationError(TileSchedError):
    kind = "SimulationError"


class UnsimulatableResidual(SimulationError):
    kind = "UnsimulatableResidual"


class OwnershipViolation(SimulationError):
    kind = "OwnershipViolation"


class BarrierDivergence(SimulationError):
    kind = "BarrierDivergence"
