"""Exception hierarchy.

Every error carries the name of the module it originated from so the CLI can
surface it in its machine-readable error record.
"""

from __future__ import annotations


class ChaosLabError(Exception):
    module = "chaoslab"

    def to_record(self) -> dict:
        return {"error": type(self).__name__, "module": self.module, "message": str(self)}


class ConstraintViolation(ChaosLabError, ValueError):
    """A parameter violates a documented constraint (``rule`` names it)."""

    def __init__(self, rule: str, message: str | None = None, module: str = "chaoslab"):
        self.rule = rule
        self.module = module
        super().__init__(f"{message} (rule: {rule})" if message else rule)

    def to_record(self) -> dict:
        rec = super().to_record()
        rec["rule"] = self.rule
        return rec


class UsageError(ChaosLabError, ValueError):
    def __init__(self, message: str, module: str = "chaoslab"):
        self.module = module
        super().__init__(message)


class NumericalFailure(ChaosLabError, ArithmeticError):
    """Quadrature or PDE stepping failed to converge; ``estimates`` holds the last values."""

    def __init__(self, message: str, estimates: tuple = (), module: str = "chaoslab"):
        self.module = module
        self.estimates = tuple(estimates)
        super().__init__(message)

    def to_record(self) -> dict:
        rec = super().to_record()
        rec["estimates"] = [float(e) for e in self.estimates]
        return rec


class BlowUpError(ChaosLabError, FloatingPointError):
    module = "sde_engine"

    def __init__(self, particle: int, time: float, run: int = 0):
        self.particle = int(particle)
        self.time = float(time)
        self.run = int(run)
        super().__init__(
            f"non-finite position for particle {self.particle} (run {self.run}) at t={self.time:.6g}"
        )

    def to_record(self) -> dict:
        rec = super().to_record()
        rec.update(particle=self.particle, time=self.time, run=self.run)
        return rec


class EstimationFailure(ChaosLabError, ArithmeticError):
    module = "girsanov_lab"


class ConfigError(ChaosLabError, ValueError):
    """Config text could not be parsed; ``line``/``column`` are 1-based."""

    module = "cli_io"

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)

    def to_record(self) -> dict:
        rec = super().to_record()
        rec.update(line=self.line, column=self.column)
        return rec
