# utils/errors.py - Exception types shared by the services and the CLI
from typing import Iterable, Optional


class LopfError(Exception):
    """Base class for every error raised by the services"""

    code = 2


class PreconditionError(LopfError, ValueError):
    """A documented precondition of an operation does not hold"""


class CaseSyntaxError(LopfError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class CaseSemanticError(LopfError):
    def __init__(self, message: str, entity_ids: Iterable = ()):
        self.entity_ids = list(entity_ids)
        super().__init__(message)


class SingularBranchError(CaseSemanticError):
    def __init__(self, from_bus: int, to_bus: int):
        super().__init__(
            f"branch {from_bus}-{to_bus} has zero series impedance (r = x = 0)",
            [from_bus, to_bus],
        )


class SingularSystemError(LopfError):
    def __init__(self, condition: float, message: str = "singular linear system"):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


class DegenerateEmbeddingError(LopfError):
    def __init__(self, buses: Iterable[int]):
        self.buses = list(buses)
        super().__init__(f"germ voltage is zero at buses {self.buses}")


class PoleAtOneError(LopfError):
    def __init__(self, buses: Iterable[int]):
        self.buses = list(buses)
        super().__init__(f"Pade denominator vanishes at z = 1 for buses {self.buses}")


class TapeError(LopfError):
    """Misuse of a differentiation tape (lifecycle or output contract)"""


class DemandDataError(LopfError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class CheckpointError(LopfError):
    pass


class UsageError(LopfError):
    """Bad command line: unknown subcommand, missing or malformed flag"""

    code = 64
