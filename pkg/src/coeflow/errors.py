from __future__ import annotations

from dataclasses import dataclass, field


class CoeflowError(Exception):
    """Base class for all errors raised by coeflow."""


class InvalidInput(CoeflowError):
    """Malformed graph, platform, trace or plan input."""


class Infeasible(CoeflowError):
    """A model or mapping does not fit the available resources.

    ``limit`` names the binding resource (``"pcu_count"``, ``"sram_capacity"``,
    ``"hbm_capacity"``, ...).
    """

    def __init__(self, message: str, limit: str | None = None):
        super().__init__(message)
        self.limit = limit


class ProtocolError(CoeflowError):
    """Stream protocol violation (duplicate or missing sequence ids)."""


class ConfigurationError(CoeflowError):
    """Inconsistent hardware configuration, e.g. overlapping address ranges."""


class AnalysisError(CoeflowError):
    """Static analysis failure, e.g. a symbol used before it is defined."""


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, msg: str) -> None:
        self.errors.append(msg)

    def warn(self, msg: str) -> None:
        self.warnings.append(msg)

    def __bool__(self) -> bool:
        return self.ok
