"""Exception types shared across the package."""


class AmrError(Exception):
    """Base class for all amrender errors."""


class FormatError(AmrError):
    """Dataset header is not a readable PAMR file (bad magic, version, ...)."""


class CorruptionError(AmrError):
    """Dataset bytes are damaged: truncated payload or size mismatch."""


class StructureError(AmrError):
    """Records do not assemble into a valid octree (partial child sets, orphans, duplicates)."""


class WorkUnitError(AmrError):
    """A parallel work unit failed; carries the unit id."""

    def __init__(self, unit_id: int, message: str):
        super().__init__(f"work unit {unit_id} failed: {message}")
        self.unit_id = unit_id
