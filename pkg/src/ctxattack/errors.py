"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, budget/infeasibility exits 3.
"""


class CtxAttackError(Exception):
    """Base class for all package errors."""


class ParseError(CtxAttackError):
    """Malformed input document (COCO JSON, VOC XML, internal formats)."""


class CorpusError(CtxAttackError):
    """Corpus violates an integrity invariant (e.g. category id out of range)."""


class InvalidSpecError(CtxAttackError):
    """A synthetic-corpus or configuration spec is not satisfiable."""


class GraphFormatError(CtxAttackError):
    """Context-graph file has a wrong version or fails its checksum."""


class GeometryError(CtxAttackError):
    """Image/grid/pool dimensions are inconsistent."""


class BudgetError(CtxAttackError):
    """A helper or query budget was exhausted."""


class NonFiniteLossError(CtxAttackError):
    """The perturbation loop hit a non-finite loss; carries the trace so far."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


class DegenerateSceneError(CtxAttackError):
    """No admissible target label exists (scene covers every category)."""
