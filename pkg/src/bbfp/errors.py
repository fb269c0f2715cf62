"""Exception types raised across the package."""


class BbfpError(ValueError):
    """Base class for all format and datapath errors."""


class EmptyBlock(BbfpError):
    pass


class NonFiniteInput(BbfpError):
    """NaN/Inf (or a value beyond the source float range) was supplied.

    ``index`` is the flat index of the first offending element when known.
    """

    def __init__(self, message="NonFiniteInput", index=None):
        if index is not None:
            message = f"NonFiniteInput at index {index}"
        super().__init__(message)
        self.index = index


class ConfigMismatch(BbfpError):
    pass


class AccOverflow(BbfpError):
    pass


class BadMagic(BbfpError):
    pass


class TruncatedPayload(BbfpError):
    pass


class CandidateEvaluationError(RuntimeError):
    """An overlap candidate's quality or overhead evaluator failed."""

    def __init__(self, index, cause):
        super().__init__(f"evaluation failed for overlap candidate o={index}: {cause!r}")
        self.index = index
