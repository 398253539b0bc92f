"""Exception types raised across the package."""


class ContractError(ValueError):
    """An input violates an operation's preconditions (shape, range, finiteness)."""


class NoSuccessorError(ContractError):
    """The requested schedule step has no following step."""


class UndefinedVelocityError(ContractError):
    """Velocity was requested at sigma == 0."""


class DegenerateInputError(ContractError):
    """Input carries too little information for the operation (e.g. a constant map)."""


class BracketingError(RuntimeError):
    """Root bracket does not contain a sign change."""

    def __init__(self, lo, hi, f_lo, f_hi):
        self.lo, self.hi = lo, hi
        self.f_lo, self.f_hi = f_lo, f_hi
        super().__init__(
            f"no sign change on [{lo}, {hi}]: f(lo)={f_lo:.6g}, f(hi)={f_hi:.6g}"
        )


class SchemaError(ValueError):
    """A benchmark or config document does not match the expected schema."""

    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)
