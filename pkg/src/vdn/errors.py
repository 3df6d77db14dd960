"""Exception hierarchy shared across the package."""


class VdnError(Exception):
    pass


class ContractError(VdnError, ValueError):
    """A caller violated a documented precondition (bad shape, label, arity)."""


class ShapeError(ContractError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class DomainError(VdnError, ValueError):
    """Input lies outside the mathematical domain of a function (e.g. log(x<=0))."""


class NumericError(VdnError, ArithmeticError):
    """A computation produced NaN or infinity."""
