"""Exception hierarchy.

Every error carries a short machine-readable ``code`` that the CLI prints on
failure. Codes match the class names.
"""


class P2CadError(Exception):
    code = "P2CadError"

    def __str__(self):
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


# cad_lang
class NonFiniteParam(P2CadError, ValueError):
    code = "NonFiniteParam"


class BadRange(P2CadError, ValueError):
    code = "BadRange"


class UnusedParam(P2CadError, ValueError):
    code = "UnusedParam"


class BadClass(P2CadError, ValueError):
    code = "BadClass"


class ParseError(P2CadError, ValueError):
    code = "ParseError"


class UnknownCommand(P2CadError, ValueError):
    code = "UnknownCommand"


class ArityError(P2CadError, ValueError):
    code = "ArityError"


class GrammarError(P2CadError, ValueError):
    code = "GrammarError"

    def __init__(self, index, message=""):
        self.index = index
        super().__init__(f"at index {index}" + (f": {message}" if message else ""))


class InvalidSequence(P2CadError, ValueError):
    code = "InvalidSequence"


class SequenceTooLong(P2CadError, ValueError):
    code = "SequenceTooLong"


class MalformedTokens(P2CadError, ValueError):
    code = "MalformedTokens"


# geometry
class DegenerateLoop(P2CadError, ValueError):
    code = "DegenerateLoop"


class ZeroExtent(P2CadError, ValueError):
    code = "ZeroExtent"


class EmptySolid(P2CadError, ValueError):
    code = "EmptySolid"


class DegenerateCloud(P2CadError, ValueError):
    code = "DegenerateCloud"


class EmptyCloud(P2CadError, ValueError):
    code = "EmptyCloud"


# autodiff
class ShapeError(P2CadError, ValueError):
    code = "ShapeError"


class NumericError(P2CadError, ArithmeticError):
    code = "NumericError"


class BadTarget(P2CadError, ValueError):
    code = "BadTarget"


class NonScalarLoss(P2CadError, ValueError):
    code = "NonScalarLoss"


# trainer
class BadSpec(P2CadError, ValueError):
    code = "BadSpec"


class Diverged(P2CadError, RuntimeError):
    code = "Diverged"


class FormatError(P2CadError, ValueError):
    """Binary container with a wrong magic or truncated payload."""

    code = "FormatError"
