"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes (see ``cli.EXIT_CODES``).
"""


class SpectralCMMError(Exception):
    pass


class InvalidInput(SpectralCMMError, ValueError):
    pass


class NumericalFailure(SpectralCMMError, ArithmeticError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DegenerateMatrix(SpectralCMMError, ValueError):
    pass


class DegenerateInput(SpectralCMMError, ValueError):
    pass


class InfeasibleConstraint(SpectralCMMError, ValueError):
    pass


class Unsupported(SpectralCMMError, NotImplementedError):
    pass


class Refused(SpectralCMMError, FileExistsError):
    pass
