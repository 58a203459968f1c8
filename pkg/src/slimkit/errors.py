"""Exception hierarchy shared by all slimkit modules.

Every error carries an ``exit_code`` used by the CLI: 2 for configuration
problems, 3 for data problems, 4 for infeasible budgets. Property violations
(exit 1) are raised as ``VerificationFailure`` by the verify suites.
"""


class SlimkitError(Exception):
    exit_code = 3


class ConfigError(SlimkitError):
    exit_code = 2


class RankOutOfRange(ConfigError):
    pass


class BudgetInfeasible(SlimkitError):
    exit_code = 4


class InvalidMatrix(SlimkitError):
    pass


class NotSymmetric(SlimkitError):
    pass


class ShapeError(SlimkitError):
    pass


class MergeKeyError(SlimkitError):
    pass


class EmptyAccumulator(SlimkitError):
    pass


class DegenerateInput(SlimkitError):
    pass


class WhiteningSingular(SlimkitError):
    pass


class ManifestError(SlimkitError):
    pass


class SizeMismatch(SlimkitError):
    pass


class UnsupportedVersion(SlimkitError):
    pass


class MissingStatistics(SlimkitError):
    pass


class PlanMismatch(SlimkitError):
    pass


class VerificationFailure(SlimkitError):
    exit_code = 1
