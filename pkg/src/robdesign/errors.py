"""Exception types shared across the package."""


class RobdesignError(Exception):
    """Base class for all package-specific failures."""


class NotSPD(RobdesignError):
    """A matrix required to be symmetric positive definite is not (a
    Cholesky pivot fell at or below the ridge floor)."""


class SingularSigma(RobdesignError):
    """Empirical second-moment matrix of the covariates failed the SPD check."""


class DegenerateDesign(RobdesignError):
    """An allocation puts the objective outside its domain (e.g. the
    residual allocation norm a'P a hit the floor, or a group Gram matrix
    went singular). Signals an unidentifiable treatment effect."""


class SingularDesign(RobdesignError):
    """OLS design matrix is rank deficient."""


class HorizonExceeded(RobdesignError):
    """More allocation steps (or days) requested than the declared horizon."""


class NonFiniteLoss(RobdesignError):
    """Training loss became NaN/Inf; carries diagnostics in the message."""


class InsufficientData(RobdesignError):
    """Too many synthetic rollouts were discarded to fit a value function."""


class ConfigError(RobdesignError):
    """Experiment configuration file is missing fields or malformed."""


class RankDeficientWarning(UserWarning):
    """Numerical rank of a moment matrix fell below its nominal column count.

    Non-fatal: the null-space basis simply gains extra columns.
    """
