from enum import Enum, IntEnum, unique


@unique
class Arm(IntEnum):
    """
    Treatment arm indicator.
    """
    control = 0
    experimental = 1


@unique
class LinkKind(Enum):
    """
    Enum for the link functions defining the estimand g(mu1) - g(mu0).
    """
    identity = "Identity"
    log = "Log"
    logit = "Logit"


@unique
class DesignClass(Enum):
    """
    Enum for randomization classes.
    """
    # Covariate-independent randomization, constant probability
    cir = "CIR"
    # Covariate-dependent randomization, propensity score p(W)
    cdr = "CDR"


@unique
class VarianceModel(Enum):
    """
    Enum for how conditional variances are estimated at an interim analysis.
    """
    empirical = "Empirical"
    logistic_working = "LogisticWorking"


@unique
class WorkingModelLayout(Enum):
    """
    Enum for the design matrix layout of a logistic working model.
    """
    # [1, a, x..., a*x...]
    interaction = "Interaction"
    # [1, a, x...]
    main_effects = "MainEffects"


@unique
class EstimatorKind(Enum):
    """
    Enum for treatment effect estimators.
    """
    simple = "Simple"
    optimized = "Optimized"


@unique
class OutcomeKind(Enum):
    """
    Enum for outcome types produced by a population.
    """
    binary = "Binary"


@unique
class StageVarianceKind(Enum):
    """
    Enum for the stage variance components behind the optimized stage weights.
    """
    # Sample variance of the influence term over the stage's own records
    stage_empirical = "StageEmpirical"
    # Model-based variance averaged over the covariates of every stage
    pooled_model = "PooledModel"
