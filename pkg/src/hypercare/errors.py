"""Exception hierarchy shared by every hypercare module."""


class HypercareError(Exception):
    """Base class for all library errors."""


# cohort
class CohortError(HypercareError):
    pass


class EmptyCohort(CohortError):
    pass


class UnknownCode(CohortError):
    pass


class RaggedLabels(CohortError):
    pass


class MalformedRecord(CohortError):
    pass


class EmptyAfterMask(CohortError):
    pass


class InfeasibleConfig(CohortError):
    pass


class ConfigMismatch(CohortError):
    pass


# hypergraph
class GraphError(HypercareError):
    pass


class EmptyGraph(GraphError):
    pass


class EmptyGroup(GraphError):
    pass


# numerics / model
class ShapeMismatch(HypercareError, ValueError):
    pass


class NotScalarLoss(HypercareError, ValueError):
    pass


class NonDeterministicLoss(HypercareError):
    pass


class InvalidConfig(HypercareError, ValueError):
    pass


class ShrinkNotAllowed(HypercareError, ValueError):
    pass


class EmptySet(HypercareError, ValueError):
    pass


class UninitializedState(HypercareError):
    pass


# eval
class DegenerateColumn(HypercareError, ValueError):
    pass


class EmptyTrainingSet(HypercareError):
    pass


# cli / config
class ConfigError(HypercareError):
    """Raised for any problem in a run configuration; maps to exit code 2."""


class UnknownKey(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


class InvalidValue(ConfigError):
    pass
