"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class FusionError(Exception):
    exit_code = 1


class ConfigError(FusionError):
    exit_code = 1


class InvalidSpec(ConfigError):
    pass


class FormatError(FusionError):
    exit_code = 2


class AssociationError(FusionError):
    exit_code = 3


class DescriptorLengthMismatch(AssociationError):
    pass


class DimensionMismatch(AssociationError):
    pass


class MissingNormals(AssociationError):
    pass


class CountExceedsCloud(AssociationError):
    pass


class DisconnectedGraph(AssociationError):
    def __init__(self, components):
        self.components = [list(c) for c in components]
        super().__init__(f"pose graph is not connected; components: {self.components}")


class SolverError(FusionError):
    exit_code = 4


class NonPositiveDepth(SolverError):
    pass


class Diverged(SolverError):
    pass


class SingularNormalEquations(SolverError):
    def __init__(self, blocks, report=None):
        self.blocks = list(blocks)
        self.report = report
        super().__init__("normal equations are singular; unconstrained blocks: "
                         + ", ".join(self.blocks))


class AllObservationsGated(SolverError):
    pass


class EvaluationError(FusionError):
    exit_code = 5


class NoCorrespondences(EvaluationError):
    pass


class EmptyInput(EvaluationError):
    pass


class NotConverged(EvaluationError):
    pass
