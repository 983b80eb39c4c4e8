"""Exception hierarchy for the rollout engine."""


class TreePSError(Exception):
    """Base class for all engine errors."""


class ConfigError(TreePSError, ValueError):
    """Invalid configuration value."""


class DepthLimitExceeded(TreePSError):
    pass


class InvalidParentCount(TreePSError, ValueError):
    pass


class InvalidK(TreePSError, ValueError):
    pass


class MalformedGeneration(TreePSError):
    """Generated text contains neither a complete search nor answer tag pair."""


class PolicyFailure(TreePSError):
    """The policy could not produce a step (timeout, transport, parse failure)."""


class RetrieverFailure(TreePSError):
    pass


class MissingReward(TreePSError, KeyError):
    pass


class OrphanInternal(TreePSError):
    """A retained internal node ended up with no descendant leaves."""


class MissingAdvantage(TreePSError, KeyError):
    pass


class EmptyPaths(TreePSError, ValueError):
    pass


class UnknownTemplate(TreePSError, KeyError):
    pass


class StaleSnapshot(TreePSError):
    """Experience was collected under a different rollout policy than the snapshot's."""
