# errors.py
"""
Exception hierarchy for plume-ste-lab
"""
from typing import Optional


class PlumeSteError(Exception):
    """Base class for all simulator errors"""

    exit_code = 1


class DomainError(PlumeSteError, ValueError):
    """Argument outside the mathematical domain of a function"""


class ConfigurationError(PlumeSteError, ValueError):
    """Invalid or inconsistent configuration"""

    exit_code = 1


class UpdateError(PlumeSteError):
    """Bayes update with zero evidence (impossible observation)"""


class ContractViolation(PlumeSteError):
    """Caller broke an operation's precondition"""


class EpisodeOverError(ContractViolation):
    """Step requested after the episode horizon was reached"""


class TrainingError(PlumeSteError):
    """Training diverged"""

    exit_code = 3

    def __init__(self, message: str, episode: Optional[int] = None):
        self.episode = episode
        if episode is not None:
            message = f"{message} (episode {episode})"
        super().__init__(message)


class CheckpointError(PlumeSteError):
    """Malformed, truncated or mismatched checkpoint"""

    exit_code = 2

    def __init__(self, message: str, layer: Optional[int] = None, offset: Optional[int] = None):
        self.layer = layer
        self.offset = offset
        context = []
        if layer is not None:
            context.append(f"layer {layer}")
        if offset is not None:
            context.append(f"offset {offset}")
        if context:
            message = f"{message} [{', '.join(context)}]"
        super().__init__(message)


class OracleGuardError(PlumeSteError):
    """Exhaustive search tree exceeds the configured leaf limit"""

    exit_code = 4
