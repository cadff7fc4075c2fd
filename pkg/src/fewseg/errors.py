"""Exception types shared across the package."""


class IngestionError(Exception):
    """Raised when a dataset on disk is missing files or malformed."""


class ConfigurationError(Exception):
    """Raised for invalid run configurations (bad grids, too-small datasets)."""


class TrainingError(Exception):
    """Raised when optimization diverges (non-finite loss).

    Carries the episode log collected so far, when available.
    """

    def __init__(self, message, episode_logs=None):
        super().__init__(message)
        self.episode_logs = episode_logs or []
