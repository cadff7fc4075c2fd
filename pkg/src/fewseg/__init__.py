"""Few-shot meta-learning for binary cell segmentation.

Episodic training over multiple source domains with a three-term objective
(weighted BCE, cross-task entropy regularization, cross-task latent
distillation), Reptile-style meta-updates, K-shot fine-tuning on a held-out
target domain, a transfer-learning baseline, and a leave-one-dataset-out
evaluation protocol.
"""

from fewseg.errors import (
    ConfigurationError,
    IngestionError,
    TrainingError,
)

__all__ = ["ConfigurationError", "IngestionError", "TrainingError"]

__version__ = "0.1.0"
