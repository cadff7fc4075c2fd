"""Episodic meta-training: inner adaptation per source task plus the
first-order meta-update

    theta <- theta + epsilon * mean_m(theta'_m - theta)

Each episode iterates over all source domains; task m trains on a labeled
K-shot batch while sibling tasks n (entropy) and p (distillation) contribute
unlabeled batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from fewseg.data import DomainDataset, TaskBatch, sample_task
from fewseg.errors import ConfigurationError, TrainingError
from fewseg.losses import LossBreakdown, LossWeights, compute_composite
from fewseg.models import (
    NetworkSpec,
    ParameterVector,
    build_network,
    get_parameters,
    parameter_groups,
    set_parameters,
)


@dataclass(frozen=True)
class MetaConfig:
    outer_iterations: int = 100
    inner_steps: int = 5
    K: int = 5
    epsilon: float = 1.0
    inner_lr: float = 0.001
    inner_weight_decay: float = 0.0005
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    inner_optimizer: str = "adam"  # "adam" | "sgd" (sgd is the test config)

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in (0, 1]")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass(frozen=True)
class TaskTriple:
    m: int
    n: int
    p: int


@dataclass(frozen=True)
class EpisodeLog:
    iteration: int
    breakdowns: tuple[LossBreakdown, ...]
    meta_update_norm: float


def sample_task_triple(num_sources: int, m: int, rng) -> TaskTriple:
    """Draw sibling tasks n, p uniformly from the other sources (n=p allowed)."""
    if num_sources < 2:
        raise ConfigurationError("meta-training needs at least 2 source domains")
    others = [i for i in range(num_sources) if i != m]
    n = others[int(rng.integers(len(others)))]
    p = others[int(rng.integers(len(others)))]
    return TaskTriple(m=m, n=n, p=p)


def _make_inner_optimizer(model, config: MetaConfig):
    groups = parameter_groups(model, config.inner_weight_decay, include_bn_affine=False)
    if config.inner_optimizer == "adam":
        return torch.optim.Adam(groups, lr=config.inner_lr)
    if config.inner_optimizer == "sgd":
        return torch.optim.SGD(groups, lr=config.inner_lr)
    raise ConfigurationError(f"unknown inner optimizer {config.inner_optimizer!r}")


def inner_adapt(theta: ParameterVector, batches, config: MetaConfig, model) -> ParameterVector:
    """Adapt theta to one task; theta itself is never mutated."""
    adapted, _ = _inner_adapt_logged(theta, batches, config, model)
    return adapted


def _inner_adapt_logged(theta, batches, config, model):
    batch_m, batch_n, batch_p = batches
    set_parameters(model, theta)
    optimizer = _make_inner_optimizer(model, config)
    breakdown = None
    for _ in range(config.inner_steps):
        optimizer.zero_grad()
        total, breakdown = compute_composite(
            model, batch_m, batch_n, batch_p, config.loss_weights, train=True
        )
        if not math.isfinite(breakdown.total):
            raise TrainingError(f"non-finite composite loss: {breakdown}")
        total.backward()
        optimizer.step()
    return get_parameters(model), breakdown


def meta_update(theta: ParameterVector, task_params, epsilon: float) -> ParameterVector:
    """theta + epsilon * mean(theta'_m - theta), element-wise and exact."""
    if not task_params:
        raise ValueError("task_params must be non-empty")
    if epsilon == 1.0 and len(task_params) == 1:
        # Algebraic identity; avoids the one-ulp drift of theta + (theta' - theta).
        theta._check_compatible(task_params[0])
        return task_params[0]
    delta = None
    for tp in task_params:
        d = tp - theta
        delta = d if delta is None else delta + d
    return theta + delta.scale(epsilon / len(task_params))


def meta_train(sources, spec: NetworkSpec, config: MetaConfig, model=None):
    """Run the full episodic loop; returns (final theta, episode logs).

    Passing ``model`` trains that instance in place, so the caller keeps the
    accumulated batch-norm running statistics for evaluation.
    """
    if len(sources) < 2:
        raise ConfigurationError("meta-training needs at least 2 source domains")
    for src in sources:
        if len(src) < config.K:
            raise ConfigurationError(
                f"source {src.domain_id} has {len(src)} samples, fewer than K={config.K}"
            )
    if model is None:
        model, theta = build_network(spec, seed=config.seed)
    else:
        theta = get_parameters(model)
    rng = np.random.default_rng(config.seed)
    logs: list[EpisodeLog] = []
    for iteration in range(config.outer_iterations):
        task_params = []
        breakdowns = []
        for m in range(len(sources)):
            triple = sample_task_triple(len(sources), m, rng)
            batch_m = sample_task(sources[m], config.K, labeled=True, rng=rng)
            batch_n = sample_task(sources[triple.n], config.K, labeled=False, rng=rng)
            batch_p = sample_task(sources[triple.p], config.K, labeled=False, rng=rng)
            try:
                adapted, breakdown = _inner_adapt_logged(
                    theta, (batch_m, batch_n, batch_p), config, model
                )
            except TrainingError as exc:
                exc.episode_logs = logs
                raise
            task_params.append(adapted)
            breakdowns.append(breakdown)
        new_theta = meta_update(theta, task_params, config.epsilon)
        logs.append(
            EpisodeLog(
                iteration=iteration,
                breakdowns=tuple(breakdowns),
                meta_update_norm=(new_theta - theta).norm(),
            )
        )
        theta = new_theta
    set_parameters(model, theta)
    return theta, logs


def weights_for_method(method: str) -> LossWeights:
    """Loss-weight presets for the four meta-training ablations."""
    presets = {
        "ML_BCE": LossWeights(0.0, 0.0),
        "ML_BCE_ER": LossWeights(0.1, 0.0),
        "ML_BCE_D": LossWeights(0.0, 0.01),
        "ML_FULL": LossWeights(0.01, 0.01),
    }
    if method not in presets:
        raise ConfigurationError(f"unknown meta-learning method {method!r}")
    return presets[method]
