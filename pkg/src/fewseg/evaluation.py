"""K-shot fine-tuning, the transfer-learning baseline, IoU evaluation and
the leave-one-dataset-out protocol with repeated shot selections."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from fewseg.data import (
    CropSpec,
    DomainDataset,
    Sample,
    crop_training_set,
    foreground_weight,
    select_shots,
)
from fewseg.errors import ConfigurationError, TrainingError
from fewseg.losses import weighted_bce
from fewseg.meta import MetaConfig, meta_train, weights_for_method
from fewseg.models import (
    NetworkSpec,
    ParameterVector,
    build_network,
    forward,
    get_buffers,
    get_parameters,
    parameter_groups,
    set_buffers,
    set_parameters,
)

METHODS = ("ML_BCE", "ML_BCE_ER", "ML_BCE_D", "ML_FULL", "TRANSFER")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    lr: float = 0.0001
    weight_decay: float = 0.0005
    binarize_threshold: float = 0.5
    # Shots larger than this are grid-cropped into tiles before fine-tuning;
    # None uses the full images.
    shot_crop: int | None = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0.0 < self.binarize_threshold < 1.0):
            raise ValueError("binarize_threshold must be in (0,1)")


@dataclass(frozen=True)
class TransferConfig:
    epochs: int = 200
    batch_size: int = 5
    lr: float = 0.001
    weight_decay: float = 0.0005
    seed: int = 0
    max_steps: int | None = None  # cap on gradient steps for budget matching


@dataclass(frozen=True)
class ExperimentResult:
    method: str
    target_domain_id: str
    K: int
    repeat_ious: tuple[float, ...]
    mean_iou: float
    std_iou: float

    @staticmethod
    def from_repeats(method, target_domain_id, K, repeat_ious) -> "ExperimentResult":
        arr = np.asarray(repeat_ious, dtype=np.float64)
        return ExperimentResult(
            method=method,
            target_domain_id=target_domain_id,
            K=K,
            repeat_ious=tuple(float(v) for v in arr),
            mean_iou=float(arr.mean()),
            std_iou=float(arr.std()),  # population std
        )


def derive_seed(base: int, *tags) -> int:
    """Stable per-cell seed so results do not depend on execution order."""
    key = ":".join([str(base), *map(str, tags)]).encode()
    return zlib.crc32(key)


def _shot_tiles(shots, crop_size: int | None):
    """Grid-crop shots that exceed the tile size; smaller shots pass through."""
    if crop_size is None:
        return list(shots)
    tiles = []
    for s in shots:
        if s.image.shape[0] > crop_size or s.image.shape[1] > crop_size:
            ds = DomainDataset(
                domain_id=s.domain_id, cell_type="shots", samples=(s,),
                native_resolution=s.image.shape, role="target",
            )
            tiles.extend(crop_training_set(ds, CropSpec(size=crop_size, strategy="grid")).samples)
        else:
            tiles.append(s)
    return tiles


def _bce_step_loss(model, samples, train: bool = True):
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"fine-tuning tiles mix shapes {shapes}")
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float64))[:, None]
    preds = model.predict_batch(images, train=train)
    masks = [torch.from_numpy(s.mask.astype(np.float64)) for s in samples]
    ws = [foreground_weight(s.mask) for s in samples]
    return weighted_bce(list(preds), masks, ws)


def fine_tune(theta: ParameterVector, shots, config: FinetuneConfig, model) -> ParameterVector:
    """Full-batch weighted-BCE fine-tuning on the K shots."""
    if not shots:
        raise ValueError("shots must be non-empty")
    for s in shots:
        if s.mask is None:
            raise ValueError(f"shot {s.id} carries no mask")
    tiles = _shot_tiles(shots, config.shot_crop)
    set_parameters(model, theta)
    groups = parameter_groups(
        model, config.weight_decay, include_bn_affine=model.spec.bn_policy.finetune_affine
    )
    optimizer = torch.optim.Adam(groups, lr=config.lr)
    for _ in range(config.epochs):
        optimizer.zero_grad()
        loss = _bce_step_loss(model, tiles, train=True)
        if not math.isfinite(loss.detach().item()):
            raise TrainingError("non-finite fine-tuning loss")
        loss.backward()
        optimizer.step()
    return get_parameters(model)


def transfer_train(sources, spec: NetworkSpec, config: TransferConfig, model=None) -> ParameterVector:
    """Pooled supervised baseline: weighted BCE over shuffled crops of all
    sources, no episodes, no regularizers; BN affine frozen as in
    meta-training."""
    if not sources:
        raise ConfigurationError("transfer training needs at least 1 source")
    if model is None:
        model, _ = build_network(spec, seed=config.seed)
    pooled = [s for src in sources for s in src.samples]
    rng = np.random.default_rng(config.seed)
    groups = parameter_groups(model, config.weight_decay, include_bn_affine=False)
    optimizer = torch.optim.Adam(groups, lr=config.lr)
    steps = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(pooled))
        for start in range(0, len(pooled), config.batch_size):
            batch = [pooled[i] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            loss = _bce_step_loss(model, batch, train=True)
            if not math.isfinite(loss.detach().item()):
                raise TrainingError("non-finite transfer-training loss")
            loss.backward()
            optimizer.step()
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                return get_parameters(model)
    return get_parameters(model)


def iou(prediction: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> float:
    """Foreground intersection-over-union of the binarized prediction.

    Both-empty counts as perfect agreement (1.0)."""
    if prediction.shape != mask.shape:
        raise ValueError(f"shape mismatch {prediction.shape} vs {mask.shape}")
    pred = prediction > threshold
    gt = mask.astype(bool)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def evaluate(theta: ParameterVector, test_set, model, threshold: float = 0.5) -> float:
    """Mean per-image IoU at native resolution, in evaluation mode."""
    if not test_set:
        raise ValueError("test set must be non-empty")
    set_parameters(model, theta)
    scores = []
    for s in test_set:
        pred = forward(model, None, s.image, train_mode=False)
        scores.append(iou(pred, s.mask, threshold))
    return float(np.mean(scores))


def _train_for_method(method, sources, spec, meta_config, transfer_config, model):
    if method == "TRANSFER":
        return transfer_train(sources, spec, transfer_config, model=model)
    from dataclasses import replace

    cfg = replace(meta_config, loss_weights=weights_for_method(method))
    theta, _ = meta_train(sources, spec, cfg, model=model)
    return theta


def run_cell(theta, model, target, K, repeats, finetune_config, seed):
    """Fine-tune and evaluate `repeats` shot selections from one trained theta.

    Every repeat restarts from the identical parameter and buffer snapshot, so
    repeat variance reflects shot selection only."""
    selections = select_shots(target, K, repeats=repeats, seed=seed)
    buffers = get_buffers(model)
    ious = []
    for sel in selections:
        assert not set(sel.shot_ids) & set(sel.test_ids)
        set_buffers(model, buffers)
        shots = [target.by_id(i) for i in sel.shot_ids]
        adapted = fine_tune(theta, shots, finetune_config, model)
        test = [target.by_id(i) for i in sel.test_ids]
        ious.append(evaluate(adapted, test, model, finetune_config.binarize_threshold))
    set_buffers(model, buffers)
    return ious, selections


def leave_one_out(
    datasets,
    method: str,
    spec: NetworkSpec,
    meta_config: MetaConfig,
    finetune_config: FinetuneConfig,
    K_grid=(1, 3, 5, 7, 10),
    repeats: int = 10,
    transfer_config: TransferConfig | None = None,
    targets=None,
):
    """Rotate each dataset as the target (or only the named ``targets``),
    train on the rest, then sweep the K grid with repeated shot selections."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    if len(datasets) < 2:
        raise ConfigurationError("the protocol needs at least 2 datasets")
    max_k = max(K_grid)
    for ds in datasets:
        if len(ds) < max_k + 1:
            raise ConfigurationError(
                f"dataset {ds.domain_id} has {len(ds)} samples; needs > max K = {max_k}"
            )
    if transfer_config is None:
        transfer_config = TransferConfig(seed=meta_config.seed)
    target_ids = targets if targets is not None else [d.domain_id for d in datasets]

    results = []
    for target in datasets:
        if target.domain_id not in target_ids:
            continue
        sources = [d for d in datasets if d.domain_id != target.domain_id]
        model, _ = build_network(spec, seed=meta_config.seed)
        theta = _train_for_method(method, sources, spec, meta_config, transfer_config, model)
        for K in K_grid:
            # Method-independent derivation: all methods see the same shot
            # selections, so comparisons are paired.
            cell_seed = derive_seed(meta_config.seed, target.domain_id, K)
            ious, _ = run_cell(theta, model, target, K, repeats, finetune_config, cell_seed)
            results.append(
                ExperimentResult.from_repeats(method, target.domain_id, K, ious)
            )
    return results
