"""Segmentation networks, parameter-vector access and checkpointing.

Two fully-convolutional encoder-decoder architectures:

FCRN (depth d, base width w) -- 2d+2 weighted layers:
    encoder stage i:  Conv3x3(-> w*2^i) + BN + ReLU + MaxPool2
    bottleneck:       Conv3x3(-> w*2^d) + BN + ReLU        <- latent tap
    decoder stage i:  ConvTranspose2x2 stride 2 (halve channels) + BN + ReLU
    head:             Conv1x1(-> 1) + sigmoid

UNetLight (depth 3, base width 32) -- 12 weighted layers:
    encoder stage i:  Conv3x3(-> w*2^i) + BN + ReLU, then MaxPool2   (3 convs)
    bottleneck:       2 x [Conv3x3(-> w*2^d) + BN + ReLU]            (2 convs)
    decoder stage i:  ConvTranspose2x2 + skip concat + Conv3x3 + BN + ReLU
                                                                     (6 layers)
    head:             Conv1x1(-> 1) + sigmoid                        (1 layer)

Both end in a sigmoid clamped to [EPS_P, 1-EPS_P].  Inputs of arbitrary size
are reflection-padded to the next multiple of 2^depth and the output is
cropped back.  All computation is in float64 for exact reproducibility.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Probability clamp shared with the losses module.
EPS_P = 1e-7

ARCHITECTURES = ("FCRN", "UNetLight")


@dataclass(frozen=True)
class BatchNormPolicy:
    # During meta-training only batch statistics are used; scale/bias are
    # excluded from learning.
    meta_train_mode: str = "stats_only"
    finetune_affine: bool = True


@dataclass(frozen=True)
class NetworkSpec:
    architecture: str = "FCRN"
    input_channels: int = 1
    base_width: int = 32
    depth: int = 3
    latent_tap: str = "bottleneck"
    bn_policy: BatchNormPolicy = field(default=None)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unsupported architecture {self.architecture!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.latent_tap != "bottleneck":
            raise ValueError("only the bottleneck latent tap is supported")
        if self.bn_policy is None:
            # FCRN learns BN affine during fine-tuning; UNetLight does not.
            object.__setattr__(
                self, "bn_policy", BatchNormPolicy(finetune_affine=self.architecture == "FCRN")
            )

    def to_json(self) -> dict:
        return {
            "architecture": self.architecture,
            "input_channels": self.input_channels,
            "base_width": self.base_width,
            "depth": self.depth,
            "latent_tap": self.latent_tap,
            "bn_policy": {
                "meta_train_mode": self.bn_policy.meta_train_mode,
                "finetune_affine": self.bn_policy.finetune_affine,
            },
        }

    @staticmethod
    def from_json(d: dict) -> "NetworkSpec":
        bp = d.get("bn_policy") or {}
        return NetworkSpec(
            architecture=d["architecture"],
            input_channels=d.get("input_channels", 1),
            base_width=d.get("base_width", 32),
            depth=d.get("depth", 3),
            latent_tap=d.get("latent_tap", "bottleneck"),
            bn_policy=BatchNormPolicy(
                meta_train_mode=bp.get("meta_train_mode", "stats_only"),
                finetune_affine=bp.get("finetune_affine", True),
            ),
        )


class ParameterVector:
    """Ordered, named snapshot of all learnable parameters.

    Supports exact element-wise linear algebra; tensors are detached float64
    clones, immutable by convention.
    """

    def __init__(self, items):
        self.names = tuple(name for name, _ in items)
        self.tensors = tuple(t.detach().clone().double() for _, t in items)

    def items(self):
        return zip(self.names, self.tensors)

    def _check_compatible(self, other: "ParameterVector"):
        if self.names != other.names:
            raise ValueError("parameter vectors have different names/order")
        for a, b in zip(self.tensors, other.tensors):
            if a.shape != b.shape:
                raise ValueError("parameter vectors have mismatched shapes")

    def __add__(self, other: "ParameterVector") -> "ParameterVector":
        self._check_compatible(other)
        return ParameterVector(
            [(n, a + b) for n, a, b in zip(self.names, self.tensors, other.tensors)]
        )

    def __sub__(self, other: "ParameterVector") -> "ParameterVector":
        self._check_compatible(other)
        return ParameterVector(
            [(n, a - b) for n, a, b in zip(self.names, self.tensors, other.tensors)]
        )

    def scale(self, factor: float) -> "ParameterVector":
        return ParameterVector([(n, t * factor) for n, t in self.items()])

    __mul__ = scale
    __rmul__ = scale

    def interpolate(self, other: "ParameterVector", eps: float) -> "ParameterVector":
        """self + eps*(other - self), exact at the endpoints eps=0 and eps=1."""
        if eps == 0.0:
            return self
        if eps == 1.0:
            return other
        return self + (other - self).scale(eps)

    def norm(self) -> float:
        return float(torch.sqrt(sum((t**2).sum() for t in self.tensors)))

    def equal(self, other: "ParameterVector") -> bool:
        self._check_compatible(other)
        return all(torch.equal(a, b) for a, b in zip(self.tensors, other.tensors))

    def allclose(self, other: "ParameterVector", rtol=1e-9, atol=1e-12) -> bool:
        self._check_compatible(other)
        return all(
            torch.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self.tensors, other.tensors)
        )


def _pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflection-pad (N,C,H,W) so H and W are multiples of ``multiple``."""
    h, w = x.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    return x, (h, w)


class _SegmentationNetwork(nn.Module):
    """Shared padding/clamping plumbing for both architectures."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec

    def features(self, x):  # -> (pre-sigmoid logits, latent)
        raise NotImplementedError

    def predict_batch(self, images: torch.Tensor, train: bool) -> torch.Tensor:
        probs, _ = self.predict_with_latent_batch(images, train)
        return probs

    def predict_with_latent_batch(self, images: torch.Tensor, train: bool):
        """Forward a (N,C,H,W) batch; returns clamped probabilities (N,H,W)
        and the bottleneck latent (N,C_l,h,w)."""
        if not torch.isfinite(images).all():
            raise ValueError("non-finite values in input batch")
        self.train(train)
        padded, (h, w) = _pad_to_multiple(images, 2**self.spec.depth)
        logits, latent = self.features(padded)
        probs = torch.clamp(torch.sigmoid(logits), EPS_P, 1.0 - EPS_P)
        return probs[:, 0, :h, :w], latent


def _conv_bn(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class FCRN(_SegmentationNetwork):
    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        w, d = spec.base_width, spec.depth
        widths = [w * 2**i for i in range(d + 1)]
        self.encoder = nn.ModuleList(
            [_conv_bn(spec.input_channels if i == 0 else widths[i - 1], widths[i]) for i in range(d)]
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_bn(widths[d - 1], widths[d])
        self.decoder = nn.ModuleList(
            [
                nn.Sequential(
                    nn.ConvTranspose2d(widths[d - i], widths[d - i - 1], 2, stride=2),
                    nn.BatchNorm2d(widths[d - i - 1]),
                    nn.ReLU(inplace=True),
                )
                for i in range(d)
            ]
        )
        self.head = nn.Conv2d(w, 1, 1)

    def features(self, x):
        for stage in self.encoder:
            x = self.pool(stage(x))
        latent = self.bottleneck(x)
        x = latent
        for stage in self.decoder:
            x = stage(x)
        return self.head(x), latent


class UNetLight(_SegmentationNetwork):
    def __init__(self, spec: NetworkSpec):
        super().__init__(spec)
        w, d = spec.base_width, spec.depth
        widths = [w * 2**i for i in range(d + 1)]
        self.encoder = nn.ModuleList(
            [_conv_bn(spec.input_channels if i == 0 else widths[i - 1], widths[i]) for i in range(d)]
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = nn.Sequential(
            _conv_bn(widths[d - 1], widths[d]), _conv_bn(widths[d], widths[d])
        )
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose2d(widths[d - i], widths[d - i - 1], 2, stride=2) for i in range(d)]
        )
        self.decoder = nn.ModuleList(
            [_conv_bn(widths[d - i], widths[d - i - 1]) for i in range(d)]
        )
        self.head = nn.Conv2d(w, 1, 1)

    def features(self, x):
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        latent = self.bottleneck(x)
        x = latent
        for up, stage, skip in zip(self.upsamplers, self.decoder, reversed(skips)):
            x = up(x)
            x = stage(torch.cat([skip, x], dim=1))
        return self.head(x), latent


def count_weighted_layers(model: nn.Module) -> int:
    return sum(
        1 for m in model.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))
    )


def _init_weights(model: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            # He fan-in scaling; ConvTranspose weight is (in, out, k, k).
            fan_in = m.weight.shape[1 if isinstance(m, nn.Conv2d) else 0] * m.weight.shape[2] * m.weight.shape[3]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=torch.float64) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_network(spec: NetworkSpec, seed: int = 0):
    """Construct a network with deterministic initialization.

    Returns (model, initial ParameterVector).
    """
    cls = {"FCRN": FCRN, "UNetLight": UNetLight}[spec.architecture]
    model = cls(spec).double()
    _init_weights(model, seed)
    return model, get_parameters(model)


def get_parameters(model: nn.Module) -> ParameterVector:
    return ParameterVector(list(model.named_parameters()))


def set_parameters(model: nn.Module, theta: ParameterVector) -> None:
    current = dict(model.named_parameters())
    if tuple(current.keys()) != theta.names:
        raise ValueError("parameter names do not match this model")
    with torch.no_grad():
        for name, tensor in theta.items():
            if current[name].shape != tensor.shape:
                raise ValueError(f"shape mismatch for parameter {name}")
            current[name].copy_(tensor)


def get_buffers(model: nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(n, b.detach().clone()) for n, b in model.named_buffers()]


def set_buffers(model: nn.Module, buffers) -> None:
    current = dict(model.named_buffers())
    for name, tensor in buffers:
        current[name].copy_(tensor)


def bn_parameter_names(model: nn.Module) -> set[str]:
    names = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, nn.BatchNorm2d):
            names.add(f"{mod_name}.weight")
            names.add(f"{mod_name}.bias")
    return names


def parameter_groups(model: nn.Module, weight_decay: float, include_bn_affine: bool):
    """Optimizer groups: weight decay on conv weights only; BN scale/bias
    optionally included (without decay)."""
    bn_names = bn_parameter_names(model)
    decayed, undecayed, bn_affine = [], [], []
    for name, p in model.named_parameters():
        if name in bn_names:
            bn_affine.append(p)
        elif name.endswith(".bias"):
            undecayed.append(p)
        else:
            decayed.append(p)
    groups = [
        {"params": decayed, "weight_decay": weight_decay},
        {"params": undecayed, "weight_decay": 0.0},
    ]
    if include_bn_affine:
        groups.append({"params": bn_affine, "weight_decay": 0.0})
    return groups


def _to_batch(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None, None]


def forward(model, theta: ParameterVector | None, image: np.ndarray, train_mode: bool = False) -> np.ndarray:
    """Single-image forward pass; returns an (H,W) probability map."""
    if theta is not None:
        set_parameters(model, theta)
    with torch.no_grad():
        probs = model.predict_batch(_to_batch(image), train=train_mode)
    return probs[0].numpy()


def forward_with_latent(model, theta, image, train_mode: bool = False):
    if theta is not None:
        set_parameters(model, theta)
    with torch.no_grad():
        probs, latent = model.predict_with_latent_batch(_to_batch(image), train=train_mode)
    return probs[0].numpy(), latent[0].numpy()


def save_checkpoint(model: nn.Module, path) -> None:
    """Archive: spec JSON plus named parameter/buffer arrays; bit-exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("spec.json", json.dumps(model.spec.to_json(), indent=2))
        for kind, items in (("param", model.named_parameters()), ("buffer", model.named_buffers())):
            for name, tensor in items:
                buf = io.BytesIO()
                np.save(buf, tensor.detach().numpy())
                zf.writestr(f"{kind}/{name}.npy", buf.getvalue())


def load_checkpoint(path):
    """Rebuild a model from a checkpoint archive; returns (model, theta)."""
    with zipfile.ZipFile(Path(path), "r") as zf:
        spec = NetworkSpec.from_json(json.loads(zf.read("spec.json")))
        model, _ = build_network(spec, seed=0)
        params = dict(model.named_parameters())
        buffers = dict(model.named_buffers())
        with torch.no_grad():
            for entry in zf.namelist():
                if entry == "spec.json":
                    continue
                kind, name = entry.split("/", 1)
                name = name[: -len(".npy")]
                arr = np.load(io.BytesIO(zf.read(entry)))
                target = params[name] if kind == "param" else buffers[name]
                target.copy_(torch.from_numpy(arr))
    return model, get_parameters(model)
