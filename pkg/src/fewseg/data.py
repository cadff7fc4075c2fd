"""Dataset ingestion, synthetic domain generation, cropping and shot sampling.

A domain is one microscopy dataset (one cell type / image appearance).  On
disk a domain lives at ``<root>/<domain_id>/images/<stem>.{png|tif}`` with
masks of the same stem under ``masks/`` and a ``manifest.json`` holding
``{domain_id, cell_type, channels, mask_threshold}``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from fewseg.errors import IngestionError

# Cap for the background/foreground ratio when a mask has no foreground.
W_MAX = 1000.0

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


@dataclass(frozen=True, eq=False)
class Sample:
    """One image/mask pair. ``mask`` is None for unlabeled use."""

    image: np.ndarray
    mask: np.ndarray | None
    id: str
    domain_id: str

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"image for {self.id} must be 2-D, got {self.image.ndim}-D")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError(
                    f"mask shape {self.mask.shape} != image shape {self.image.shape} for {self.id}"
                )
            vals = np.unique(self.mask)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError(f"mask for {self.id} is not binary: values {vals[:5]}")

    def without_mask(self) -> "Sample":
        return Sample(image=self.image, mask=None, id=self.id, domain_id=self.domain_id)


@dataclass(frozen=True)
class DomainDataset:
    domain_id: str
    cell_type: str
    samples: tuple[Sample, ...]
    native_resolution: tuple[int, int]
    role: str = "source"  # "source" | "target"

    def __post_init__(self):
        if not self.samples:
            raise ValueError(f"domain {self.domain_id} has no samples")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate sample ids in domain {self.domain_id}")
        for s in self.samples:
            if s.domain_id != self.domain_id:
                raise ValueError(
                    f"sample {s.id} has domain_id {s.domain_id!r}, expected {self.domain_id!r}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


@dataclass(frozen=True)
class TaskBatch:
    """K samples from one domain; the atomic unit of episodic training."""

    domain_id: str
    samples: tuple[Sample, ...]
    labeled: bool


@dataclass(frozen=True)
class ShotSelection:
    target_domain_id: str
    K: int
    repeat_index: int
    shot_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class CropSpec:
    size: int = 256
    strategy: str = "grid"  # "grid" | "random"
    crops_per_image: int = 1
    seed: int = 0


@dataclass(frozen=True)
class SyntheticDomainSpec:
    domain_id: str
    image_size: tuple[int, int] = (64, 64)
    blob_count_range: tuple[int, int] = (2, 5)
    blob_radius_range: tuple[float, float] = (4.0, 9.0)
    blob_shape: str = "disc"  # "disc" | "ellipse" | "ring"
    foreground_intensity_range: tuple[float, float] = (0.7, 1.0)
    background_intensity_range: tuple[float, float] = (0.0, 0.2)
    noise_sigma: float = 0.02
    sample_count: int = 20
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.foreground_intensity_range, self.background_intensity_range):
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError("intensity ranges must lie in [0,1]")
        if self.blob_shape not in ("disc", "ellipse", "ring"):
            raise ValueError(f"unknown blob shape {self.blob_shape!r}")


def binarize_mask(raw: np.ndarray, threshold_fraction: float = 0.5) -> np.ndarray:
    """Threshold a raw mask at ``threshold_fraction`` of its encoding maximum.

    Integer encodings use the dtype maximum (255 for 8-bit, 65535 for 16-bit);
    float encodings are assumed normalized to [0,1].
    """
    if raw.size == 0:
        raise ValueError("mask has no pixels")
    if not (0.0 < threshold_fraction < 1.0):
        raise ValueError("threshold_fraction must be in (0,1)")
    if np.issubdtype(raw.dtype, np.integer):
        encoding_max = float(np.iinfo(raw.dtype).max)
    else:
        encoding_max = 1.0
    return (raw.astype(np.float64) > threshold_fraction * encoding_max).astype(np.uint8)


def foreground_weight(mask: np.ndarray) -> float:
    """Ratio of background to foreground pixels; W_MAX when no foreground."""
    fg = int(np.count_nonzero(mask))
    if fg == 0:
        return W_MAX
    return (mask.size - fg) / fg


def _to_grayscale(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 3:
        # ITU-R 601 luminance for RGB(A) inputs.
        arr = arr[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return arr


def _load_array(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except OSError as exc:
        raise IngestionError(f"unreadable file {path}: {exc}") from exc


def load_domain(root_path, manifest: dict | None = None) -> DomainDataset:
    """Ingest one domain from the on-disk layout.

    ``manifest`` overrides the directory's manifest.json; at minimum it
    provides ``domain_id`` and ``cell_type``.
    """
    root = Path(root_path)
    manifest_path = root / "manifest.json"
    if manifest is None:
        if not manifest_path.exists():
            raise IngestionError(f"no manifest.json under {root}")
        manifest = json.loads(manifest_path.read_text())
    domain_id = manifest.get("domain_id", root.name)
    cell_type = manifest.get("cell_type", "unknown")
    threshold = float(manifest.get("mask_threshold", 0.5))
    role = manifest.get("role", "source")

    image_dir = root / "images"
    mask_dir = root / "masks"
    stems = sorted(
        p.stem for p in image_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES
    ) if image_dir.is_dir() else []
    if not stems:
        raise IngestionError(f"no images found under {image_dir}")

    samples = []
    for stem in stems:
        image_path = next(
            (image_dir / f"{stem}{s}" for s in IMAGE_SUFFIXES if (image_dir / f"{stem}{s}").exists()),
            None,
        )
        mask_path = next(
            (mask_dir / f"{stem}{s}" for s in IMAGE_SUFFIXES if (mask_dir / f"{stem}{s}").exists()),
            None,
        )
        if mask_path is None:
            raise IngestionError(f"missing mask for image stem {stem!r} in {root}")
        raw_image = _to_grayscale(_load_array(image_path))
        raw_mask = _load_array(mask_path)
        if raw_mask.ndim == 3:
            raw_mask = raw_mask[..., 0]
        if np.issubdtype(raw_image.dtype, np.integer):
            image = raw_image.astype(np.float64) / np.iinfo(raw_image.dtype).max
        else:
            image = np.clip(raw_image.astype(np.float64), 0.0, 1.0)
        mask = binarize_mask(raw_mask, threshold)
        samples.append(Sample(image=image, mask=mask, id=stem, domain_id=domain_id))

    native = samples[0].image.shape
    return DomainDataset(
        domain_id=domain_id,
        cell_type=cell_type,
        samples=tuple(samples),
        native_resolution=(int(native[0]), int(native[1])),
        role=role,
    )


def _reflect_pad_to(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Reflection-pad up to (height, width); repeats for very small inputs."""
    out = arr
    while out.shape[0] < height or out.shape[1] < width:
        pad_h = min(height - out.shape[0], out.shape[0] - 1) if out.shape[0] < height else 0
        pad_w = min(width - out.shape[1], out.shape[1] - 1) if out.shape[1] < width else 0
        if pad_h == 0 and pad_w == 0:
            raise ValueError("cannot reflection-pad a 1-pixel dimension")
        out = np.pad(out, ((0, pad_h), (0, pad_w)), mode="reflect")
    return out


def _grid_offsets(length: int, size: int) -> list[int]:
    offsets = list(range(0, length - size + 1, size))
    if offsets[-1] + size < length:
        offsets.append(length - size)
    return offsets


def crop_offsets(shape: tuple[int, int], crop: CropSpec, rng=None) -> list[tuple[int, int]]:
    """Crop anchor offsets for one image of the given shape."""
    h, w = shape
    size = crop.size
    if crop.strategy == "grid":
        return [(oy, ox) for oy in _grid_offsets(h, size) for ox in _grid_offsets(w, size)]
    if crop.strategy == "random":
        if rng is None:
            rng = np.random.default_rng(crop.seed)
        return [
            (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
            for _ in range(crop.crops_per_image)
        ]
    raise ValueError(f"unknown crop strategy {crop.strategy!r}")


def crop_training_set(dataset: DomainDataset, crop: CropSpec) -> DomainDataset:
    """Crop every sample to size x size tiles; image and mask share offsets.

    Images smaller than the crop are reflection-padded first.  Grid tiling
    anchors the final row/column to the border, so every pixel is covered.
    """
    rng = np.random.default_rng(crop.seed)
    out = []
    for sample in dataset.samples:
        image = _reflect_pad_to(sample.image, crop.size, crop.size)
        mask = _reflect_pad_to(sample.mask, crop.size, crop.size) if sample.mask is not None else None
        for oy, ox in crop_offsets(image.shape, crop, rng):
            out.append(
                Sample(
                    image=image[oy : oy + crop.size, ox : ox + crop.size],
                    mask=mask[oy : oy + crop.size, ox : ox + crop.size] if mask is not None else None,
                    id=f"{sample.id}#y{oy}x{ox}" if crop.strategy == "grid" else f"{sample.id}#r{oy}_{ox}",
                    domain_id=sample.domain_id,
                )
            )
    # Random crops of one image can repeat an offset; disambiguate ids.
    seen: dict[str, int] = {}
    unique = []
    for s in out:
        n = seen.get(s.id, 0)
        seen[s.id] = n + 1
        unique.append(dataclasses.replace(s, id=f"{s.id}.{n}") if n else s)
    return DomainDataset(
        domain_id=dataset.domain_id,
        cell_type=dataset.cell_type,
        samples=tuple(unique),
        native_resolution=(crop.size, crop.size),
        role=dataset.role,
    )


def sample_task(dataset: DomainDataset, K: int, labeled: bool, rng) -> TaskBatch:
    """Draw K samples without replacement from one domain."""
    if K > len(dataset):
        raise ValueError(f"K={K} exceeds dataset size {len(dataset)} for {dataset.domain_id}")
    idx = rng.choice(len(dataset), size=K, replace=False)
    chosen = [dataset.samples[i] for i in idx]
    if not labeled:
        chosen = [s.without_mask() for s in chosen]
    return TaskBatch(domain_id=dataset.domain_id, samples=tuple(chosen), labeled=labeled)


def select_shots(target: DomainDataset, K: int, repeats: int = 10, seed: int = 0) -> list[ShotSelection]:
    """Repeated uniform K-shot draws; the test set is the complement."""
    if K >= len(target):
        raise ValueError(f"K={K} must be smaller than the target size {len(target)}")
    rng = np.random.default_rng(seed)
    all_ids = [s.id for s in target.samples]
    selections = []
    for r in range(repeats):
        idx = set(rng.choice(len(all_ids), size=K, replace=False).tolist())
        shot_ids = tuple(all_ids[i] for i in sorted(idx))
        test_ids = tuple(all_ids[i] for i in range(len(all_ids)) if i not in idx)
        selections.append(
            ShotSelection(
                target_domain_id=target.domain_id,
                K=K,
                repeat_index=r,
                shot_ids=shot_ids,
                test_ids=test_ids,
            )
        )
    return selections


def _rasterize_blob(shape: str, h: int, w: int, cy: float, cx: float, radius: float, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dy**2 + dx**2 <= radius**2
    if shape == "ellipse":
        ratio = rng.uniform(0.4, 0.8)
        angle = rng.uniform(0.0, np.pi)
        c, s = np.cos(angle), np.sin(angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / radius) ** 2 + (v / (radius * ratio)) ** 2 <= 1.0
    if shape == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= radius**2) & (r2 >= (0.5 * radius) ** 2)
    raise ValueError(f"unknown blob shape {shape!r}")


def generate_synthetic_domain(spec: SyntheticDomainSpec, role: str = "source") -> DomainDataset:
    """Composite random blobs over a background; masks mark blob pixels."""
    h, w = spec.image_size
    if spec.blob_radius_range[1] > min(h, w) / 2:
        raise ValueError(
            f"max blob radius {spec.blob_radius_range[1]} exceeds half image size {min(h, w) / 2}"
        )
    rng = np.random.default_rng(spec.seed)
    samples = []
    for k in range(spec.sample_count):
        background = rng.uniform(*spec.background_intensity_range)
        image = np.full((h, w), background, dtype=np.float64)
        mask = np.zeros((h, w), dtype=np.uint8)
        count = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
        for _ in range(count):
            radius = rng.uniform(*spec.blob_radius_range)
            cy = rng.uniform(radius, h - radius)
            cx = rng.uniform(radius, w - radius)
            blob = _rasterize_blob(spec.blob_shape, h, w, cy, cx, radius, rng)
            intensity = rng.uniform(*spec.foreground_intensity_range)
            image[blob] = intensity
            mask[blob] = 1
        if spec.noise_sigma > 0:
            image = image + rng.normal(0.0, spec.noise_sigma, size=(h, w))
        image = np.clip(image, 0.0, 1.0)
        samples.append(
            Sample(image=image, mask=mask, id=f"{spec.domain_id}_{k:04d}", domain_id=spec.domain_id)
        )
    return DomainDataset(
        domain_id=spec.domain_id,
        cell_type=f"synthetic-{spec.blob_shape}",
        samples=tuple(samples),
        native_resolution=(h, w),
        role=role,
    )


def default_synthetic_specs(
    image_size: tuple[int, int] = (64, 64),
    sample_count: int = 20,
    seed: int = 0,
) -> tuple[list[SyntheticDomainSpec], SyntheticDomainSpec]:
    """Four source specs plus one target spec, distinct in shape and intensity."""
    h, w = image_size
    big = min(h, w) / 6.0
    sources = [
        SyntheticDomainSpec(
            domain_id="syn_discs",
            image_size=image_size,
            blob_count_range=(2, 4),
            blob_radius_range=(big * 0.6, big),
            blob_shape="disc",
            foreground_intensity_range=(0.75, 0.95),
            background_intensity_range=(0.05, 0.15),
            noise_sigma=0.02,
            sample_count=sample_count,
            seed=seed + 1,
        ),
        SyntheticDomainSpec(
            domain_id="syn_ellipses",
            image_size=image_size,
            blob_count_range=(2, 5),
            blob_radius_range=(big * 0.7, big * 1.2),
            blob_shape="ellipse",
            foreground_intensity_range=(0.6, 0.85),
            background_intensity_range=(0.1, 0.25),
            noise_sigma=0.03,
            sample_count=sample_count,
            seed=seed + 2,
        ),
        SyntheticDomainSpec(
            domain_id="syn_rings",
            image_size=image_size,
            blob_count_range=(1, 3),
            blob_radius_range=(big * 0.8, big * 1.3),
            blob_shape="ring",
            foreground_intensity_range=(0.7, 0.9),
            background_intensity_range=(0.0, 0.1),
            noise_sigma=0.02,
            sample_count=sample_count,
            seed=seed + 3,
        ),
        SyntheticDomainSpec(
            domain_id="syn_dense",
            image_size=image_size,
            blob_count_range=(5, 9),
            blob_radius_range=(max(2.0, big * 0.3), big * 0.5),
            blob_shape="disc",
            foreground_intensity_range=(0.8, 1.0),
            background_intensity_range=(0.15, 0.3),
            noise_sigma=0.03,
            sample_count=sample_count,
            seed=seed + 4,
        ),
    ]
    target = SyntheticDomainSpec(
        domain_id="syn_target",
        image_size=image_size,
        blob_count_range=(3, 6),
        blob_radius_range=(big * 0.5, big * 0.9),
        blob_shape="ellipse",
        foreground_intensity_range=(0.65, 0.9),
        background_intensity_range=(0.05, 0.2),
        noise_sigma=0.025,
        sample_count=sample_count,
        seed=seed + 5,
    )
    return sources, target


def save_domain(dataset: DomainDataset, root_path) -> Path:
    """Write a domain to the on-disk layout (8-bit PNGs plus manifest)."""
    root = Path(root_path) / dataset.domain_id
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "masks" / f"{s.id}.png")
    manifest = {
        "domain_id": dataset.domain_id,
        "cell_type": dataset.cell_type,
        "channels": 1,
        "mask_threshold": 0.5,
        "role": dataset.role,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root
