"""Experiment command line: data preparation, synthetic generation, training,
fine-tuning, the leave-one-dataset-out protocol and reporting.

All experiment settings live in one JSON config (see ``RunConfig``); CLI
flags override individual fields.  Exit codes: 0 success, 2 config error,
3 data error, 4 training divergence.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from fewseg.data import (
    CropSpec,
    DomainDataset,
    SyntheticDomainSpec,
    crop_training_set,
    generate_synthetic_domain,
    load_domain,
    save_domain,
    select_shots,
)
from fewseg.errors import ConfigurationError, IngestionError, TrainingError
from fewseg.evaluation import (
    METHODS,
    ExperimentResult,
    FinetuneConfig,
    TransferConfig,
    derive_seed,
    evaluate,
    fine_tune,
    run_cell,
    transfer_train,
)
from fewseg.losses import LossWeights
from fewseg.meta import MetaConfig, meta_train, weights_for_method
from fewseg.models import (
    NetworkSpec,
    build_network,
    load_checkpoint,
    save_checkpoint,
)


@dataclass(frozen=True)
class RunConfig:
    data_root: Path
    output_dir: Path
    seed: int = 0
    architecture: str = "FCRN"
    base_width: int = 32
    depth: int = 3
    domains: tuple[tuple[str, str], ...] = ()  # (domain_id, role)
    synthetic_specs: dict = field(default_factory=dict)
    methods: tuple[str, ...] = ("ML_FULL", "TRANSFER")
    K_grid: tuple[int, ...] = (1, 3, 5, 7, 10)
    repeats: int = 10
    crop_size: int = 256
    meta: MetaConfig = field(default_factory=MetaConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)

    @property
    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            architecture=self.architecture, base_width=self.base_width, depth=self.depth
        )

    @staticmethod
    def from_file(path, seed=None, output=None) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return RunConfig.from_dict(raw, seed=seed, output=output)

    @staticmethod
    def from_dict(raw: dict, seed=None, output=None) -> "RunConfig":
        try:
            cfg_seed = seed if seed is not None else raw.get("seed", 0)
            net = raw.get("network", {})
            meta_raw = dict(raw.get("meta", {}))
            lw = LossWeights(meta_raw.pop("alpha", 0.01), meta_raw.pop("beta", 0.01))
            meta = MetaConfig(seed=cfg_seed, loss_weights=lw, **meta_raw)
            ft_raw = dict(raw.get("finetune", {}))
            finetune = FinetuneConfig(**ft_raw)
            tr_raw = dict(raw.get("transfer", {}))
            tr_raw.setdefault("seed", cfg_seed)
            transfer = TransferConfig(**tr_raw)
            return RunConfig(
                data_root=Path(raw["data_root"]),
                output_dir=Path(output if output is not None else raw.get("output_dir", "out")),
                seed=cfg_seed,
                architecture=raw.get("architecture", "FCRN"),
                base_width=net.get("base_width", 32),
                depth=net.get("depth", 3),
                domains=tuple((d["domain_id"], d.get("role", "source")) for d in raw.get("domains", [])),
                synthetic_specs=raw.get("synthetic_specs", {}),
                methods=tuple(raw.get("methods", ["ML_FULL", "TRANSFER"])),
                K_grid=tuple(raw.get("K_grid", [1, 3, 5, 7, 10])),
                repeats=int(raw.get("repeats", 10)),
                crop_size=int(raw.get("crop_size", 256)),
                meta=meta,
                finetune=finetune,
                transfer=transfer,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc


def _load_config_domain(config: RunConfig, domain_id: str, role: str) -> DomainDataset:
    root = config.data_root / domain_id
    if root.is_dir():
        ds = load_domain(root)
        return dataclasses.replace(ds, role=role)
    if domain_id in config.synthetic_specs:
        spec = SyntheticDomainSpec(domain_id=domain_id, **{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in config.synthetic_specs[domain_id].items()
        })
        return generate_synthetic_domain(spec, role=role)
    raise IngestionError(f"domain {domain_id!r} not found on disk or in synthetic_specs")


def _load_all_domains(config: RunConfig) -> list[DomainDataset]:
    if not config.domains:
        raise ConfigurationError("config lists no domains")
    return [_load_config_domain(config, d, role) for d, role in config.domains]


def _training_view(dataset: DomainDataset, crop_size: int) -> DomainDataset:
    """Crop a source for training only when its images exceed the crop size."""
    h, w = dataset.native_resolution
    if h > crop_size or w > crop_size:
        return crop_training_set(dataset, CropSpec(size=crop_size, strategy="grid"))
    return dataset


def _target_ids(config: RunConfig, datasets) -> list[str]:
    explicit = [d.domain_id for d in datasets if d.role == "target"]
    return explicit if explicit else [d.domain_id for d in datasets]


def _cli_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigurationError, ValueError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except (IngestionError, FileNotFoundError, OSError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except TrainingError as exc:
            click.echo(f"training diverged: {exc}", err=True)
            sys.exit(4)

    return wrapper


@click.group()
def main():
    """Few-shot meta-learning for cell segmentation."""


config_option = click.option("--config", "config_path", required=True, type=click.Path(exists=False))
seed_option = click.option("--seed", type=int, default=None)
output_option = click.option("--output", type=click.Path(), default=None)
device_option = click.option("--device", default="cpu", help="cpu or a CUDA device id")


@main.command("synth-gen")
@config_option
@seed_option
@_cli_errors
def cmd_synth_gen(config_path, seed):
    """Generate the configured synthetic domains into the data root."""
    config = RunConfig.from_file(config_path, seed=seed)
    if not config.synthetic_specs:
        raise ConfigurationError("config has no synthetic_specs")
    roles = dict(config.domains)
    for domain_id in config.synthetic_specs:
        ds = _load_config_domain(config, domain_id, roles.get(domain_id, "source"))
        root = save_domain(ds, config.data_root)
        click.echo(f"wrote {len(ds)} samples to {root}")


def _store_fingerprint(source_images, crop_size) -> str:
    digest = hashlib.sha256()
    digest.update(str(crop_size).encode())
    for name in source_images:
        digest.update(name.encode())
    return digest.hexdigest()


@main.command("prepare-data")
@config_option
@seed_option
@_cli_errors
def cmd_prepare_data(config_path, seed):
    """Build the deterministic 256x256 crop store for every on-disk domain."""
    config = RunConfig.from_file(config_path, seed=seed)
    store_root = config.data_root / "_prepared"
    for domain_id, role in config.domains:
        raw_root = config.data_root / domain_id
        if not raw_root.is_dir():
            continue  # synthetic domains are generated, not prepared
        dataset = load_domain(raw_root)
        source_images = [s.id for s in dataset.samples]
        fingerprint = _store_fingerprint(source_images, config.crop_size)
        manifest_path = store_root / domain_id / "crop_manifest.json"
        if manifest_path.exists():
            existing = json.loads(manifest_path.read_text())
            if existing.get("fingerprint") == fingerprint:
                click.echo(f"{domain_id}: crop store up to date")
                continue
        cropped = _training_view(dataset, config.crop_size)
        save_domain(cropped, store_root)
        manifest_path.write_text(
            json.dumps(
                {
                    "domain_id": domain_id,
                    "crop_size": config.crop_size,
                    "source_images": source_images,
                    "crop_count": len(cropped),
                    "fingerprint": fingerprint,
                },
                indent=2,
            )
        )
        click.echo(f"{domain_id}: {len(source_images)} images -> {len(cropped)} crops")


def _train_method(config: RunConfig, method: str, sources, log_path=None):
    spec = config.network_spec
    model, _ = build_network(spec, seed=config.seed)
    train_sources = [_training_view(s, config.crop_size) for s in sources]
    if method == "TRANSFER":
        theta = transfer_train(train_sources, spec, config.transfer, model=model)
        return model, theta, []
    meta_cfg = dataclasses.replace(config.meta, loss_weights=weights_for_method(method))
    theta, logs = meta_train(train_sources, spec, meta_cfg, model=model)
    if log_path is not None:
        with open(log_path, "w") as fh:
            for log in logs:
                fh.write(
                    json.dumps(
                        {
                            "iteration": log.iteration,
                            "losses": [dataclasses.asdict(b) for b in log.breakdowns],
                            "meta_update_norm": log.meta_update_norm,
                        }
                    )
                    + "\n"
                )
    return model, theta, logs


@main.command("meta-train")
@config_option
@seed_option
@output_option
@device_option
@click.option("--method", default="ML_FULL", type=click.Choice([m for m in METHODS if m != "TRANSFER"]))
@_cli_errors
def cmd_meta_train(config_path, seed, output, device, method):
    """Meta-train on all source domains and save a checkpoint."""
    config = RunConfig.from_file(config_path, seed=seed, output=output)
    datasets = _load_all_domains(config)
    sources = [d for d in datasets if d.role == "source"]
    ckpt_dir = config.output_dir / "ckpt"
    model, _, logs = _train_method(
        config, method, sources, log_path=_ensure_dir(config.output_dir) / f"meta_train_{method}.jsonl"
    )
    path = ckpt_dir / f"{method}_{config.architecture}.ckpt"
    save_checkpoint(model, path)
    click.echo(f"saved {path} after {len(logs)} episodes")


@main.command("transfer-train")
@config_option
@seed_option
@output_option
@device_option
@_cli_errors
def cmd_transfer_train(config_path, seed, output, device):
    """Train the pooled transfer-learning baseline and save a checkpoint."""
    config = RunConfig.from_file(config_path, seed=seed, output=output)
    datasets = _load_all_domains(config)
    sources = [d for d in datasets if d.role == "source"]
    model, _, _ = _train_method(config, "TRANSFER", sources)
    path = config.output_dir / "ckpt" / f"TRANSFER_{config.architecture}.ckpt"
    save_checkpoint(model, path)
    click.echo(f"saved {path}")


@main.command("fine-tune")
@config_option
@seed_option
@output_option
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--target", "target_id", required=True)
@click.option("--k", "K", type=int, default=5)
@_cli_errors
def cmd_fine_tune(config_path, seed, output, ckpt_path, target_id, K):
    """Fine-tune a checkpoint on one K-shot selection from the target."""
    config = RunConfig.from_file(config_path, seed=seed, output=output)
    roles = dict(config.domains)
    target = _load_config_domain(config, target_id, roles.get(target_id, "target"))
    model, theta = load_checkpoint(ckpt_path)
    selection = select_shots(target, K, repeats=1, seed=derive_seed(config.seed, target_id, K))[0]
    shots = [target.by_id(i) for i in selection.shot_ids]
    adapted = fine_tune(theta, shots, config.finetune, model)
    out = _ensure_dir(config.output_dir / "ckpt") / f"finetuned_{target_id}_K{K}.ckpt"
    save_checkpoint(model, out)
    test = [target.by_id(i) for i in selection.test_ids]
    score = evaluate(adapted, test, model, config.finetune.binarize_threshold)
    click.echo(f"saved {out}; held-out mean IoU {score:.4f}")


@main.command("evaluate")
@config_option
@seed_option
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--target", "target_id", required=True)
@_cli_errors
def cmd_evaluate(config_path, seed, ckpt_path, target_id):
    """Mean IoU of a checkpoint over every sample of a domain."""
    config = RunConfig.from_file(config_path, seed=seed)
    roles = dict(config.domains)
    target = _load_config_domain(config, target_id, roles.get(target_id, "target"))
    model, theta = load_checkpoint(ckpt_path)
    score = evaluate(theta, list(target.samples), model, config.finetune.binarize_threshold)
    click.echo(f"mean IoU on {target_id}: {score:.4f}")


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _result_row(result: ExperimentResult) -> dict:
    return {
        "method": result.method,
        "target": result.target_domain_id,
        "K": result.K,
        "repeat_ious": list(result.repeat_ious),
        "mean_iou": result.mean_iou,
        "std_iou": result.std_iou,
    }


def _read_ledger(results_path: Path) -> dict:
    completed = {}
    if results_path.exists():
        for line in results_path.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            completed[(row["method"], row["target"], row["K"])] = row
    return completed


def _write_summary(results_path: Path, summary_path: Path):
    rows = sorted(
        _read_ledger(results_path).values(), key=lambda r: (r["method"], r["target"], r["K"])
    )
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "target", "K", "mean_iou", "std_iou"])
        for row in rows:
            writer.writerow(
                [row["method"], row["target"], row["K"], repr(row["mean_iou"]), repr(row["std_iou"])]
            )


def _read_summary(summary_path: Path) -> list[dict]:
    with open(summary_path, newline="") as fh:
        return [
            {
                "method": r["method"],
                "target": r["target"],
                "K": int(r["K"]),
                "mean_iou": float(r["mean_iou"]),
                "std_iou": float(r["std_iou"]),
            }
            for r in csv.DictReader(fh)
        ]


def _plot_rows(rows, title, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = sorted({r["method"] for r in rows})
    ks = sorted({r["K"] for r in rows})
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, method in enumerate(methods):
        means = [next((r["mean_iou"] for r in rows if r["method"] == method and r["K"] == k), np.nan) for k in ks]
        stds = [next((r["std_iou"] for r in rows if r["method"] == method and r["K"] == k), 0.0) for k in ks]
        positions = [j + (i - (len(methods) - 1) / 2) * width for j in range(len(ks))]
        ax.bar(positions, means, width=width, yerr=stds, capsize=3, label=method)
    ax.set_xticks(range(len(ks)))
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_xlabel("K shots")
    ax.set_ylabel("mean IoU")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _render_plots(summary_path: Path, plots_dir: Path):
    rows = _read_summary(summary_path)
    _ensure_dir(plots_dir)
    targets = sorted({r["target"] for r in rows})
    for target in targets:
        _plot_rows([r for r in rows if r["target"] == target], target, plots_dir / f"{target}.png")
    # Cross-dataset average: mean over targets per (method, K).
    averaged = []
    for method in sorted({r["method"] for r in rows}):
        for k in sorted({r["K"] for r in rows}):
            cell = [r for r in rows if r["method"] == method and r["K"] == k]
            if cell:
                averaged.append(
                    {
                        "method": method,
                        "K": k,
                        "mean_iou": float(np.mean([r["mean_iou"] for r in cell])),
                        "std_iou": float(np.mean([r["std_iou"] for r in cell])),
                    }
                )
    _plot_rows(averaged, "average over targets", plots_dir / "average.png")


def _protocol_datasets(config: RunConfig):
    datasets = _load_all_domains(config)
    max_k = max(config.K_grid)
    for ds in datasets:
        if len(ds) < max_k + 1:
            raise ConfigurationError(
                f"dataset {ds.domain_id} has {len(ds)} samples; needs > max K = {max_k}"
            )
    return datasets


def _run_protocol(config: RunConfig, resume: bool):
    if not config.methods:
        raise ConfigurationError("empty method list")
    for method in config.methods:
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}")
    datasets = _protocol_datasets(config)
    targets = _target_ids(config, datasets)
    out = _ensure_dir(config.output_dir)
    ckpt_dir = _ensure_dir(out / "ckpt")
    results_path = out / "results.jsonl"
    if not resume and results_path.exists():
        results_path.unlink()
    completed = _read_ledger(results_path) if resume else {}

    for method in config.methods:
        for target in datasets:
            if target.domain_id not in targets:
                continue
            cells = [(method, target.domain_id, k) for k in config.K_grid]
            if all(c in completed for c in cells):
                continue
            ckpt_path = ckpt_dir / f"{method}_{target.domain_id}.ckpt"
            if resume and ckpt_path.exists():
                model, theta = load_checkpoint(ckpt_path)
            else:
                sources = [d for d in datasets if d.domain_id != target.domain_id]
                model, theta, _ = _train_method(config, method, sources)
                save_checkpoint(model, ckpt_path)
            for K in config.K_grid:
                key = (method, target.domain_id, K)
                if key in completed:
                    continue
                cell_seed = derive_seed(config.seed, target.domain_id, K)
                ious, _ = run_cell(theta, model, target, K, config.repeats, config.finetune, cell_seed)
                result = ExperimentResult.from_repeats(method, target.domain_id, K, ious)
                with open(results_path, "a") as fh:
                    fh.write(json.dumps(_result_row(result)) + "\n")
                completed[key] = _result_row(result)
                click.echo(
                    f"{method} target={target.domain_id} K={K}: "
                    f"{result.mean_iou:.4f} +/- {result.std_iou:.4f}"
                )
    summary_path = out / "summary.csv"
    _write_summary(results_path, summary_path)
    _render_plots(summary_path, out / "plots")
    return summary_path


@main.command("run-protocol")
@config_option
@seed_option
@output_option
@device_option
@click.option("--resume", is_flag=True, default=False)
@_cli_errors
def cmd_run_protocol(config_path, seed, output, device, resume):
    """Leave-one-dataset-out protocol over the method x K grid."""
    config = RunConfig.from_file(config_path, seed=seed, output=output)
    summary = _run_protocol(config, resume)
    click.echo(f"summary written to {summary}")


@main.command("grid-search")
@config_option
@seed_option
@output_option
@click.option("--alpha-grid", default="0,0.01,0.1")
@click.option("--beta-grid", default="0,0.01,0.1")
@_cli_errors
def cmd_grid_search(config_path, seed, output, alpha_grid, beta_grid):
    """Sweep (alpha, beta) at the configured budget; rank cells by mean IoU."""
    config = RunConfig.from_file(config_path, seed=seed, output=output)
    alphas = [float(v) for v in alpha_grid.split(",") if v != ""]
    betas = [float(v) for v in beta_grid.split(",") if v != ""]
    if not alphas or not betas:
        raise ConfigurationError("empty alpha/beta grid")
    datasets = _protocol_datasets(config)
    targets = _target_ids(config, datasets)
    rows = []
    for alpha in alphas:
        for beta in betas:
            scores = []
            meta_cfg = dataclasses.replace(config.meta, loss_weights=LossWeights(alpha, beta))
            for target in datasets:
                if target.domain_id not in targets:
                    continue
                sources = [
                    _training_view(d, config.crop_size)
                    for d in datasets
                    if d.domain_id != target.domain_id
                ]
                model, _ = build_network(config.network_spec, seed=config.seed)
                theta, _ = meta_train(sources, config.network_spec, meta_cfg, model=model)
                for K in config.K_grid:
                    cell_seed = derive_seed(config.seed, target.domain_id, K)
                    ious, _ = run_cell(
                        theta, model, target, K, config.repeats, config.finetune, cell_seed
                    )
                    scores.extend(ious)
            rows.append({"alpha": alpha, "beta": beta, "mean_iou": float(np.mean(scores))})
    # Rank by mean IoU; ties prefer smaller alpha, then smaller beta.
    rows.sort(key=lambda r: (-r["mean_iou"], r["alpha"], r["beta"]))
    out = _ensure_dir(config.output_dir)
    grid_path = out / "grid_search.csv"
    with open(grid_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "alpha", "beta", "mean_iou"])
        for rank, row in enumerate(rows, start=1):
            writer.writerow([rank, row["alpha"], row["beta"], repr(row["mean_iou"])])
    best = rows[0]
    click.echo(f"best cell: alpha={best['alpha']} beta={best['beta']} mean IoU {best['mean_iou']:.4f}")
    click.echo(f"grid written to {grid_path}")


@main.command("report")
@output_option
@_cli_errors
def cmd_report(output):
    """Re-render all plots from summary.csv alone."""
    out = Path(output) if output else Path("out")
    summary_path = out / "summary.csv"
    if not summary_path.exists():
        raise IngestionError(f"no summary.csv under {out}")
    _render_plots(summary_path, out / "plots")
    click.echo(f"plots written to {out / 'plots'}")


if __name__ == "__main__":
    main()
