"""Victim training, defenses, metrics and the experiment matrix runner."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from scipy import ndimage

from .data import DatasetManifest, atomic_write_bytes, load_split, subset_dataset, to_uint8
from .protect import ProtectionPlan, clean_selection, protect_dataset
from .segmodel import VICTIM_ARCHS, build_victim, load_checkpoint

log = logging.getLogger(__name__)

DEFENSES = ("none", "gaussian", "jpeg")
CELL_METHODS = ("clean", "unseg", "random_samplewise", "random_classwise", "synper")


# ------------------------------------------------------------------ metrics


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError("pred and gt shapes differ")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-class IoU with NaN for classes absent from both prediction and ground truth."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    valid = ~np.isnan(iou)
    return (float(iou[valid].mean()) if valid.any() else float("nan")), iou


def miou(pred, gt, num_classes: int) -> tuple[float, np.ndarray]:
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(gt)}")
    return iou_from_confusion(confusion(pred, gt, num_classes))


# ----------------------------------------------------------------- defenses


def defense_gaussian(image: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur with reflect padding over the spatial axes of an HxWx3 image."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    out = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma=(sigma, sigma, 0), mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def defense_jpeg(image: np.ndarray, quality: int = 75) -> np.ndarray:
    if not 1 <= int(quality) <= 100:
        raise ValueError("JPEG quality must be in [1, 100]")
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(image)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with PILImage.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def apply_defense(images: np.ndarray, defense: str, sigma: float = 1.0, quality: int = 75) -> np.ndarray:
    if defense == "none":
        return images
    if defense == "gaussian":
        return np.stack([defense_gaussian(im, sigma) for im in images])
    if defense == "jpeg":
        return np.stack([defense_jpeg(im, quality) for im in images])
    raise ValueError(f"unknown defense {defense!r}")


# ------------------------------------------------------------ victim training


@dataclass
class VictimTrainConfig:
    arch: str = "conv_fcn"
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1
    defense: str = "none"
    gaussian_sigma: float = 1.0
    jpeg_quality: int = 75
    flip: bool = True

    def __post_init__(self):
        if self.arch not in VICTIM_ARCHS:
            raise ValueError(f"unknown victim architecture {self.arch!r}")
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if min(self.epochs, self.batch_size, self.eval_every) < 1 or self.lr <= 0:
            raise ValueError("victim training values must be positive")


@dataclass
class MetricsReport:
    miou: float
    per_class_iou: list[float | None]
    curve: list[tuple[int, float]]
    best_epoch: int
    config: dict
    dataset_digest: str
    defense_scope: str = "training inputs only"
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))


@torch.no_grad()
def predict(model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(_to_tensor(images[i : i + batch_size])).argmax(1).numpy())
    return np.concatenate(out)


def evaluate_victim(model, manifest: DatasetManifest, split: str = "val") -> tuple[float, np.ndarray]:
    arrays = load_split(manifest, split)
    return miou(predict(model, arrays.images), arrays.labels, manifest.num_classes)


def _nan_to_none(v: np.ndarray) -> list[float | None]:
    return [None if math.isnan(x) else float(x) for x in v]


def train_victim(dataset: DatasetManifest, cfg: VictimTrainConfig, val: DatasetManifest | None = None):
    """Supervised cross-entropy training; validation on the clean val split of ``val`` (default: ``dataset``).

    Returns the best-epoch model and its MetricsReport.
    """
    train = load_split(dataset, "train")
    valset = load_split(val or dataset, "val")
    k = dataset.num_classes
    images = apply_defense(train.images, cfg.defense, cfg.gaussian_sigma, cfg.jpeg_quality)
    x_all = _to_tensor(images)
    y_all = torch.from_numpy(train.labels)

    torch.manual_seed(cfg.seed)
    model = build_victim(cfg.arch, k, image_size=dataset.size)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    curve, best, best_state = [], (-1.0, None, 0), None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(x_all), generator=g)
        flips = torch.rand(len(x_all), generator=g) < 0.5
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            if cfg.flip:
                f = flips[idx]
                x = torch.where(f[:, None, None, None], x.flip(-1), x)
                y = torch.where(f[:, None, None], y.flip(-1), y)
            loss = F.cross_entropy(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not math.isfinite(loss.item()):
                raise RuntimeError(f"non-finite victim loss at epoch {epoch}")
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            m, per = miou(predict(model, valset.images), valset.labels, k)
            curve.append((epoch, m))
            if m > best[0]:
                best = (m, per, epoch)
                best_state = {n: t.clone() for n, t in model.state_dict().items()}
            log.debug("%s epoch %d val mIoU %.4f", cfg.arch, epoch, m)
    model.load_state_dict(best_state)
    report = MetricsReport(
        miou=best[0],
        per_class_iou=_nan_to_none(best[1]),
        curve=curve,
        best_epoch=best[2],
        config=asdict(cfg),
        dataset_digest=dataset.meta.get("digest") or dataset.digest(),
    )
    return model, report


# --------------------------------------------------------------- experiments


@dataclass
class Cell:
    method: str = "clean"
    arch: str = "conv_fcn"
    defense: str = "none"
    clean_fraction: float = 0.0
    clean_only: bool = False
    prompt_kind: str = "mask"
    seed: int = 0

    def __post_init__(self):
        if self.method not in CELL_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.arch not in VICTIM_ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")

    @property
    def name(self) -> str:
        parts = [self.method, self.arch, self.defense, f"cf{self.clean_fraction:g}", self.prompt_kind, f"s{self.seed}"]
        if self.clean_only:
            parts.insert(0, "cleanonly")
        return "-".join(parts)

    def dataset_key(self) -> str:
        if self.method == "clean" and not self.clean_only:
            return "clean"
        if self.clean_only:
            return f"cleanonly-cf{self.clean_fraction:g}-s{self.seed}"
        return f"{self.method}-{self.prompt_kind}-cf{self.clean_fraction:g}-s{self.seed}"


@dataclass
class ExperimentSpec:
    dataset: str
    generator: str | None = None
    cells: list[Cell] = field(default_factory=list)
    victim: dict = field(default_factory=dict)
    protection: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, doc: dict, base: Path | None = None) -> "ExperimentSpec":
        unknown = set(doc) - {"dataset", "generator", "cells", "matrix", "victim", "protection", "name"}
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            return str(p if p.is_absolute() or base is None else base / p)

        cells = [Cell(**c) for c in doc.get("cells", [])]
        if "matrix" in doc:
            axes = doc["matrix"]
            keys = sorted(axes)
            for combo in itertools.product(*(axes[k] for k in keys)):
                cells.append(Cell(**dict(zip(keys, combo))))
        return cls(resolve(doc["dataset"]), resolve(doc.get("generator")), cells,
                   doc.get("victim", {}), doc.get("protection", {}))

    def to_json(self) -> dict:
        return {"dataset": self.dataset, "generator": self.generator, "cells": [asdict(c) for c in self.cells],
                "victim": self.victim, "protection": self.protection}

    def missing_artifacts(self) -> list[str]:
        missing = []
        if not (Path(self.dataset) / "manifest.json").exists() and not Path(self.dataset).is_file():
            missing.append(f"dataset: {self.dataset}")
        if any(c.method == "unseg" for c in self.cells):
            if self.generator is None:
                missing.append("generator: required by unseg cells but not given")
            elif not Path(self.generator).exists():
                missing.append(f"generator: {self.generator}")
        return missing


class MissingArtifacts(FileNotFoundError):
    pass


def _prepare_dataset(cell: Cell, spec: ExperimentSpec, source: DatasetManifest, root: Path, generator):
    key = cell.dataset_key()
    target = root / key
    if (target / "manifest.json").exists():
        return DatasetManifest.load(target)
    if key == "clean":
        return source
    if cell.clean_only:
        ids = [r.id for r in source.split("train")]
        keep = clean_selection(ids, cell.clean_fraction, cell.seed)
        return subset_dataset(source, keep, target)
    prot = {k: v for k, v in spec.protection.items() if k in ("target_classes", "eps_target", "eps_unrelated",
                                                             "patch_size")}
    plan = ProtectionPlan(source=str(source.root), method=cell.method, prompt_kind=cell.prompt_kind,
                          clean_fraction=cell.clean_fraction, seed=cell.seed, **prot)
    return protect_dataset(plan, target, generator=generator, source=source)


def _run_cell(args):
    cell, dataset_root, clean_root, victim_kw, cell_dir = args
    torch.set_num_threads(1)
    ds = DatasetManifest.load(dataset_root)
    clean = DatasetManifest.load(clean_root)
    cfg = VictimTrainConfig(arch=cell.arch, defense=cell.defense, seed=cell.seed, **victim_kw)
    t0 = time.perf_counter()
    _, report = train_victim(ds, cfg, val=clean)
    report.extra = {"cell": asdict(cell), "train_seconds": round(time.perf_counter() - t0, 1)}
    doc = report.to_json()
    atomic_write_bytes(Path(cell_dir) / "report.json", json.dumps(doc, indent=2, sort_keys=True).encode())
    return doc


CSV_BASE = ("cell", "method", "arch", "defense", "clean_fraction", "clean_only", "prompt_kind", "seed", "miou",
            "best_epoch")


def write_consolidated(path: Path, rows: list[dict], num_classes: int | None) -> None:
    fields = list(CSV_BASE)
    if num_classes:
        fields += [f"iou_{c}" for c in range(num_classes)]
    fields.append("dataset_digest")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def _plot_curves(path: Path, reports: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rep in reports:
        ep, m = zip(*rep["curve"]) if rep["curve"] else ((), ())
        ax.plot(ep, m, marker="o", ms=3, label=Cell(**rep["extra"]["cell"]).name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("val mIoU")
    ax.set_ylim(0, 1)
    if reports:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def run_experiment(spec: ExperimentSpec, run_dir, workers: int = 1) -> list[dict]:
    """Execute every cell; write per-cell reports, consolidated.csv and curves.png under ``run_dir``."""
    run_dir = Path(run_dir)
    missing = spec.missing_artifacts()
    if missing:
        raise MissingArtifacts("missing artifacts: " + "; ".join(missing))
    run_dir.mkdir(parents=True, exist_ok=True)
    source = DatasetManifest.load(spec.dataset) if spec.cells else None
    generator = None
    if any(c.method == "unseg" for c in spec.cells):
        generator, _ = load_checkpoint(spec.generator)
    data_root = run_dir / "datasets"
    victim_kw = {k: v for k, v in spec.victim.items() if k in VictimTrainConfig.__dataclass_fields__}
    jobs = []
    digests: dict[str, str] = {}
    for i, cell in enumerate(spec.cells):
        ds = _prepare_dataset(cell, spec, source, data_root, generator)
        if str(ds.root) not in digests:
            digests[str(ds.root)] = ds.digest()
        cell_dir = run_dir / "cells" / f"{i:03d}_{cell.name}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        jobs.append((cell, str(ds.root), str(source.root), victim_kw, str(cell_dir)))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_cell, jobs))
    else:
        reports = [_run_cell(j) for j in jobs]

    rows = []
    for (cell, ds_root, _, _, _), rep in zip(jobs, reports):
        row = {"cell": cell.name, "method": cell.method, "arch": cell.arch, "defense": cell.defense,
               "clean_fraction": cell.clean_fraction, "clean_only": cell.clean_only,
               "prompt_kind": cell.prompt_kind, "seed": cell.seed, "miou": f"{rep['miou']:.6f}",
               "best_epoch": rep["best_epoch"], "dataset_digest": digests[ds_root]}
        for c, v in enumerate(rep["per_class_iou"]):
            row[f"iou_{c}"] = "" if v is None else f"{v:.6f}"
        rows.append(row)
    write_consolidated(run_dir / "consolidated.csv", rows, source.num_classes if source else None)
    _plot_curves(run_dir / "curves.png", reports)
    return reports


def config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()[:12]
