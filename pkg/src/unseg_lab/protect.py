"""Turn a semantic dataset into its protected (unlearnable) version.

Only the train split is perturbed; validation images and all label files are
copied byte-for-byte. Each protected class in an image gets its own prompt and
noise field; fields of several classes are summed and re-projected onto the
union budget map.
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, Record, atomic_write_bytes, copy_record_file, read_image, read_label, write_image
from .datagen import PROMPT_KINDS, prompt_from_label
from .noisegen import NoiseBudget, NoiseGenerator, eps_map, prompt_region

log = logging.getLogger(__name__)

METHODS = ("unseg", "random_samplewise", "random_classwise", "synper")
PROVENANCE_NAME = "provenance.json"


class PlanError(ValueError):
    pass


@dataclass
class ProtectionPlan:
    source: str
    target_classes: list[int] | str = "all"
    prompt_kind: str = "mask"
    method: str = "unseg"
    clean_fraction: float = 0.0
    eps_target: float = 8 / 255
    eps_unrelated: float = 2 / 255
    patch_size: int = 8
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise PlanError(f"unknown protection method {self.method!r}")
        if self.prompt_kind not in PROMPT_KINDS:
            raise PlanError(f"unknown prompt kind {self.prompt_kind!r}")
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise PlanError("clean_fraction must lie in [0, 1]")
        if self.target_classes != "all":
            self.target_classes = sorted(int(c) for c in self.target_classes)
            if not self.target_classes:
                raise PlanError("empty target class set")
        self.budget  # validates eps values

    @property
    def budget(self) -> NoiseBudget:
        return NoiseBudget(self.eps_target, self.eps_unrelated, 1)

    def resolve_targets(self, num_classes: int) -> list[int]:
        if self.target_classes == "all":
            return list(range(1, num_classes))
        bad = [c for c in self.target_classes if not 1 <= c < num_classes]
        if bad:
            raise PlanError(f"target classes {bad} do not exist in a {num_classes}-class dataset")
        return list(self.target_classes)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ProtectionPlan":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ProtectionPlan":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def clean_selection(ids: list[str], clean_fraction: float, seed: int) -> set[str]:
    """Seeded shuffle; the first round(fraction * n) ids stay clean."""
    order = np.random.default_rng([seed, 7]).permutation(len(ids))
    n_clean = int(round(clean_fraction * len(ids)))
    return {ids[i] for i in order[:n_clean]}


def random_noise(shape: tuple[int, int], region: np.ndarray, budget: NoiseBudget, rng: np.random.Generator):
    """Uniform field in [-1, 1] scaled by the budget map of ``region``; returns HxWx3."""
    u = rng.uniform(-1.0, 1.0, size=(*shape, 3))
    return u * eps_map(region, budget)[..., None]


def classwise_pattern(class_id: int, size: int, seed: int) -> np.ndarray:
    """Fixed HxWx3 uniform pattern in [-1, 1] shared by every image for one class."""
    return np.random.default_rng([seed, 11, class_id]).uniform(-1.0, 1.0, size=(size, size, 3))


def synper_noise(num_classes: int, size: int, patch_size: int = 8, eps: float = 8 / 255,
                 seed: int = 0) -> np.ndarray:
    """Per-class tiled sign patterns: (num_classes, size, size, 3) with entries in {-eps, +eps}."""
    if size % patch_size:
        raise PlanError(f"patch size {patch_size} does not divide image size {size}")
    rng = np.random.default_rng([seed, 13])
    out = np.empty((num_classes, size, size, 3))
    reps = size // patch_size
    for c in range(num_classes):
        patch = rng.choice(np.array([-1.0, 1.0]), size=(patch_size, patch_size, 3))
        out[c] = np.tile(patch, (reps, reps, 1)) * eps
    return out


def _generator_fields(generator: NoiseGenerator, images, prompts, regions, budget, batch_size=64):
    dtype = next(generator.parameters()).dtype
    generator.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(np.stack(images[i : i + batch_size]).transpose(0, 3, 1, 2), dtype=dtype)
            p = torch.as_tensor(np.stack(prompts[i : i + batch_size]), dtype=dtype)
            r = torch.as_tensor(np.stack(regions[i : i + batch_size]))
            d = generator(x, p, r, budget, "infer")
            out.extend(d.permute(0, 2, 3, 1).numpy())
    return out


def protect_dataset(plan: ProtectionPlan, out, generator: NoiseGenerator | None = None,
                    source: DatasetManifest | None = None) -> DatasetManifest:
    if plan.method == "unseg" and generator is None:
        raise PlanError("method 'unseg' requires a trained generator")
    src = source if source is not None else DatasetManifest.load(plan.source)
    targets = plan.resolve_targets(src.num_classes)
    budget = plan.budget
    size = src.size
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)

    train = src.split("train")
    clean_ids = clean_selection([r.id for r in train], plan.clean_fraction, plan.seed)
    synper = None
    if plan.method == "synper":
        synper = synper_noise(src.num_classes, size, plan.patch_size, 1.0, plan.seed)

    provenance: dict[str, dict] = {}
    jobs = []  # (record index, class, prompt mask, region)
    images, labels = {}, {}
    for i, rec in enumerate(train):
        if rec.id in clean_ids:
            continue
        lab = read_label(src.root / rec.label)
        present = [c for c in targets if (lab == c).any()]
        if not present:
            continue
        images[i] = read_image(src.root / rec.image)
        labels[i] = lab
        for c in present:
            pr = prompt_from_label(lab, c, plan.prompt_kind)
            jobs.append((i, c, pr.mask, prompt_region(pr)))

    if plan.method == "unseg" and jobs:
        fields = _generator_fields(generator, [images[j[0]] for j in jobs], [j[2] for j in jobs],
                                   [j[3] for j in jobs], budget)
    else:
        fields = []
        for i, c, _, region in jobs:
            if plan.method == "random_classwise":
                fields.append(classwise_pattern(c, size, plan.seed) * eps_map(region, budget)[..., None])
            elif plan.method == "synper":
                fields.append(synper[c] * eps_map(region, budget)[..., None])
            else:
                fields.append(None)

    per_image: dict[int, list] = {}
    for (i, c, _, region), f in zip(jobs, fields):
        per_image.setdefault(i, []).append((c, region, f))

    for i, rec in enumerate(train):
        copy_record_file(src.root, out, rec.label)
        if i not in per_image:
            copy_record_file(src.root, out, rec.image)
            provenance[rec.id] = {"method": "none", "protected_classes": [], "clean": rec.id in clean_ids}
            continue
        items = per_image[i]
        union = np.zeros((size, size), dtype=bool)
        for _, region, _ in items:
            union |= region
        bound = eps_map(union, budget)[..., None]
        if plan.method == "random_samplewise":
            delta = random_noise((size, size), union, budget, np.random.default_rng([plan.seed, 17, i]))
        else:
            delta = np.clip(np.sum([f for _, _, f in items], axis=0, dtype=np.float64), -bound, bound)
        write_image(out / rec.image, np.clip(images[i] + delta, 0.0, 1.0))
        provenance[rec.id] = {"method": plan.method, "protected_classes": [c for c, _, _ in items], "clean": False}

    for rec in src.records:
        if rec.split == "train":
            continue
        copy_record_file(src.root, out, rec.image)
        copy_record_file(src.root, out, rec.label)
        provenance[rec.id] = {"method": "none", "protected_classes": [], "clean": True}

    plan_doc = plan.to_json()
    prov = {"plan": plan_doc, "source_digest": src.digest(), "records": provenance}
    atomic_write_bytes(out / PROVENANCE_NAME, json.dumps(prov, indent=1, sort_keys=True).encode("utf-8"))
    records = [Record(r.id, r.split, r.image, r.label) for r in src.records]
    manifest = DatasetManifest(out, src.kind, size, src.num_classes, src.class_names, records,
                               meta={**src.meta, "protection": plan_doc})
    manifest.save()
    log.info("protected %d/%d train images with %s", len(per_image), len(train), plan.method)
    return manifest
