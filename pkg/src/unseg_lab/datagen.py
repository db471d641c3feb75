"""Procedural synthetic segmentation corpora.

Two generators share one drawing kit:

* ``gen_iis_dataset`` - binary interactive-segmentation samples (image, prompt,
  mask of one selected object) used to train the noise generator.
* ``gen_downstream_dataset`` - multi-class semantic label maps where every
  foreground class is a shape family paired with a texture family.
"""
from __future__ import annotations

import colorsys
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import DatasetManifest, Record, write_image, write_label, write_prompt

PROMPT_KINDS = ("point", "box", "mask")
IIS_SHAPES = ("ellipse", "polygon", "ring")
SHAPE_FAMILIES = ("ellipse", "rectangle", "triangle", "ring", "cross", "star", "hexagon", "diamond")
TEXTURE_FAMILIES = ("solid", "stripes", "checker", "dots", "waves", "grid", "gradient", "speckle")
MIN_SIZE = 32


class EmptyPromptError(ValueError):
    """The requested protection target does not occur in the label map."""


@dataclass(frozen=True)
class MaskPrompt:
    mask: np.ndarray  # HxW bool
    kind: str

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise ValueError(f"unknown prompt kind {self.kind!r}")


def prompt_from_label(label: np.ndarray, class_id: int, kind: str = "mask") -> MaskPrompt:
    region = np.asarray(label) == class_id
    if not region.any():
        raise EmptyPromptError(f"class {class_id} absent from label map; nothing to protect")
    if kind == "mask":
        return MaskPrompt(region, kind)
    ys, xs = np.nonzero(region)
    out = np.zeros_like(region)
    if kind == "box":
        out[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1] = True
    elif kind == "point":
        cy, cx = ys.mean(), xs.mean()
        # nonzero() is row-major, so argmin breaks ties toward the first pixel
        k = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        out[ys[k], xs[k]] = True
    else:
        raise ValueError(f"unknown prompt kind {kind!r}")
    return MaskPrompt(out, kind)


# ---------------------------------------------------------------- drawing kit


def _grid(size: int, cy: float, cx: float, angle: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    return c * dx + s * dy, -s * dx + c * dy


def _regular_polygon(u, v, r, n):
    theta = np.arctan2(v, u)
    rho = np.hypot(u, v)
    sector = 2 * math.pi / n
    local = np.mod(theta, sector) - sector / 2
    return rho * np.cos(local) <= r * math.cos(math.pi / n)


def shape_mask(kind: str, size: int, cy: float, cx: float, r: float, angle: float, aspect: float = 1.0,
               sides: int = 5) -> np.ndarray:
    u, v = _grid(size, cy, cx, angle)
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (r * aspect)) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= r) & (np.abs(v) <= r * aspect)
    if kind == "triangle":
        return _regular_polygon(u, v, r, 3)
    if kind == "hexagon":
        return _regular_polygon(u, v, r, 6)
    if kind == "polygon":
        return _regular_polygon(u, v, r, sides)
    if kind == "ring":
        d = np.hypot(u, v / aspect)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "cross":
        arm = 0.38 * r
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    if kind == "star":
        theta = np.arctan2(v, u)
        return np.hypot(u, v) <= r * (0.62 + 0.38 * np.cos(5 * theta))
    if kind == "diamond":
        return np.abs(u) / r + np.abs(v) / (0.62 * r) <= 1.0
    raise ValueError(f"unknown shape {kind!r}")


def _hsv(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, float(np.clip(s, 0, 1)), float(np.clip(v, 0, 1))))


def texture(kind: str, size: int, c1: np.ndarray, c2: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Two-colour procedural texture of shape size x size x 3."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * math.pi)
    if kind == "solid":
        t = np.full((size, size), 0.15) + 0.1 * rng.random((size, size))
    elif kind == "stripes":
        ang = rng.uniform(0.6, 1.0)
        t = 0.5 + 0.5 * np.sign(np.sin((xx * math.cos(ang) + yy * math.sin(ang)) * 2 * math.pi / 6 + phase))
    elif kind == "checker":
        p = 4
        t = ((np.floor((xx + rng.integers(p)) / p) + np.floor((yy + rng.integers(p)) / p)) % 2).astype(float)
    elif kind == "dots":
        p = 5
        t = (np.hypot(np.mod(xx + rng.integers(p), p) - p / 2, np.mod(yy + rng.integers(p), p) - p / 2) < 1.4)
        t = t.astype(float)
    elif kind == "waves":
        cy, cx = rng.uniform(0, size, 2)
        t = 0.5 + 0.5 * np.sin(np.hypot(yy - cy, xx - cx) * 2 * math.pi / 5 + phase)
    elif kind == "grid":
        p = 6
        t = ((np.mod(xx + rng.integers(p), p) < 1.5) | (np.mod(yy + rng.integers(p), p) < 1.5)).astype(float)
    elif kind == "gradient":
        ang = rng.uniform(0, 2 * math.pi)
        t = (xx * math.cos(ang) + yy * math.sin(ang)) / size
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    elif kind == "speckle":
        t = (rng.random((size, size)) < 0.35).astype(float)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    return c1[None, None, :] * (1 - t[..., None]) + c2[None, None, :] * t[..., None]


def background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Low-saturation smooth noise with a faint random-orientation grain."""
    hue = rng.uniform(0, 1)
    base = _hsv(hue, rng.uniform(0.05, 0.2), rng.uniform(0.35, 0.65))
    coarse = rng.normal(0, 1, (size // 8 + 1, size // 8 + 1, 3))
    smooth = ndimage.zoom(coarse, (8, 8, 1), order=1)[:size, :size]
    yy, xx = np.mgrid[0:size, 0:size]
    ang = rng.uniform(0, math.pi)
    grain = np.sin((xx * math.cos(ang) + yy * math.sin(ang)) * 2 * math.pi / rng.uniform(7, 14))
    img = base[None, None, :] + 0.06 * smooth + 0.03 * grain[..., None]
    return np.clip(img, 0, 1)


def _place(size: int, rng: np.random.Generator, rmin: float, rmax: float):
    r = rng.uniform(rmin, rmax) * size
    margin = 0.6 * r
    cy, cx = rng.uniform(margin, size - margin, 2)
    return cy, cx, r


# ---------------------------------------------------------------- IIS corpus


def iis_sample(size: int, rng: np.random.Generator, prompt_kind: str = "mask"):
    """One binary IIS sample: (image HxWx3 float, label HxW {0,1}, prompt)."""
    img = background(size, rng)
    visible_owner = np.full((size, size), -1, dtype=np.int64)
    n = int(rng.integers(1, 5))
    for k in range(n):
        kind = IIS_SHAPES[int(rng.integers(len(IIS_SHAPES)))]
        cy, cx, r = _place(size, rng, 0.12, 0.26)
        m = shape_mask(kind, size, cy, cx, r, rng.uniform(0, 2 * math.pi), rng.uniform(0.55, 1.0),
                       sides=int(rng.integers(3, 8)))
        hue = rng.uniform(0, 1)
        c1 = _hsv(hue, rng.uniform(0.4, 0.9), rng.uniform(0.55, 0.95))
        c2 = _hsv(hue + rng.uniform(-0.15, 0.15), rng.uniform(0.3, 0.9), rng.uniform(0.2, 0.6))
        tex = texture(TEXTURE_FAMILIES[int(rng.integers(len(TEXTURE_FAMILIES)))], size, c1, c2, rng)
        img[m] = tex[m]
        visible_owner[m] = k
    areas = np.bincount(visible_owner[visible_owner >= 0], minlength=n)
    min_area = max(12, (size * size) // 200)
    candidates = np.nonzero(areas >= min_area)[0]
    if len(candidates) == 0:
        return None
    target = int(candidates[int(rng.integers(len(candidates)))])
    label = (visible_owner == target).astype(np.int64)
    return np.clip(img, 0, 1), label, prompt_from_label(label, 1, prompt_kind)


def _check_args(n_train: int, n_val: int, size: int) -> None:
    if n_train <= 0 or n_val <= 0:
        raise ValueError("n_train and n_val must be positive")
    if size < MIN_SIZE:
        raise ValueError(f"size {size} too small to place shapes (minimum {MIN_SIZE})")


def _prepare_out(out: Path) -> Path:
    out = Path(out)
    for sub in ("images", "labels", "prompts"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _sample_rng(seed: int, split: str, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, 0 if split == "train" else 1, index, attempt])


def _parallel_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def gen_iis_dataset(seed: int, n_train: int, n_val: int, size: int = 64, out: str | Path = "iis",
                    prompt_kind: str = "mask", workers: int = 1) -> DatasetManifest:
    _check_args(n_train, n_val, size)
    out = _prepare_out(out)
    jobs = [("train", i) for i in range(n_train)] + [("val", i) for i in range(n_val)]

    def make(job):
        split, i = job
        attempt = 0
        while True:
            sample = iis_sample(size, _sample_rng(seed, split, i, attempt), prompt_kind)
            if sample is not None:
                break
            attempt += 1
        img, label, prompt = sample
        rid = f"{split}_{i:05d}"
        rec = Record(rid, split, f"images/{rid}.png", f"labels/{rid}.png", f"prompts/{rid}.png", prompt.kind)
        write_image(out / rec.image, img)
        write_label(out / rec.label, label)
        write_prompt(out / rec.prompt, prompt.mask)
        return rec

    records = _parallel_map(make, jobs, workers)
    manifest = DatasetManifest(out, "iis", size, 2, ["background", "object"], records,
                               meta={"seed": seed, "generator": "iis", "prompt_kind": prompt_kind})
    manifest.save()
    return manifest


# ------------------------------------------------------- downstream corpus


def class_families(num_classes: int) -> list[tuple[str, str]]:
    """(shape, texture) pair for every foreground class 1..num_classes-1; pairs are distinct."""
    fams = []
    n_s, n_t = len(SHAPE_FAMILIES), len(TEXTURE_FAMILIES)
    for k in range(num_classes - 1):
        fams.append((SHAPE_FAMILIES[k % n_s], TEXTURE_FAMILIES[(k + k // n_s) % n_t]))
    return fams


def downstream_sample(size: int, num_classes: int, rng: np.random.Generator):
    fams = class_families(num_classes)
    img = background(size, rng)
    label = np.zeros((size, size), dtype=np.int64)
    n = int(rng.integers(1, 4))
    classes = rng.choice(num_classes - 1, size=min(n, num_classes - 1), replace=False) + 1
    for cls in classes:
        shape, tex = fams[cls - 1]
        cy, cx, r = _place(size, rng, 0.16, 0.27)
        m = shape_mask(shape, size, cy, cx, r, rng.uniform(0, 2 * math.pi), rng.uniform(0.7, 1.0))
        # colour is random per object: class is carried by shape and texture only
        h = rng.uniform(0, 1)
        c1 = _hsv(h, rng.uniform(0.5, 0.9), rng.uniform(0.7, 0.95))
        c2 = _hsv(h + rng.uniform(-0.1, 0.1), rng.uniform(0.4, 0.8), rng.uniform(0.25, 0.5))
        t = texture(tex, size, c1, c2, rng)
        img[m] = t[m]
        label[m] = cls
    return np.clip(img, 0, 1), label


def gen_downstream_dataset(seed: int, n_train: int, n_val: int, size: int = 64, num_classes: int = 9,
                           out: str | Path = "semantic", workers: int = 1,
                           min_class_fraction: float = 0.05) -> DatasetManifest:
    _check_args(n_train, n_val, size)
    if not 3 <= num_classes <= 16:
        raise ValueError("num_classes must be in [3, 16] counting background")
    out = _prepare_out(out)
    jobs = [("train", i) for i in range(n_train)] + [("val", i) for i in range(n_val)]
    min_bg = 0.1 * size * size

    def make(job):
        split, i = job
        attempt = 0
        while True:
            img, label = downstream_sample(size, num_classes, _sample_rng(seed, split, i, attempt))
            # every foreground object must be visible and background must remain
            if (label == 0).sum() >= min_bg and len(np.unique(label)) >= 2:
                break
            attempt += 1
        rid = f"{split}_{i:05d}"
        rec = Record(rid, split, f"images/{rid}.png", f"labels/{rid}.png")
        write_image(out / rec.image, img)
        write_label(out / rec.label, label)
        return rec, np.bincount(np.unique(label), minlength=num_classes) > 0

    results = _parallel_map(make, jobs, workers)
    records = [r for r, _ in results]
    presence = np.array([p for (r, p) in results if r.split == "train"])
    frac = presence.mean(axis=0)
    # too few images for the histogram check to be meaningful below 50
    if n_train >= 50 and (frac < min_class_fraction).any():
        bad = np.nonzero(frac < min_class_fraction)[0].tolist()
        raise RuntimeError(f"classes {bad} appear in fewer than {min_class_fraction:.0%} of train images")
    names = ["background"] + [f"{s}_{t}" for s, t in class_families(num_classes)]
    manifest = DatasetManifest(out, "semantic", size, num_classes, names, records,
                               meta={"seed": seed, "generator": "downstream",
                                     "train_class_presence": [round(float(f), 4) for f in frac]})
    manifest.save()
    return manifest
