"""On-disk dataset layout and in-memory loading.

A dataset directory holds ``images/*.png`` (8-bit RGB), ``labels/*.png``
(8-bit single channel, raw class ids), optionally ``prompts/*.png`` (binary,
stored as 0/255) and a ``manifest.json``.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetError(RuntimeError):
    pass


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _png_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    PILImage.fromarray(arr).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to 8 bits (round to nearest)."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Path, image: np.ndarray) -> None:
    if image.dtype != np.uint8:
        image = to_uint8(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"expected HxWx3 image, got {image.shape}")
    atomic_write_bytes(path, _png_bytes(image))


def write_label(path: Path, label: np.ndarray) -> None:
    if label.ndim != 2:
        raise DatasetError(f"expected HxW label, got {label.shape}")
    if label.min() < 0 or label.max() > 255:
        raise DatasetError("label ids must fit in 8 bits")
    atomic_write_bytes(path, _png_bytes(label.astype(np.uint8)))


def write_prompt(path: Path, mask: np.ndarray) -> None:
    atomic_write_bytes(path, _png_bytes((mask > 0).astype(np.uint8) * 255))


def read_image(path: Path) -> np.ndarray:
    """Read an RGB PNG as float32 in [0, 1], shape HxWx3."""
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_label(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.uint8).astype(np.int64)


def read_prompt(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.uint8) > 0


@dataclass
class Record:
    id: str
    split: str
    image: str
    label: str
    prompt: str | None = None
    prompt_kind: str | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "split": self.split, "image": self.image, "label": self.label}
        if self.prompt is not None:
            out["prompt"] = self.prompt
            out["prompt_kind"] = self.prompt_kind
        return out


@dataclass
class DatasetManifest:
    root: Path
    kind: str
    size: int
    num_classes: int
    class_names: list[str]
    records: list[Record] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def splits(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            counts[r.split] = counts.get(r.split, 0) + 1
        return counts

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "kind": self.kind,
            "size": self.size,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "splits": self.splits,
            "meta": self.meta,
            "records": [r.to_json() for r in self.records],
        }

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        payload = json.dumps(self.to_json(), indent=2, sort_keys=True).encode("utf-8")
        atomic_write_bytes(path, payload)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise DatasetError(f"manifest not found: {path}")
        doc = json.loads(path.read_text("utf-8"))
        if doc.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {doc.get('version')!r}")
        records = [
            Record(
                id=r["id"],
                split=r["split"],
                image=r["image"],
                label=r["label"],
                prompt=r.get("prompt"),
                prompt_kind=r.get("prompt_kind"),
            )
            for r in doc["records"]
        ]
        return cls(
            root=path.parent,
            kind=doc["kind"],
            size=int(doc["size"]),
            num_classes=int(doc["num_classes"]),
            class_names=list(doc["class_names"]),
            records=records,
            meta=doc.get("meta", {}),
        )

    def validate(self) -> None:
        """Check every record's files exist and decode to consistent shapes."""
        for r in self.records:
            img = read_image(self.root / r.image)
            lab = read_label(self.root / r.label)
            if img.shape != (self.size, self.size, 3) or lab.shape != (self.size, self.size):
                raise DatasetError(f"record {r.id}: inconsistent shapes {img.shape} / {lab.shape}")
            if lab.max() >= self.num_classes:
                raise DatasetError(f"record {r.id}: label id {lab.max()} out of range")
            if r.prompt is not None:
                pr = read_prompt(self.root / r.prompt)
                if pr.shape != lab.shape:
                    raise DatasetError(f"record {r.id}: prompt shape {pr.shape}")

    def digest(self) -> str:
        """sha256 over the manifest and every referenced file's bytes."""
        h = hashlib.sha256()
        h.update(json.dumps(self.to_json(), sort_keys=True).encode("utf-8"))
        for r in self.records:
            for rel in (r.image, r.label, r.prompt):
                if rel is None:
                    continue
                h.update(rel.encode("utf-8"))
                h.update((self.root / rel).read_bytes())
        return h.hexdigest()


@dataclass
class SplitArrays:
    ids: list[str]
    images: np.ndarray  # N,H,W,3 float32 in [0,1]
    labels: np.ndarray  # N,H,W int64
    prompts: np.ndarray | None = None  # N,H,W bool

    def __len__(self) -> int:
        return len(self.ids)


def load_split(manifest: DatasetManifest, split: str) -> SplitArrays:
    recs = manifest.split(split)
    if not recs:
        raise DatasetError(f"split {split!r} is empty in {manifest.root}")
    images = np.stack([read_image(manifest.root / r.image) for r in recs])
    labels = np.stack([read_label(manifest.root / r.label) for r in recs])
    prompts = None
    if all(r.prompt is not None for r in recs):
        prompts = np.stack([read_prompt(manifest.root / r.prompt) for r in recs])
    return SplitArrays([r.id for r in recs], images, labels, prompts)


def copy_record_file(src_root: Path, dst_root: Path, rel: str) -> None:
    dst = dst_root / rel
    dst.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(dst, (src_root / rel).read_bytes())


def subset_dataset(manifest: DatasetManifest, keep_ids: set[str], out: Path, split: str = "train") -> DatasetManifest:
    """Copy a dataset keeping only ``keep_ids`` from ``split``; other splits are kept whole."""
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    records = [r for r in manifest.records if r.split != split or r.id in keep_ids]
    for r in records:
        for rel in (r.image, r.label, r.prompt):
            if rel is not None:
                copy_record_file(manifest.root, out, rel)
    sub = DatasetManifest(
        root=out,
        kind=manifest.kind,
        size=manifest.size,
        num_classes=manifest.num_classes,
        class_names=manifest.class_names,
        records=records,
        meta={**manifest.meta, "subset_of": manifest.digest()[:16], "subset_split": split},
    )
    sub.save()
    return sub
